"""Truncated Fourier calculus for mean-zero L-periodic real fields.

A field is stored by its complex amplitudes c_k, k = 1..K, with the real
synthesis convention

    u(x) = sum_k ( c_k e^{i q_k x} + conj(c_k) e^{-i q_k x} ),   q_k = 2 pi k / L.

The zero mode is absent (mean-zero constraint) and the Nyquist mode is
excluded (K = N/2 - 1), so derivatives of real fields stay real. Under this
convention Parseval reads |u|^2_{L2} = 2 L sum_k |c_k|^2, an exact identity
against N-point trapezoidal quadrature.

Quadratic products are evaluated on a grid zero-padded to 2N points. A
product of two fields with K modes has at most 2K = N - 2 modes, so the
padded transform is alias-free and retained modes of products are exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridSpec",
    "SpectralField",
    "synthesize",
    "analyze",
    "derivative",
    "apply_linear_semigroup",
    "nonlinearity",
    "norm",
    "inner_product",
    "inner_product_physical",
    "random_field",
    "save_field",
    "load_field",
    "phi1",
    "phi2",
]

FIELD_MAGIC = b"SGF"
FIELD_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    """Domain length, truncation and spectral data shared by all fields.

    Attributes
    ----------
    L : domain length.
    N : physical grid size (even, >= 16).
    K : retained mode count, N // 2 - 1.
    q : wavenumbers 2 pi k / L for k = 1..K.
    lam : eigenvalues of the leading operator A = -dxxxx, lam_k = -q_k^4.
    poincare_lambda : spectral gap q_1^4 = min_k |lam_k|.
    """

    L: float
    N: int
    K: int
    q: np.ndarray
    lam: np.ndarray
    poincare_lambda: float

    @classmethod
    def create(cls, N: int = 64, L: float = 2.0 * np.pi) -> "GridSpec":
        if L <= 0:
            raise ValueError(f"domain length must be positive, got {L}")
        if N < 16 or N % 2 != 0:
            raise ValueError(f"grid size must be an even integer >= 16, got {N}")
        K = N // 2 - 1
        q = 2.0 * np.pi * np.arange(1, K + 1) / L
        lam = -(q**4)
        return cls(L=float(L), N=int(N), K=K, q=q, lam=lam,
                   poincare_lambda=float(q[0] ** 4))

    def nodes(self, refine: int = 1) -> np.ndarray:
        """Physical collocation points of the (optionally refined) grid."""
        m = self.N * refine
        return self.L * np.arange(m) / m


@dataclass(frozen=True)
class SpectralField:
    """A mean-zero periodic real field given by its K retained amplitudes."""

    grid: GridSpec
    coeff: np.ndarray  # complex, shape (K,)

    def __post_init__(self):
        c = np.asarray(self.coeff, dtype=np.complex128)
        if c.shape != (self.grid.K,):
            raise ValueError(f"expected {self.grid.K} coefficients, got shape {c.shape}")
        object.__setattr__(self, "coeff", c)

    @classmethod
    def zero(cls, grid: GridSpec) -> "SpectralField":
        return cls(grid, np.zeros(grid.K, dtype=np.complex128))

    @classmethod
    def from_modes(cls, grid: GridSpec, modes: dict[int, complex]) -> "SpectralField":
        c = np.zeros(grid.K, dtype=np.complex128)
        for k, v in modes.items():
            if not 1 <= k <= grid.K:
                raise ValueError(f"mode {k} outside 1..{grid.K}")
            c[k - 1] = v
        return cls(grid, c)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        _check_same_grid(self, other)
        return SpectralField(self.grid, self.coeff + other.coeff)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _check_same_grid(self, other)
        return SpectralField(self.grid, self.coeff - other.coeff)

    def __mul__(self, scalar: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeff * scalar)

    __rmul__ = __mul__


def _check_same_grid(u: SpectralField, v: SpectralField):
    if u.grid.N != v.grid.N or u.grid.L != v.grid.L:
        raise ValueError("fields live on different grids")


# ----------------------------------------------------------------------
# array layer: all numerics operate on (..., K) complex mode arrays so
# ensemble code can batch paths along leading axes
# ----------------------------------------------------------------------

def synth_modes(grid: GridSpec, coeff: np.ndarray, refine: int = 1) -> np.ndarray:
    """Physical samples on a grid of N * refine points."""
    m = grid.N * refine
    spec = np.zeros(coeff.shape[:-1] + (m // 2 + 1,), dtype=np.complex128)
    spec[..., 1:grid.K + 1] = coeff * m
    return np.fft.irfft(spec, n=m, axis=-1)


def analyze_samples(grid: GridSpec, samples: np.ndarray) -> np.ndarray:
    """Retained modes of physical samples (projection when modes > K exist)."""
    m = samples.shape[-1]
    spec = np.fft.rfft(samples, axis=-1)
    return spec[..., 1:grid.K + 1] / m


def deriv_factor(grid: GridSpec, order: int) -> np.ndarray:
    return (1j * grid.q) ** order


def product_modes(grid: GridSpec, ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    """Retained modes of the pointwise product of two fields (alias-free)."""
    a = synth_modes(grid, ca, refine=2)
    b = synth_modes(grid, cb, refine=2)
    return analyze_samples(grid, a * b)


def bilinear_grad_modes(grid: GridSpec, ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    """Retained modes of (du/dx)(dv/dx), the core of the nonlinearity."""
    d = deriv_factor(grid, 1)
    return product_modes(grid, ca * d, cb * d)


def l2_norm_sq_modes(grid: GridSpec, coeff: np.ndarray) -> np.ndarray:
    return 2.0 * grid.L * np.sum(np.abs(coeff) ** 2, axis=-1)


def sobolev_norm_sq_modes(grid: GridSpec, coeff: np.ndarray, s: float) -> np.ndarray:
    w = (1.0 + grid.q**2) ** s
    return 2.0 * grid.L * np.sum(w * np.abs(coeff) ** 2, axis=-1)


def h1_inner_modes(grid: GridSpec, ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    """H^1 inner product with weight (1 + q^2), matching the H^1 norm."""
    w = 1.0 + grid.q**2
    return 2.0 * grid.L * np.sum(w * np.real(np.conj(ca) * cb), axis=-1)


def l2_inner_modes(grid: GridSpec, ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    return 2.0 * grid.L * np.sum(np.real(np.conj(ca) * cb), axis=-1)


def lp_norm_modes(grid: GridSpec, coeff: np.ndarray, p: float, refine: int = 2) -> np.ndarray:
    """L^p norm by quadrature on a refined synthesis grid.

    The default 2x refinement makes the L^4 quadrature exact for retained
    trig polynomials: u^4 has modes up to 4K < 2N, so no alias lands on the
    mean.
    """
    u = synth_modes(grid, coeff, refine=refine)
    dx = grid.L / u.shape[-1]
    return (np.sum(np.abs(u) ** p, axis=-1) * dx) ** (1.0 / p)


# ----------------------------------------------------------------------
# public single-field operations
# ----------------------------------------------------------------------

def synthesize(field: SpectralField, refine: int = 1) -> np.ndarray:
    """Evaluate the field at the N * refine collocation points."""
    return synth_modes(field.grid, field.coeff, refine=refine)


def analyze(grid: GridSpec, samples: np.ndarray) -> SpectralField:
    """Inverse of synthesize on the base grid (exact round trip)."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape != (grid.N,):
        raise ValueError(f"expected {grid.N} samples, got {samples.shape}")
    return SpectralField(grid, analyze_samples(grid, samples))


def derivative(field: SpectralField, order: int) -> SpectralField:
    if not 1 <= order <= 4:
        raise ValueError(f"derivative order must be in 1..4, got {order}")
    return SpectralField(field.grid, field.coeff * deriv_factor(field.grid, order))


def semigroup_rates(grid: GridSpec, damping: float = 0.0,
                    include_instability: bool = False) -> np.ndarray:
    """Per-mode exponential rates mu_k of the linear flow.

    mu_k = lam_k - damping, plus q_k^2 when the backward-diffusion
    instability term is active.
    """
    mu = grid.lam - damping
    if include_instability:
        mu = mu + grid.q**2
    return mu


def apply_linear_semigroup(field: SpectralField, t: float, damping: float = 0.0,
                           include_instability: bool = False) -> SpectralField:
    if t < 0:
        raise ValueError("semigroup time must be nonnegative")
    mu = semigroup_rates(field.grid, damping, include_instability)
    return SpectralField(field.grid, field.coeff * np.exp(mu * t))


def nonlinearity(u: SpectralField, v: SpectralField) -> SpectralField:
    """Quadratic term d^2/dx^2 (u_x v_x), alias-free on retained modes.

    For u = v this is the surface-growth nonlinearity (h_x^2)_xx, which is
    L^2-orthogonal to h: <h, (h_x^2)_xx> = (1/3) int (h_x^3)_x = 0.
    """
    _check_same_grid(u, v)
    grid = u.grid
    prod = bilinear_grad_modes(grid, u.coeff, v.coeff)
    return SpectralField(grid, -grid.q**2 * prod)


def norm(field: SpectralField, kind: str = "L2", s: float | None = None) -> float:
    """Norm of the field.

    kind is one of "L2", "H" (spectral H^s with weight (1+q^2)^s, s in
    [-4, 2]), "W14" (Sobolev W^{1,4} by refined quadrature) or "Linf".
    """
    grid, c = field.grid, field.coeff
    if kind == "L2":
        return float(np.sqrt(l2_norm_sq_modes(grid, c)))
    if kind == "H":
        if s is None:
            raise ValueError("H norm needs the smoothness parameter s")
        if not -4.0 <= s <= 2.0:
            raise ValueError(f"H^s supported for s in [-4, 2], got {s}")
        return float(np.sqrt(sobolev_norm_sq_modes(grid, c, s)))
    if kind == "W14":
        u4 = lp_norm_modes(grid, c, 4.0) ** 4
        du4 = lp_norm_modes(grid, c * deriv_factor(grid, 1), 4.0) ** 4
        return float((u4 + du4) ** 0.25)
    if kind == "Linf":
        return float(np.max(np.abs(synth_modes(grid, c, refine=4))))
    raise ValueError(f"unknown norm kind {kind!r}")


def h1_norm(field: SpectralField) -> float:
    return norm(field, "H", s=1.0)


def inner_product(u: SpectralField, v: SpectralField, orders: tuple[int, int] = (0, 0)) -> float:
    """L^2 inner product <d^a u, d^b v>, computed spectrally (exact)."""
    _check_same_grid(u, v)
    grid = u.grid
    a, b = orders
    ca = u.coeff * deriv_factor(grid, a) if a else u.coeff
    cb = v.coeff * deriv_factor(grid, b) if b else v.coeff
    return float(l2_inner_modes(grid, ca, cb))


def inner_product_physical(u: SpectralField, v: SpectralField, w: SpectralField) -> float:
    """Triple integral int u v w dx on the padded grid (alias-free).

    The integrand has at most 3K < 2N modes, so 2N-point quadrature is
    exact for retained trig polynomials.
    """
    _check_same_grid(u, v)
    _check_same_grid(u, w)
    grid = u.grid
    return float(triple_integral_modes(grid, u.coeff, v.coeff, w.coeff))


def triple_integral_modes(grid: GridSpec, ca, cb, cc) -> np.ndarray:
    a = synth_modes(grid, ca, refine=2)
    b = synth_modes(grid, cb, refine=2)
    c = synth_modes(grid, cc, refine=2)
    dx = grid.L / a.shape[-1]
    return np.sum(a * b * c, axis=-1) * dx


def random_field(grid: GridSpec, rng: np.random.Generator, decay: float = 1.0,
                 amplitude: float = 1.0) -> SpectralField:
    """Random field with mode magnitudes ~ k^{-decay}, for tests and probes."""
    k = np.arange(1, grid.K + 1, dtype=float)
    scale = amplitude * k ** (-decay)
    c = scale * (rng.standard_normal(grid.K) + 1j * rng.standard_normal(grid.K))
    return SpectralField(grid, c)


# ----------------------------------------------------------------------
# phi functions of exponential integrators, series-evaluated near 0
# ----------------------------------------------------------------------

def phi1(z: np.ndarray) -> np.ndarray:
    """(e^z - 1) / z, cancellation-safe via Taylor series for small |z|."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-4
    zs = z[small]
    out[small] = 1.0 + zs / 2.0 + zs**2 / 6.0 + zs**3 / 24.0
    zb = z[~small]
    out[~small] = np.expm1(zb) / zb
    return out


def phi2(z: np.ndarray) -> np.ndarray:
    """(e^z - 1 - z) / z^2, cancellation-safe via Taylor series for small |z|."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-3
    zs = z[small]
    out[small] = 0.5 + zs / 6.0 + zs**2 / 24.0 + zs**3 / 120.0
    zb = z[~small]
    out[~small] = (np.expm1(zb) - zb) / zb**2
    return out


# ----------------------------------------------------------------------
# snapshot serialization: magic + version byte + (L, N, K, re/im pairs)
# ----------------------------------------------------------------------

def save_field(field: SpectralField, path: str, fmt: str = "binary") -> None:
    grid, c = field.grid, field.coeff
    if fmt == "binary":
        header = np.array([grid.L], dtype="<f8").tobytes()
        dims = np.array([grid.N, grid.K], dtype="<u4").tobytes()
        body = np.empty(2 * grid.K, dtype="<f8")
        body[0::2] = c.real
        body[1::2] = c.imag
        with open(path, "wb") as fh:
            fh.write(FIELD_MAGIC + bytes([FIELD_VERSION]) + header + dims + body.tobytes())
    elif fmt == "csv":
        vals = [repr(float(grid.L)), str(grid.N), str(grid.K)]
        for v in c:
            vals.append(repr(float(v.real)))
            vals.append(repr(float(v.imag)))
        with open(path, "w") as fh:
            fh.write(f"# growth-spde field v{FIELD_VERSION}\n")
            fh.write(",".join(vals) + "\n")
    else:
        raise ValueError(f"unknown field format {fmt!r}")


def load_field(path: str) -> SpectralField:
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head[:3] == FIELD_MAGIC:
            if head[3] != FIELD_VERSION:
                raise ValueError(f"unsupported field version {head[3]}")
            raw = fh.read()
            L = float(np.frombuffer(raw[:8], dtype="<f8")[0])
            N, K = (int(x) for x in np.frombuffer(raw[8:16], dtype="<u4"))
            body = np.frombuffer(raw[16:16 + 16 * K], dtype="<f8")
            grid = GridSpec.create(N=N, L=L)
            if grid.K != K:
                raise ValueError(f"inconsistent header: N={N} implies K={grid.K}, file says {K}")
            return SpectralField(grid, body[0::2] + 1j * body[1::2])
    # fall through to CSV
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith(f"# growth-spde field v{FIELD_VERSION}"):
            raise ValueError(f"{path}: not a recognized field snapshot")
        vals = fh.readline().strip().split(",")
    L, N, K = float(vals[0]), int(vals[1]), int(vals[2])
    grid = GridSpec.create(N=N, L=L)
    nums = np.array([float(v) for v in vals[3:3 + 2 * K]])
    return SpectralField(grid, nums[0::2] + 1j * nums[1::2])
