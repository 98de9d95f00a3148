"""Q-Wiener increments and exact Ornstein-Uhlenbeck updates.

Noise convention. The covariance operator acts diagonally on the real
trigonometric basis with eigenvalue alpha_k^2 on both the cosine and sine
element of wavenumber q_k. Testing against any unit L^2 function phi must
give Var<W(t), phi> = t |Q^{1/2} phi|^2. Under the synthesis convention of
:mod:`growth_spde.spectral` that pins the per-component (re or im) variance
of a stored complex increment to

    Var = alpha_k^2 * dt / (2 L).

The statistical contract above is the authoritative fixture; see
tests/test_noise.py.

Coupling. Every step draws one primary and one auxiliary standard complex
Gaussian per mode, derived counter-style from (seed, stream, step). The raw
Wiener increment is a deterministic scaling of the primary draw; the exact
stochastic-convolution increment for any rate m loads on both draws with

    I_m = a(m) xi + b(m) zeta,
    a(m) = sigma * phi1(m dt),          (covariance with the raw increment)
    b(m) = sigma * sqrt(phi1(2 m dt) - phi1(m dt)^2),
    sigma = alpha_k sqrt(dt / (2 L)),

which reproduces the exact marginal variance alpha_k^2 (1 - e^{2 m dt}) /
(-2 m) / (2 L) per component and the exact covariance with the raw
increment. Integrators stepping different linear rates off the same path
therefore consume literally the same draws, the contract that common-random-
number estimators and the V + Z splitting rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spectral import GridSpec, SpectralField, phi1, synth_modes

__all__ = [
    "NoiseSpec",
    "NoisePath",
    "OUState",
    "StepKernel",
    "build_kernel",
    "sample_increment",
    "ou_step_exact",
    "sample_stationary_ou",
    "stationary_mode_variance",
    "stationary_field_l2_moment",
    "squared_slope_closed_form",
    "fit_mode_variance_slope",
    "fernique_lambda",
    "ou_sup_norm_samples",
]


@dataclass(frozen=True)
class NoiseSpec:
    """Per-mode noise amplitudes alpha_k and non-degeneracy floor."""

    alpha: np.ndarray
    white: bool = True
    delta: float | None = None

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        object.__setattr__(self, "alpha", a)
        if np.any(a < 0):
            raise ValueError("noise amplitudes must be nonnegative")
        if self.white and not np.allclose(a, 1.0):
            raise ValueError("white noise requires alpha_k = 1 for all modes")
        if self.delta is not None:
            if self.delta <= 0:
                raise ValueError("non-degeneracy bound delta must be positive")
            if np.any(a < self.delta):
                raise ValueError("alpha_k >= delta violated for some retained mode")

    @classmethod
    def white_noise(cls, grid: GridSpec) -> "NoiseSpec":
        return cls(alpha=np.ones(grid.K), white=True, delta=1.0)

    @classmethod
    def with_decay(cls, grid: GridSpec, exponent: float,
                   delta: float | None = None) -> "NoiseSpec":
        k = np.arange(1, grid.K + 1, dtype=float)
        return cls(alpha=k ** (-exponent), white=(exponent == 0.0), delta=delta)


class NoisePath:
    """Replayable per-step Gaussian draws for a block of coupled paths.

    Draw derivation is counter-based: step n uses a Philox generator keyed
    by (seed, stream) with the step index in the counter word, so any step
    of any path block can be regenerated independently and workers on
    disjoint streams never collide.
    """

    def __init__(self, seed: int, grid: GridSpec, spec: NoiseSpec, dt: float,
                 n_paths: int = 1, stream: int = 0):
        if dt < 0:
            raise ValueError("dt must be nonnegative")
        self.seed = int(seed)
        self.grid = grid
        self.spec = spec
        self.dt = float(dt)
        self.n_paths = int(n_paths)
        self.stream = int(stream)

    def gaussians(self, step_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Primary and auxiliary standard complex normals, shape (n_paths, K)."""
        bg = np.random.Philox(
            key=np.array([self.seed, self.stream], dtype=np.uint64),
            counter=np.array([0, 0, 0, step_index], dtype=np.uint64),
        )
        z = np.random.Generator(bg).standard_normal((self.n_paths, 4, self.grid.K))
        xi = z[:, 0] + 1j * z[:, 1]
        zeta = z[:, 2] + 1j * z[:, 3]
        return xi, zeta

    def with_stream(self, stream: int, n_paths: int | None = None) -> "NoisePath":
        return NoisePath(self.seed, self.grid, self.spec, self.dt,
                         self.n_paths if n_paths is None else n_paths, stream)


@dataclass(frozen=True)
class StepKernel:
    """Precomputed one-step weights for a diagonal linear rate vector m.

    exp       e^{m dt}
    phi1dt    dt phi1(m dt), the ETD1 forcing weight
    phi2dt    dt phi2(m dt), weight of linear-in-time forcing increments
    wiener    per-component std of the raw Wiener increment
    conv_xi   loading of the exact convolution increment on the primary draw
    conv_zeta loading on the auxiliary draw
    """

    dt: float
    rates: np.ndarray
    exp: np.ndarray
    phi1dt: np.ndarray
    phi2dt: np.ndarray
    wiener: np.ndarray
    conv_xi: np.ndarray
    conv_zeta: np.ndarray


def _phi1_gap(z: np.ndarray) -> np.ndarray:
    """phi1(2z) - phi1(z)^2, series-evaluated near 0 where it cancels."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-3
    zs = z[small]
    out[small] = zs**2 / 12.0 * (1.0 + zs + 17.0 * zs**2 / 30.0)
    zb = z[~small]
    out[~small] = phi1(2.0 * zb) - phi1(zb) ** 2
    return np.maximum(out, 0.0)


def build_kernel(grid: GridSpec, spec: NoiseSpec, rates: np.ndarray,
                 dt: float) -> StepKernel:
    from .spectral import phi2

    rates = np.asarray(rates, dtype=float)
    z = rates * dt
    sigma = spec.alpha * np.sqrt(dt / (2.0 * grid.L))
    return StepKernel(
        dt=float(dt),
        rates=rates,
        exp=np.exp(z),
        phi1dt=dt * phi1(z),
        phi2dt=dt * phi2(z),
        wiener=sigma,
        conv_xi=sigma * phi1(z),
        conv_zeta=sigma * np.sqrt(_phi1_gap(z)),
    )


def conv_increment(kern: StepKernel, xi: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """Exact stochastic-convolution increment from the step's shared draws."""
    return kern.conv_xi * xi + kern.conv_zeta * zeta


def wiener_increment(kern: StepKernel, xi: np.ndarray) -> np.ndarray:
    return kern.wiener * xi


def sample_increment(path: NoisePath, step_index: int) -> SpectralField:
    """The Q-Wiener increment over one step as a field (single path)."""
    xi, _ = path.gaussians(step_index)
    c = path.spec.alpha * np.sqrt(path.dt / (2.0 * path.grid.L)) * xi[0]
    return SpectralField(path.grid, c)


@dataclass(frozen=True)
class OUState:
    """State of an Ornstein-Uhlenbeck mode vector with damping alpha >= 0."""

    z: SpectralField
    alpha: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("damping must be nonnegative")


def ou_step_exact(state: OUState, dt: float, path: NoisePath,
                  step_index: int) -> OUState:
    """Distributionally exact update of the linear stochastic equation.

    Per mode: z <- e^{m dt} z + I_m with m = lam_k - alpha and I_m the exact
    convolution increment built from the step's shared draws.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    grid = state.z.grid
    kern = build_kernel(grid, path.spec, grid.lam - state.alpha, dt)
    xi, zeta = path.gaussians(step_index)
    c = kern.exp * state.z.coeff + conv_increment(kern, xi[0], zeta[0])
    return OUState(z=SpectralField(grid, c), alpha=state.alpha, t=state.t + dt)


def stationary_mode_variance(grid: GridSpec, spec: NoiseSpec,
                             alpha: float = 0.0) -> np.ndarray:
    """Per-component stationary variance alpha_k^2 / (-2 m_k) / (2 L)."""
    m = grid.lam - alpha
    if np.any(m >= 0):
        raise ValueError("stationary law undefined: some mode is undamped")
    return spec.alpha**2 / (-2.0 * m) / (2.0 * grid.L)


def sample_stationary_ou(spec: NoiseSpec, grid: GridSpec, alpha: float,
                         seed: int, n_paths: int = 1,
                         stream: int = 2**32) -> np.ndarray:
    """Stationary-law samples of the damped OU field, shape (n_paths, K)."""
    if alpha < 0:
        raise ValueError("damping must be nonnegative")
    var = stationary_mode_variance(grid, spec, alpha)
    bg = np.random.Philox(key=np.array([seed, stream], dtype=np.uint64))
    g = np.random.Generator(bg).standard_normal((n_paths, 2, grid.K))
    return np.sqrt(var) * (g[:, 0] + 1j * g[:, 1])


def stationary_field_l2_moment(grid: GridSpec, spec: NoiseSpec,
                               alpha: float = 0.0) -> float:
    """E |Z|^2_{L2} of the stationary field: sum_k alpha_k^2 / |2 m_k|."""
    var = stationary_mode_variance(grid, spec, alpha)
    return float(2.0 * grid.L * np.sum(2.0 * var))


# ----------------------------------------------------------------------
# regularity statistics of the stochastic convolution
# ----------------------------------------------------------------------

def fit_mode_variance_slope(samples: np.ndarray, grid: GridSpec) -> float:
    """Log-log slope of per-mode second moments of the derivative field.

    For white noise the stationary law gives E|d_k|^2 = 1 / (2 L q_k^2),
    so the fitted slope should be -2.
    """
    d = samples * (1j * grid.q)
    var = np.mean(np.abs(d) ** 2, axis=0)
    k = np.arange(1, grid.K + 1, dtype=float)
    slope, _ = np.polyfit(np.log(k), np.log(var), 1)
    return float(slope)


def squared_slope_closed_form(grid: GridSpec, spec: NoiseSpec,
                              alpha: float = 0.0) -> float:
    """Closed form of E |(Z_x)^2|^2_{L2} for the stationary field.

    Z_x is a homogeneous Gaussian field, so pointwise E[Z_x(x)^4] =
    3 (E[Z_x(x)^2])^2 and the integral collapses to 3 L (E g^2)^2 with
    E g^2 = 2 sum_k q_k^2 E|z_k|^2.
    """
    var = stationary_mode_variance(grid, spec, alpha)
    eg2 = float(np.sum(2.0 * grid.q**2 * 2.0 * var))
    return 3.0 * grid.L * eg2**2


def fernique_lambda(x: np.ndarray, rel_tol: float = 0.25,
                    iters: int = 40) -> float:
    """Largest exponent lam with a doubling-stable mean of exp(lam * x).

    x are nonnegative samples (squared L^4 norms of the derivative field).
    Stability means the half-sample mean and the full-sample mean agree to
    rel_tol, the empirical proxy for finiteness of the exponential moment.
    Bisection on lam; returns 0.0 only if even tiny exponents are unstable.
    """
    x = np.asarray(x, dtype=float)
    half = x[: x.size // 2]

    def stable(lam: float) -> bool:
        m_full = np.mean(np.exp(lam * x))
        m_half = np.mean(np.exp(lam * half))
        return np.isfinite(m_full) and abs(m_half - m_full) <= rel_tol * m_full

    lo, hi = 0.0, 1.0
    while stable(hi) and hi < 1e6:
        lo, hi = hi, 2.0 * hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if stable(mid):
            lo = mid
        else:
            hi = mid
    return lo


def ou_sup_norm_samples(grid: GridSpec, spec: NoiseSpec, T: float, dt: float,
                        M: int, seed: int, s: float,
                        alpha: float = 0.0) -> np.ndarray:
    """Per-path sup over the step grid of the H^s norm of the OU field."""
    from .spectral import sobolev_norm_sq_modes

    kern = build_kernel(grid, spec, grid.lam - alpha, dt)
    path = NoisePath(seed, grid, spec, dt, n_paths=M)
    z = np.zeros((M, grid.K), dtype=np.complex128)
    sup = np.zeros(M)
    n_steps = int(round(T / dt))
    for n in range(n_steps):
        xi, zeta = path.gaussians(n)
        z = kern.exp * z + conv_increment(kern, xi, zeta)
        sup = np.maximum(sup, sobolev_norm_sq_modes(grid, z, s))
    return np.sqrt(sup)
