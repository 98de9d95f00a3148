"""Monte Carlo estimation of the transition semigroup and its regularity.

Everything here is path-parallel: an ensemble advances an (M, K) block of
mode vectors with one shared draw pair per step, and difference estimators
(gradients, moduli, restart comparisons) reuse identical streams for both
legs, the common-random-number coupling that makes these comparisons
resolve at desk scale.

Gradient estimation follows the integration-by-parts representation

    D_h P_t phi(x) = (1/t) E[ phi(u(t, x)) int_0^t <Q^{-1} psi(s), dW(s)> ],

with psi the tangent flow along the cut-off dynamics started at h. The
stochastic integral consumes the same raw Wiener increments that drive u.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from .dynamics import CutoffSpec, cutoff_core, h1_pairing, quad_drift, tangent_core
from .noise import NoisePath, NoiseSpec, StepKernel, build_kernel, conv_increment
from .spectral import GridSpec, SpectralField, l2_norm_sq_modes, semigroup_rates, sobolev_norm_sq_modes

__all__ = [
    "Functional",
    "SemigroupEstimate",
    "EnsembleSummary",
    "default_functionals",
    "mode_projection",
    "clipped_norm",
    "estimate_semigroup",
    "bel_gradient",
    "strong_feller_modulus",
    "ModulusTable",
    "tau_tail",
    "TauTailTable",
    "markov_restart_test",
    "wilson_interval",
    "run_ensemble",
]


@dataclass(frozen=True)
class Functional:
    """A scalar observable of the state, vectorized over path blocks."""

    name: str
    fn: Callable[[GridSpec, np.ndarray], np.ndarray]
    bounded: bool = True

    def __call__(self, grid: GridSpec, c: np.ndarray) -> np.ndarray:
        vals = np.asarray(self.fn(grid, c), dtype=float)
        if self.bounded:
            vals = np.clip(vals, -1.0, 1.0)
        return vals


def mode_projection(k: int, part: str = "cos", bounded: bool = True) -> Functional:
    """Coefficient of the orthonormal cosine/sine basis element of mode k."""

    def fn(grid, c):
        amp = np.sqrt(2.0 * grid.L)
        comp = c[..., k - 1].real if part == "cos" else -c[..., k - 1].imag
        return amp * comp

    return Functional(name=f"proj_{part}{k}", fn=fn, bounded=bounded)


def clipped_norm(kind: str = "L2", s: float | None = None, scale: float = 1.0) -> Functional:
    def fn(grid, c):
        if kind == "L2":
            v = np.sqrt(l2_norm_sq_modes(grid, c))
        elif kind == "H":
            v = np.sqrt(sobolev_norm_sq_modes(grid, c, s))
        else:
            raise ValueError(f"unsupported norm kind {kind!r}")
        return v / scale

    label = f"norm_{kind}{'' if s is None else s}"
    return Functional(name=label, fn=fn, bounded=True)


def default_functionals(grid: GridSpec) -> list[Functional]:
    """Clipped low-mode projections and clipped norms: bounded and cheap."""
    return [
        mode_projection(1, "cos"),
        mode_projection(1, "sin"),
        mode_projection(2, "cos"),
        clipped_norm("L2"),
        clipped_norm("H", s=1.0, scale=4.0),
    ]


@dataclass(frozen=True)
class SemigroupEstimate:
    value: float
    stderr: float
    paths: int
    t: float
    seed: int
    stream: int
    n_blowup: int = 0

    @property
    def blowup_flagged(self) -> bool:
        return self.n_blowup > 0


@dataclass(frozen=True)
class EnsembleSummary:
    """Per-functional Monte Carlo summary with provenance."""

    name: str
    mean: float
    variance: float
    stderr: float
    paths: int
    seed: int
    stream: int

    @classmethod
    def from_values(cls, name: str, values: np.ndarray, seed: int,
                    stream: int = 0) -> "EnsembleSummary":
        values = np.asarray(values, dtype=float)
        return cls(name=name, mean=float(np.mean(values)),
                   variance=float(np.var(values, ddof=1)),
                   stderr=float(np.std(values, ddof=1) / np.sqrt(values.size)),
                   paths=int(values.size), seed=seed, stream=stream)


def wilson_interval(successes: int, n: int, z: float = 3.0) -> tuple[float, float]:
    """Wilson score interval, default 3-sigma."""
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return max(0.0, center - half), min(1.0, center + half)


# ----------------------------------------------------------------------
# batched integrators
# ----------------------------------------------------------------------

class _Engine:
    """One-step advance of a path block for a chosen model variant."""

    def __init__(self, grid: GridSpec, spec: NoiseSpec, dt: float,
                 cutoff: CutoffSpec | None = None, instability: bool = True,
                 nonlinear: bool = True):
        self.grid = grid
        self.cutoff = cutoff
        self.nonlinear = nonlinear
        if cutoff is not None:
            rates = grid.lam
        else:
            rates = semigroup_rates(grid, 0.0, instability)
        self.kern = build_kernel(grid, spec, rates, dt)

    def drift(self, c: np.ndarray) -> np.ndarray | float:
        if not self.nonlinear:
            return 0.0
        if self.cutoff is None:
            return quad_drift(self.grid, c)
        zeta = sobolev_norm_sq_modes(self.grid, c, 1.0)
        return self.cutoff.chi(zeta)[..., None] * cutoff_core(self.grid, c)

    def step(self, c: np.ndarray, xi, zeta) -> np.ndarray:
        out = self.kern.exp * c + conv_increment(self.kern, xi, zeta)
        drift = self.drift(c)
        if self.nonlinear:
            out = out + self.kern.phi1dt * drift
        return out


def _as_block(x, M: int, K: int) -> np.ndarray:
    if isinstance(x, SpectralField):
        x = x.coeff
    x = np.asarray(x, dtype=complex)
    if x.ndim == 1:
        return np.broadcast_to(x, (M, K)).copy()
    if x.shape != (M, K):
        raise ValueError(f"state block must have shape ({M}, {K})")
    return x.copy()


def run_ensemble(grid: GridSpec, spec: NoiseSpec, x, T: float, dt: float,
                 M: int, seed: int, stream: int = 0,
                 cutoff: CutoffSpec | None = None, instability: bool = True,
                 nonlinear: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Advance M coupled paths to time T; returns (states, alive mask).

    Paths that leave the representable range are frozen as NaN rows and
    reported through the mask, never silently dropped.
    """
    eng = _Engine(grid, spec, dt, cutoff, instability, nonlinear)
    path = NoisePath(seed, grid, spec, dt, n_paths=M, stream=stream)
    c = _as_block(x, M, grid.K)
    n_steps = int(round(T / dt))
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            xi, zeta = path.gaussians(n)
            c = eng.step(c, xi, zeta)
    alive = np.all(np.isfinite(c), axis=-1)
    return c, alive


def _reduce(phi_vals: np.ndarray, alive: np.ndarray, t: float, seed: int,
            stream: int, max_dead_frac: float = 0.01) -> SemigroupEstimate:
    M = alive.size
    dead = int(M - alive.sum())
    if dead > max_dead_frac * M:
        raise RuntimeError(f"{dead}/{M} paths blew up; estimate unreliable")
    vals = phi_vals[alive]
    return SemigroupEstimate(value=float(np.mean(vals)),
                             stderr=float(np.std(vals, ddof=1) / np.sqrt(vals.size)),
                             paths=int(vals.size), t=t, seed=seed,
                             stream=stream, n_blowup=dead)


def estimate_semigroup(phi: Functional, x, t: float, M: int, grid: GridSpec,
                       spec: NoiseSpec, dt: float, seed: int, stream: int = 0,
                       cutoff: CutoffSpec | None = None, instability: bool = True,
                       nonlinear: bool = True) -> SemigroupEstimate:
    """Monte Carlo mean of phi(u(t; x)) over M independent paths."""
    if M < 1:
        raise ValueError("need at least one path")
    if t == 0.0:
        x0 = _as_block(x, 1, grid.K)
        return SemigroupEstimate(value=float(phi(grid, x0)[0]), stderr=0.0,
                                 paths=M, t=0.0, seed=seed, stream=stream)
    c, alive = run_ensemble(grid, spec, x, t, dt, M, seed, stream,
                            cutoff=cutoff, instability=instability,
                            nonlinear=nonlinear)
    return _reduce(phi(grid, c), alive, t, seed, stream)


def bel_gradient(phi: Functional, x, h_dir, t: float, cutoff: CutoffSpec,
                 M: int, grid: GridSpec, spec: NoiseSpec, dt: float,
                 seed: int, stream: int = 0,
                 nonlinear: bool = True) -> SemigroupEstimate:
    """Directional semigroup derivative via the tangent-flow representation.

    Runs the coupled pair (u, psi) with psi(0) = h_dir along the cut-off
    dynamics and accumulates S = sum_n <Q^{-1} psi(t_n), dW_n> from the
    same raw increments that drive u. The estimate is mean(phi(u_T) S)/t.
    Requires a nondegenerate covariance (all alpha_k > 0).
    """
    if np.any(spec.alpha <= 0):
        raise ValueError("gradient estimator needs alpha_k > 0 on every retained mode")
    if t <= 0:
        raise ValueError("horizon must be positive")
    eng = _Engine(grid, spec, dt, cutoff=cutoff, nonlinear=nonlinear)
    path = NoisePath(seed, grid, spec, dt, n_paths=M, stream=stream)
    c = _as_block(x, M, grid.K)
    psi = _as_block(h_dir, M, grid.K)
    S = np.zeros(M)
    kern = eng.kern
    inv_q = spec.alpha**-2
    n_steps = int(round(t / dt))
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(n_steps):
            xi, zeta = path.gaussians(n)
            dw = kern.wiener * xi
            S += 2.0 * grid.L * np.sum(inv_q * np.real(np.conj(psi) * dw), axis=-1)
            if nonlinear:
                zeta_arg = sobolev_norm_sq_modes(grid, c, 1.0)
                chi = cutoff.chi(zeta_arg)[..., None]
                chip = cutoff.chi_prime(zeta_arg)
                pair = h1_pairing(grid, c, psi)
                drift_u = chi * cutoff_core(grid, c)
                drift_psi = (chi * tangent_core(grid, c, psi)
                             + (2.0 * chip * pair)[..., None] * cutoff_core(grid, c))
                psi = kern.exp * psi + kern.phi1dt * drift_psi
                c = kern.exp * c + kern.phi1dt * drift_u + conv_increment(kern, xi, zeta)
            else:
                psi = kern.exp * psi
                c = kern.exp * c + conv_increment(kern, xi, zeta)
    alive = np.all(np.isfinite(c), axis=-1) & np.isfinite(S)
    return _reduce(phi(grid, c) * S / t, alive, t, seed, stream)


@dataclass
class ModulusTable:
    """Continuity modulus of the semigroup over a ladder of shift sizes."""

    scales: np.ndarray            # |h|_{H1}
    modulus: np.ndarray           # sup over functionals of |P phi(x+h) - P phi(x)|
    stderr: np.ndarray
    per_functional: np.ndarray    # (n_scales, n_functionals)
    names: list[str]
    fit_constant: float           # modulus ~ C |h| log(1/|h|)
    fit_residual: float
    loglog_slope: float

    @property
    def nonincreasing(self) -> bool:
        order = np.argsort(self.scales)
        m = self.modulus[order]
        e = self.stderr[order]
        return bool(np.all(m[1:] >= m[:-1] - 3.0 * np.hypot(e[1:], e[:-1])))


def strong_feller_modulus(phis: list[Functional], x, t: float,
                          h_scales, M: int, grid: GridSpec, spec: NoiseSpec,
                          dt: float, seed: int, direction=None,
                          cutoff: CutoffSpec | None = None,
                          instability: bool = True, nonlinear: bool = True,
                          stream: int = 0) -> ModulusTable:
    """CRN estimate of sup_phi |P_t phi(x + h) - P_t phi(x)| over shift sizes.

    Both legs of every difference run on the same stream. The shift
    direction is fixed (unit H^1) across scales; the modulus is fitted
    against |h| log(1/|h|) and the raw log-log slope is reported for the
    linear-dynamics calibration.
    """
    h_scales = np.asarray(sorted(h_scales, reverse=True), dtype=float)
    if direction is None:
        rng = np.random.default_rng(seed)
        from .spectral import random_field
        direction = random_field(grid, rng, decay=2.0)
    d = direction.coeff if isinstance(direction, SpectralField) else np.asarray(direction)
    d = d / np.sqrt(sobolev_norm_sq_modes(grid, d, 1.0))

    base, alive0 = run_ensemble(grid, spec, x, t, dt, M, seed, stream,
                                cutoff=cutoff, instability=instability,
                                nonlinear=nonlinear)
    x0 = _as_block(x, 1, grid.K)[0]
    rows, errs, per = [], [], []
    for s in h_scales:
        shifted, alive1 = run_ensemble(grid, spec, x0 + s * d, t, dt, M, seed,
                                       stream, cutoff=cutoff,
                                       instability=instability,
                                       nonlinear=nonlinear)
        alive = alive0 & alive1
        diffs, diff_errs = [], []
        for phi in phis:
            delta = phi(grid, shifted)[alive] - phi(grid, base)[alive]
            diffs.append(abs(np.mean(delta)))
            diff_errs.append(np.std(delta, ddof=1) / np.sqrt(delta.size))
        j = int(np.argmax(diffs))
        rows.append(diffs[j])
        errs.append(diff_errs[j])
        per.append(diffs)
    modulus = np.array(rows)
    gauge = h_scales * np.log(1.0 / h_scales)
    c_fit = float(np.sum(modulus * gauge) / np.sum(gauge**2))
    resid = float(np.sqrt(np.mean((modulus - c_fit * gauge) ** 2)) / np.max(modulus))
    slope = float(np.polyfit(np.log(h_scales), np.log(np.maximum(modulus, 1e-300)), 1)[0])
    return ModulusTable(scales=h_scales, modulus=modulus, stderr=np.array(errs),
                        per_functional=np.array(per), names=[p.name for p in phis],
                        fit_constant=c_fit, fit_residual=resid, loglog_slope=slope)


@dataclass
class TauTailTable:
    """Empirical exit-time tails P[tau_rho < eps] on a (rho, eps) grid."""

    rho_grid: np.ndarray
    eps_grid: np.ndarray
    prob: np.ndarray              # (n_rho, n_eps)
    lo: np.ndarray
    hi: np.ndarray
    z_sup_prob: np.ndarray        # (n_rho, n_eps): P[sup_{[0,eps]} |Z|_H1 <= rho/4]
    paths: int

    def monotone_in_rho(self) -> bool:
        # exit probability can only drop when the ball grows
        return bool(np.all(self.prob[1:] <= self.prob[:-1] + 1e-12))

    def monotone_in_eps(self) -> bool:
        return bool(np.all(np.diff(self.prob, axis=1) >= -1e-12))

    def stay_bound_satisfied(self) -> bool:
        # P[tau >= eps] >= P[sup |Z| <= rho/4], with Wilson slack
        n = self.paths
        ok = True
        for i in range(self.rho_grid.size):
            for j in range(self.eps_grid.size):
                stay = 1.0 - self.prob[i, j]
                lo, _ = wilson_interval(int(round(stay * n)), n)
                _, hi = wilson_interval(int(round(self.z_sup_prob[i, j] * n)), n)
                ok = ok and (lo <= hi or stay >= self.z_sup_prob[i, j])
        return ok


def tau_tail(x, rho_grid, eps_grid, M: int, grid: GridSpec, spec: NoiseSpec,
             dt: float, seed: int, stream: int = 0) -> TauTailTable:
    """Exit-time tail table with the coupled convolution-sup statistics.

    For each cut-off radius the same stream drives the ensemble, so exit
    times are pathwise monotone in rho. The pure convolution z is
    co-evolved to estimate P[sup_{[0,eps]} |Z|_{H1} <= rho/4], the lower
    bound on staying probabilities that the table is audited against.
    """
    rho_grid = np.asarray(sorted(rho_grid), dtype=float)
    eps_grid = np.asarray(sorted(eps_grid), dtype=float)
    T = float(eps_grid[-1])
    n_steps = int(round(T / dt))
    eps_steps = [int(round(e / dt)) for e in eps_grid]

    kern_z = build_kernel(grid, spec, grid.lam, dt)
    prob = np.empty((rho_grid.size, eps_grid.size))
    lo = np.empty_like(prob)
    hi = np.empty_like(prob)
    zsup_prob = np.empty_like(prob)
    for i, rho in enumerate(rho_grid):
        cutoff = CutoffSpec(rho=float(rho))
        eng = _Engine(grid, spec, dt, cutoff=cutoff)
        path = NoisePath(seed, grid, spec, dt, n_paths=M, stream=stream)
        c = _as_block(x, M, grid.K)
        z = np.zeros((M, grid.K), dtype=complex)
        tau_step = np.full(M, np.inf)
        exceeded = np.sqrt(sobolev_norm_sq_modes(grid, c, 1.0)) > rho
        tau_step[exceeded] = 0
        zsup = np.zeros(M)
        zsup_at = np.empty((len(eps_grid), M))
        marks = {s: j for j, s in enumerate(eps_steps)}
        if 0 in marks:
            zsup_at[marks[0]] = zsup
        with np.errstate(over="ignore", invalid="ignore"):
            for n in range(n_steps):
                xi, zeta = path.gaussians(n)
                c = eng.step(c, xi, zeta)
                z = kern_z.exp * z + conv_increment(kern_z, xi, zeta)
                h1 = np.sqrt(sobolev_norm_sq_modes(grid, c, 1.0))
                h1 = np.where(np.isfinite(h1), h1, np.inf)
                newly = np.isinf(tau_step) & (h1 > rho)
                tau_step[newly] = n + 1
                zsup = np.maximum(zsup, np.sqrt(sobolev_norm_sq_modes(grid, z, 1.0)))
                if (n + 1) in marks:
                    zsup_at[marks[n + 1]] = zsup
        for j, s in enumerate(eps_steps):
            exits = tau_step < s if s > 0 else tau_step <= 0
            k = int(np.sum(exits))
            prob[i, j] = k / M
            lo[i, j], hi[i, j] = wilson_interval(k, M)
            zsup_prob[i, j] = float(np.mean(zsup_at[j] <= rho / 4.0))
    return TauTailTable(rho_grid=rho_grid, eps_grid=eps_grid, prob=prob,
                        lo=lo, hi=hi, z_sup_prob=zsup_prob, paths=M)


def markov_restart_test(x, s: float, t: float, M: int,
                        functionals: list[Functional], grid: GridSpec,
                        spec: NoiseSpec, dt: float, seed: int,
                        instability: bool = False,
                        cutoff: CutoffSpec | None = None) -> list[dict]:
    """Two-sample comparison of phi(h(t)) against the restarted law.

    Branch A runs to t directly; branch B runs to s, then continues from
    the reached states with a fresh stream for the remaining t - s. For
    the pathwise well-posed spectral dynamics the two laws agree; the
    Kolmogorov-Smirnov p-values validate the harness.
    """
    if not 0 <= s < t:
        raise ValueError("need 0 <= s < t")
    a, alive_a = run_ensemble(grid, spec, x, t, dt, M, seed, stream=10,
                              cutoff=cutoff, instability=instability)
    if s == 0:
        b, alive_b = run_ensemble(grid, spec, x, t, dt, M, seed, stream=20,
                                  cutoff=cutoff, instability=instability)
    else:
        mid, alive_mid = run_ensemble(grid, spec, x, s, dt, M, seed, stream=20,
                                      cutoff=cutoff, instability=instability)
        b, alive_b2 = run_ensemble(grid, spec, mid, t - s, dt, M, seed,
                                   stream=30, cutoff=cutoff,
                                   instability=instability)
        alive_b = alive_mid & alive_b2
    out = []
    for phi in functionals:
        va = phi(grid, a)[alive_a]
        vb = phi(grid, b)[alive_b]
        res = stats.ks_2samp(va, vb)
        out.append({"functional": phi.name, "ks_stat": float(res.statistic),
                    "p_value": float(res.pvalue), "n_a": int(va.size),
                    "n_b": int(vb.size)})
    return out
