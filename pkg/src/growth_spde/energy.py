"""Energy functionals, comparison ODEs and pathwise bounds.

The central object is the balance functional of the remainder field v
paired with a stochastic convolution z at damping alpha:

    E_t = 1/2 |v(t)|^2_{L2} + int_0^t ( |v_xx|^2 - |v_x|^2 - alpha <v, z>
          - <v_x, z_x> - <2 v_x z_x + (z_x)^2, v_xx> ) ds.

For Galerkin trajectories of the matching remainder equation E_t is
conserved up to the integrator's O(dt) error; audits therefore carry a
discretization-aware tolerance C * dt calibrated by refinement. All time
integrals are trapezoidal on the snapshot grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .noise import NoiseSpec, sample_stationary_ou
from .spectral import (
    GridSpec,
    SpectralField,
    deriv_factor,
    l2_norm_sq_modes,
    lp_norm_modes,
    phi1,
    sobolev_norm_sq_modes,
    triple_integral_modes,
)
from .dynamics import Trajectory, ou_forcing_weights

__all__ = [
    "EnergyRecord",
    "CoefficientPath",
    "energy_series",
    "energy_series_arrays",
    "audit_monotone",
    "w_balance",
    "solve_comparison",
    "gronwall_bound",
    "build_coefficient_path",
    "VBoundReport",
    "vbound_check",
    "fit_comparison_constant",
    "tder_bound",
    "adaptive_alpha",
]


@dataclass(frozen=True)
class EnergyRecord:
    """One snapshot of the balance functional: E = kinetic + accum."""

    t: float
    kinetic: float
    accum: float
    alpha: float

    @property
    def total(self) -> float:
        return self.kinetic + self.accum


def _energy_integrand(grid: GridSpec, v: np.ndarray, z: np.ndarray,
                      alpha: float) -> np.ndarray:
    """Integrand of the balance functional per snapshot row."""
    q2 = grid.q**2
    v_xx = -q2 * v
    v_x = v * deriv_factor(grid, 1)
    z_x = z * deriv_factor(grid, 1)
    diss = 2.0 * grid.L * np.sum(q2**2 * np.abs(v) ** 2, axis=-1)
    grad = 2.0 * grid.L * np.sum(q2 * np.abs(v) ** 2, axis=-1)
    cross_l2 = 2.0 * grid.L * np.sum(np.real(np.conj(v) * z), axis=-1)
    cross_h1 = 2.0 * grid.L * np.sum(q2 * np.real(np.conj(v) * z), axis=-1)
    triple = (2.0 * triple_integral_modes(grid, v_x, z_x, v_xx)
              + triple_integral_modes(grid, z_x, z_x, v_xx))
    return diss - grad - alpha * cross_l2 - cross_h1 - triple


def energy_series_arrays(grid: GridSpec, times: np.ndarray, v: np.ndarray,
                         z: np.ndarray, alpha: float = 0.0) -> list[EnergyRecord]:
    """Balance functional at every snapshot of aligned (v, z) paths."""
    times = np.asarray(times, dtype=float)
    if v.shape != z.shape or v.shape[0] != times.shape[0]:
        raise ValueError("v and z snapshots must share the time grid")
    kinetic = 0.5 * l2_norm_sq_modes(grid, v)
    g = _energy_integrand(grid, v, z, alpha)
    accum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(times) * (g[1:] + g[:-1]))])
    return [EnergyRecord(t=float(t), kinetic=float(k), accum=float(a), alpha=alpha)
            for t, k, a in zip(times, kinetic, accum)]


def energy_series(traj: Trajectory, alpha: float | None = None) -> list[EnergyRecord]:
    """Balance functional along a coupled trajectory's (v, z) snapshots."""
    if traj.v is None or traj.z is None:
        raise ValueError("energy series needs v and z snapshots")
    a = traj.alpha if alpha is None else alpha
    return energy_series_arrays(traj.grid, traj.times, traj.v, traj.z, a)


def audit_monotone(records: list[EnergyRecord], tol: float) -> list[tuple]:
    """All snapshot pairs s < t with E_t > E_s + tol (empty list = pass)."""
    t = np.array([r.t for r in records])
    e = np.array([r.total for r in records])
    if np.any(np.diff(t) < 0):
        raise ValueError("records must be sorted by time")
    bad = []
    for i in range(len(records)):
        js = np.nonzero(e[i + 1:] > e[i] + tol)[0]
        for j in js:
            bad.append((float(t[i]), float(t[i + 1 + j]), float(e[i]), float(e[i + 1 + j])))
    return bad


def w_balance(z0: SpectralField, alpha: float, times: np.ndarray,
              z: np.ndarray) -> np.ndarray:
    """Residual of the deterministic-shift balance along a realized z path.

    w solves w' = -w_xxxx - alpha (z + w), w(0) = z0, integrated exactly in
    the linear part with the OU-bridge endpoint quadrature for the z
    forcing. Returns, per snapshot time t,

        1/2 |w(t)|^2 + int_0^t ( |w_xx|^2 + alpha <z + w, w> ) ds
        - 1/2 |w(0)|^2,

    which vanishes up to quadrature error of the trapezoidal integral.
    """
    grid = z0.grid
    times = np.asarray(times, dtype=float)
    if z.shape[0] != times.shape[0]:
        raise ValueError("z snapshots must match the time grid")
    S = times.shape[0]
    w = np.empty((S, grid.K), dtype=complex)
    w[0] = z0.coeff
    rates = grid.lam - alpha
    for j in range(S - 1):
        dt = times[j + 1] - times[j]
        w_now, w_next = ou_forcing_weights(grid.lam, rates, dt)
        w[j + 1] = (np.exp(rates * dt) * w[j]
                    - alpha * (w_now * z[j] + w_next * z[j + 1]))
    q4 = grid.q**4
    g = (2.0 * grid.L * np.sum(q4 * np.abs(w) ** 2, axis=-1)
         + alpha * 2.0 * grid.L * np.sum(np.real(np.conj(z + w) * w), axis=-1))
    accum = np.concatenate([[0.0], np.cumsum(0.5 * np.diff(times) * (g[1:] + g[:-1]))])
    half = 0.5 * l2_norm_sq_modes(grid, w)
    return half + accum - half[0]


# ----------------------------------------------------------------------
# scalar comparison ODEs and the relaxed Gronwall bound
# ----------------------------------------------------------------------

def solve_comparison(u0: float, times: np.ndarray, a: np.ndarray,
                     b: np.ndarray, lam: float) -> np.ndarray:
    """Exact solution of u' + (lam - a(t)) u = b(t), coefficients frozen
    per interval at their left endpoint.

    Nonnegative data keep u nonnegative; the stepping is the integrating
    factor formula, exact for the piecewise-constant system.
    """
    times = np.asarray(times, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if u0 < 0 or np.any(b < 0):
        raise ValueError("comparison ODE needs u0 >= 0 and b >= 0")
    u = np.empty_like(times)
    u[0] = u0
    for j in range(times.size - 1):
        dt = times[j + 1] - times[j]
        g = (a[j] - lam) * dt
        u[j + 1] = np.exp(g) * u[j] + b[j] * dt * phi1(np.array([g]))[0]
    return u


def gronwall_bound(u0: float, times: np.ndarray, a: np.ndarray,
                   b: np.ndarray) -> float:
    """u0 e^{int_0^T a} + int_0^T b(s) e^{int_s^T a} ds, piecewise-constant
    coefficient convention matching solve_comparison (lam folded into a).

    For any scalar path satisfying the integral inequality with these
    coefficients the value dominates u(T); for the equality dynamics it is
    the exact solution.
    """
    times = np.asarray(times, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(b < 0):
        raise ValueError("gronwall bound needs b >= 0")
    val = float(u0)
    for j in range(times.size - 1):
        dt = times[j + 1] - times[j]
        g = a[j] * dt
        val = np.exp(g) * val + b[j] * dt * phi1(np.array([g]))[0]
    return float(val)


# ----------------------------------------------------------------------
# coefficient paths and the pathwise moment bound audit
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientPath:
    """Scalar coefficient paths a, b, theta built from a z trajectory.

    a     = C |z_x|_{L4}^{16/3}
    b     = C ( |z_x|_{L4}^4 + alpha^2 |z|_{L2}^2 )
    theta = C_star ( |z_x|_{L4}^{16/3} + |z_x|_{L4}^8 + |z|_{L2}^4 )
    """

    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    theta: np.ndarray
    C: float
    C_star: float

    def __post_init__(self):
        for name in ("a", "b", "theta"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"coefficient {name} must be nonnegative")


def build_coefficient_path(grid: GridSpec, times: np.ndarray, z: np.ndarray,
                           alpha: float, C: float = 1.0,
                           C_star: float = 1.0) -> CoefficientPath:
    zx_l4 = lp_norm_modes(grid, z * deriv_factor(grid, 1), 4.0)
    z_l2_sq = l2_norm_sq_modes(grid, z)
    a = C * zx_l4 ** (16.0 / 3.0)
    b = C * (zx_l4**4 + alpha**2 * z_l2_sq)
    theta = C_star * (zx_l4 ** (16.0 / 3.0) + zx_l4**8 + z_l2_sq**2)
    return CoefficientPath(times=np.asarray(times, dtype=float), a=a, b=b,
                           theta=theta, C=C, C_star=C_star)


@dataclass
class VBoundReport:
    """Outcome of the pathwise remainder bound audit."""

    lhs: float
    rhs: float
    comparison_ok: bool
    max_ratio: float       # max_t |v(t)|^2 / u(t)
    u_final: float

    @property
    def bounded(self) -> bool:
        return self.lhs <= self.rhs


def _z_w14_norms(grid: GridSpec, z: np.ndarray) -> np.ndarray:
    z4 = lp_norm_modes(grid, z, 4.0) ** 4
    zx4 = lp_norm_modes(grid, z * deriv_factor(grid, 1), 4.0) ** 4
    return (z4 + zx4) ** 0.25


def vbound_check(traj: Trajectory, C: float = 1.0, C_star: float = 1.0,
                 slack: float = 1e-9) -> VBoundReport:
    """Audit the exponential remainder bound and the ODE comparison.

    lhs = sup_t |v|^2_{L2} + int |v_xx|^2 ds is compared against
    rhs = C exp(C ||z||_{L^{16/3} W14}^{16/3}) (|v(0)|^2 + ||z||^4_{L4 W14});
    separately |v(t)|^2 <= u(t) is checked with u from solve_comparison on
    the coefficient path with constants (C, C_star) and the grid's spectral
    gap.
    """
    if traj.v is None or traj.z is None:
        raise ValueError("vbound audit needs v and z snapshots")
    grid = traj.grid
    times = traj.times
    v_sq = l2_norm_sq_modes(grid, traj.v)
    vxx_sq = 2.0 * grid.L * np.sum(grid.q**4 * np.abs(traj.v) ** 2, axis=-1)
    lhs = float(np.max(v_sq) + np.trapezoid(vxx_sq, times))

    w14 = _z_w14_norms(grid, traj.z)
    z_163 = float(np.trapezoid(w14 ** (16.0 / 3.0), times))
    z_4 = float(np.trapezoid(w14**4, times))
    rhs = float(C * np.exp(C * z_163) * (v_sq[0] + z_4))

    coeff = build_coefficient_path(grid, times, traj.z, traj.alpha, C, C_star)
    u = solve_comparison(float(v_sq[0]), times, coeff.a, coeff.b,
                         grid.poincare_lambda)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(u > 0, v_sq / u, np.where(v_sq > 0, np.inf, 0.0))
    max_ratio = float(np.max(ratio))
    ok = bool(np.all(v_sq <= u * (1.0 + slack)))
    return VBoundReport(lhs=lhs, rhs=rhs, comparison_ok=ok,
                        max_ratio=max_ratio, u_final=float(u[-1]))


def fit_comparison_constant(traj: Trajectory, grid_of_C: np.ndarray,
                            C_star: float = 1.0) -> float | None:
    """Smallest constant on the grid for which |v(t)|^2 <= u(t) pathwise."""
    for C in np.sort(np.asarray(grid_of_C, dtype=float)):
        if vbound_check(traj, C=float(C), C_star=C_star).comparison_ok:
            return float(C)
    return None


def tder_bound(traj: Trajectory, C: float = 1.0) -> tuple[float, float]:
    """Time-derivative control of the remainder in the weak norm.

    lhs: ||dv/dt||_{L2([0,T], H^-3)} by centered differences on the
    snapshot grid. rhs: C ||v||_{L2 H2} (1 + ||v||_{Linf L2}) +
    C ||z||_{L4 H1}. Returns (lhs, rhs); callers fit the constant.
    """
    if traj.v is None or traj.z is None:
        raise ValueError("time-derivative audit needs v and z snapshots")
    if len(traj.times) < 3:
        raise ValueError("need at least 3 snapshots for centered differences")
    grid = traj.grid
    t = traj.times
    dv = np.empty_like(traj.v)
    dv[1:-1] = (traj.v[2:] - traj.v[:-2]) / (t[2:] - t[:-2])[:, None]
    dv[0] = (traj.v[1] - traj.v[0]) / (t[1] - t[0])
    dv[-1] = (traj.v[-1] - traj.v[-2]) / (t[-1] - t[-2])
    dv_sq = sobolev_norm_sq_modes(grid, dv, -3.0)
    lhs = float(np.sqrt(np.trapezoid(dv_sq, t)))

    v_h2 = sobolev_norm_sq_modes(grid, traj.v, 2.0)
    v_l2 = np.sqrt(l2_norm_sq_modes(grid, traj.v))
    z_h1 = sobolev_norm_sq_modes(grid, traj.z, 1.0)
    rhs = float(C * np.sqrt(np.trapezoid(v_h2, t)) * (1.0 + np.max(v_l2))
                + C * np.trapezoid(z_h1**2, t) ** 0.25)
    return lhs, rhs


def adaptive_alpha(grid: GridSpec, spec: NoiseSpec, C_star: float = 1.0,
                   seed: int = 0, M: int = 4000, alpha0: float = 1.0,
                   max_doublings: int = 40) -> float:
    """Smallest damping in a doubling search with E[theta] <= lambda / 4.

    theta is evaluated on stationary damped-OU samples, so the criterion
    matches the stationary regime the excursion machinery runs in.
    """
    lam = grid.poincare_lambda
    alpha = alpha0
    for _ in range(max_doublings):
        z = sample_stationary_ou(spec, grid, alpha, seed, n_paths=M)
        zx_l4 = lp_norm_modes(grid, z * deriv_factor(grid, 1), 4.0)
        z_l2_sq = l2_norm_sq_modes(grid, z)
        theta = C_star * (zx_l4 ** (16.0 / 3.0) + zx_l4**8 + z_l2_sq**2)
        if np.mean(theta) <= lam / 4.0:
            return alpha
        alpha *= 2.0
    raise RuntimeError("damping search did not terminate; raise max_doublings")
