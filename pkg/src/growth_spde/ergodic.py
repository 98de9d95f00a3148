"""Invariant-measure estimation for the stable dynamics.

Time-averaged laws are built along trajectories started from zero,

    mu_T = (1/T) int_0^T P_0[ xi(s) in . ] ds,

approximated by uniform weights over the snapshot grid (the t = 0 snapshot
included). Uniqueness probes compare long-run empirical measures from
different starting points against a self-distance baseline; verdicts are
statistical, never claims about well-posedness.

The module also houses the scalar excursion machinery (the driven ODE
u'' + (lam - theta) u = 1 and its exponential excursion bound) and the
constructive concave moment function used to certify tightness from
samples with possibly infinite polynomial moments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .energy import solve_comparison
from .markov import Functional, clipped_norm, mode_projection, wilson_interval
from .noise import NoisePath, NoiseSpec, build_kernel, conv_increment
from .spectral import GridSpec, SpectralField, l2_norm_sq_modes, sobolev_norm_sq_modes

__all__ = [
    "ErgodicityConfig",
    "EmpiricalMeasure",
    "measure_functionals",
    "krylov_bogoliubov",
    "tail_tightness",
    "uniqueness_probe",
    "excursion_functional",
    "ExcursionResult",
    "phi_construct",
    "PhiFunction",
]

GAMMA_LO, GAMMA_HI = 1.25, 1.5


@dataclass(frozen=True)
class ErgodicityConfig:
    """Parameters of the long-time experiments (stable dynamics only)."""

    gamma: float = 1.3
    T_grid: tuple = (50.0, 100.0, 200.0)
    burn_in: float = 20.0
    R_grid: tuple = (0.5, 1.0, 2.0, 4.0)
    dt: float = 2e-3
    store_every: int = 250
    n_paths: int = 8
    alpha: float | None = None     # damping of the shifted convolution; None = adaptive

    def __post_init__(self):
        if not GAMMA_LO < self.gamma < GAMMA_HI:
            raise ValueError(
                f"tail-norm exponent gamma must lie in ({GAMMA_LO}, {GAMMA_HI}), got {self.gamma}")
        if self.dt <= 0 or self.n_paths < 1 or self.store_every < 1:
            raise ValueError("invalid ergodicity parameters")


def _unclipped_norm(kind: str, s: float | None = None, name: str | None = None) -> Functional:
    def fn(grid, c):
        if kind == "L2":
            return np.sqrt(l2_norm_sq_modes(grid, c))
        return np.sqrt(sobolev_norm_sq_modes(grid, c, s))

    return Functional(name=name or f"{kind}{s or ''}", fn=fn, bounded=False)


def measure_functionals(gamma: float) -> list[Functional]:
    """Default observables: norms (L2, H1, H^gamma) and low-mode projections."""
    return [
        _unclipped_norm("L2", name="norm_L2"),
        _unclipped_norm("H", 1.0, name="norm_H1"),
        _unclipped_norm("H", gamma, name="norm_Hgamma"),
        mode_projection(1, "cos", bounded=False),
        mode_projection(1, "sin", bounded=False),
    ]


@dataclass
class EmpiricalMeasure:
    """Time-averaged empirical law of scalar observables up to horizon T.

    samples[name] has shape (n_paths, n_snapshots); uniform weights over
    all entries realize the time average (weights sum to 1).
    """

    T: float
    samples: dict[str, np.ndarray]
    seed: int
    origin: str = "time-average from 0"

    @property
    def weight(self) -> float:
        any_arr = next(iter(self.samples.values()))
        return 1.0 / any_arr.size

    def pooled(self, name: str) -> np.ndarray:
        return self.samples[name].ravel()

    def moment(self, name: str, p: int = 1) -> float:
        return float(np.mean(self.pooled(name) ** p))

    def tail(self, name: str, R: float) -> float:
        return float(np.mean(self.pooled(name) > R))


class ErgodicBlowup(RuntimeError):
    def __init__(self, t: float, seed: int, n_dead: int):
        super().__init__(
            f"stable-variant trajectory left the representable range at "
            f"t = {t:.4g} (seed {seed}, {n_dead} paths); this should not "
            f"happen, dumping diagnostics")
        self.t = t
        self.seed = seed


def _time_average_values(grid: GridSpec, spec: NoiseSpec, x0, cfg: ErgodicityConfig,
                         functionals: list[Functional], seed: int, stream: int,
                         nonlinear: bool = True) -> tuple[np.ndarray, dict]:
    """Snapshot functional values along stable-variant ensemble paths."""
    from .dynamics import quad_drift

    dt = cfg.dt
    M = cfg.n_paths
    T_max = float(max(cfg.T_grid))
    n_steps = int(round(T_max / dt))
    kern = build_kernel(grid, spec, grid.lam, dt)
    path = NoisePath(seed, grid, spec, dt, n_paths=M, stream=stream)
    if isinstance(x0, SpectralField):
        c = np.broadcast_to(x0.coeff, (M, grid.K)).copy()
    else:
        c = np.asarray(x0, dtype=complex).copy()
    times = [0.0]
    values = {phi.name: [phi(grid, c)] for phi in functionals}
    for n in range(n_steps):
        xi, zeta = path.gaussians(n)
        drift = kern.phi1dt * quad_drift(grid, c) if nonlinear else 0.0
        c = kern.exp * c + drift + conv_increment(kern, xi, zeta)
        if not np.all(np.isfinite(c)):
            dead = int(M - np.all(np.isfinite(c), axis=-1).sum())
            raise ErgodicBlowup((n + 1) * dt, seed, dead)
        if (n + 1) % cfg.store_every == 0:
            times.append((n + 1) * dt)
            for phi in functionals:
                values[phi.name].append(phi(grid, c))
    times = np.array(times)
    stacked = {k: np.stack(v, axis=1) for k, v in values.items()}
    return times, stacked


def krylov_bogoliubov(grid: GridSpec, spec: NoiseSpec, cfg: ErgodicityConfig,
                      seed: int, stream: int = 0,
                      functionals: list[Functional] | None = None,
                      nonlinear: bool = True) -> list[EmpiricalMeasure]:
    """Time-averaged empirical measures of the stable dynamics from zero.

    One measure per horizon in cfg.T_grid, all extracted from the same
    ensemble of long trajectories. The average includes the t = 0 state
    (no burn-in: the estimator is the plain running time average).
    """
    phis = functionals if functionals is not None else measure_functionals(cfg.gamma)
    times, values = _time_average_values(grid, spec, SpectralField.zero(grid),
                                         cfg, phis, seed, stream, nonlinear)
    out = []
    for T in cfg.T_grid:
        mask = times <= T + 1e-12
        out.append(EmpiricalMeasure(
            T=float(T),
            samples={k: v[:, mask] for k, v in values.items()},
            seed=seed))
    return out


def moments_settled(measures: list[EmpiricalMeasure], name: str,
                    p: int = 2) -> dict:
    """Cauchy-in-T diagnostic for time-averaged moments.

    Uses paired per-path averages: consecutive horizon gaps must shrink or
    be statistically indistinguishable from zero at 3 sigma (the averages
    are nested, so the paired difference is the right noise estimate).
    """
    per_path = [np.mean(m.samples[name] ** p, axis=1) for m in measures]
    gaps, bands = [], []
    for a, b in zip(per_path[:-1], per_path[1:]):
        d = b - a
        gaps.append(abs(float(np.mean(d))))
        bands.append(3.0 * float(np.std(d, ddof=1) / np.sqrt(d.size)))
    settled = all(g <= max(b, gaps[i - 1] if i > 0 else np.inf)
                  for i, (g, b) in enumerate(zip(gaps, bands)))
    return {"moments": [float(np.mean(pp)) for pp in per_path],
            "gaps": gaps, "bands_3sigma": bands, "settled": bool(settled)}


def tail_tightness(measures: list[EmpiricalMeasure], R_grid,
                   name: str = "norm_Hgamma") -> dict:
    """Empirical tail table mu_T[ |.|_{H^gamma} > R ] with score intervals.

    pass criterion: the tail at the largest radius is uniformly small over
    the whole horizon grid.
    """
    R_grid = np.asarray(sorted(R_grid), dtype=float)
    tails = np.empty((len(measures), R_grid.size))
    lo = np.empty_like(tails)
    hi = np.empty_like(tails)
    for i, m in enumerate(measures):
        pooled = m.pooled(name)
        for j, R in enumerate(R_grid):
            k = int(np.sum(pooled > R))
            tails[i, j] = k / pooled.size
            lo[i, j], hi[i, j] = wilson_interval(k, pooled.size)
    return {
        "T": [m.T for m in measures],
        "R": R_grid,
        "tail": tails,
        "lo": lo,
        "hi": hi,
        "nonincreasing_in_R": bool(np.all(np.diff(tails, axis=1) <= 1e-12)),
        "sup_tail_at_Rmax": float(np.max(tails[:, -1])),
    }


def uniqueness_probe(x_list, T: float, M: int, functionals: list[Functional],
                     grid: GridSpec, spec: NoiseSpec, dt: float, seed: int,
                     burn_in: float = 0.0, store_every: int = 500,
                     streams: list[int] | None = None,
                     nonlinear: bool = True) -> dict:
    """Pairwise two-sample distances between long-run empirical measures.

    Runs the stable dynamics from each start, pools snapshot samples past
    the burn-in, and compares all start pairs per functional with the
    Kolmogorov-Smirnov statistic. A self-distance baseline (two independent
    ensembles from the first start) calibrates what "equal" looks like at
    this sample size and autocorrelation.
    """
    cfg = ErgodicityConfig(T_grid=(float(T),), dt=dt, store_every=store_every,
                           n_paths=M, burn_in=burn_in)
    if streams is None:
        streams = [100 + i for i in range(len(x_list))]
    runs = []
    for x, stream in zip(x_list, streams):
        times, vals = _time_average_values(grid, spec, x, cfg, functionals,
                                           seed, stream=stream, nonlinear=nonlinear)
        keep = times >= burn_in
        runs.append({k: v[:, keep].ravel() for k, v in vals.items()})
    times, vals = _time_average_values(grid, spec, x_list[0], cfg, functionals,
                                       seed, stream=max(streams) + 1,
                                       nonlinear=nonlinear)
    baseline_run = {k: v[:, times >= burn_in].ravel() for k, v in vals.items()}

    pairwise = []
    for i in range(len(x_list)):
        for j in range(i + 1, len(x_list)):
            for phi in functionals:
                r = stats.ks_2samp(runs[i][phi.name], runs[j][phi.name])
                pairwise.append({"pair": (i, j), "functional": phi.name,
                                 "ks": float(r.statistic), "p": float(r.pvalue)})
    baseline = []
    for phi in functionals:
        r = stats.ks_2samp(runs[0][phi.name], baseline_run[phi.name])
        baseline.append({"functional": phi.name, "ks": float(r.statistic),
                         "p": float(r.pvalue)})
    max_pair = max(p["ks"] for p in pairwise)
    max_base = max(b["ks"] for b in baseline)
    return {"pairwise": pairwise, "baseline": baseline,
            "max_pairwise_ks": max_pair, "baseline_ks": max_base,
            "min_p": min(p["p"] for p in pairwise)}


# ----------------------------------------------------------------------
# excursion bound for the driven comparison ODE
# ----------------------------------------------------------------------

@dataclass
class ExcursionResult:
    times: np.ndarray
    u: np.ndarray                 # solution of u' + (lam - theta) u = 1, u(0) = 0
    excursion: np.ndarray         # X(t) = max_{s <= t} int_s^t (-lam/2 + theta)
    window_sups: np.ndarray       # X at the ends of unit windows
    bound_ok: bool                # u(t) <= (2/lam) exp(X(t)) everywhere
    max_ratio: float


def excursion_functional(times: np.ndarray, theta: np.ndarray,
                         lam: float) -> ExcursionResult:
    """Drive the scalar ODE by a theta path and audit its excursion bound.

    With piecewise-constant theta the chain u(t) <= (2/lam) exp(X(t)),
    X(t) = sup_{s<=t} int_s^t (theta - lam/2), holds exactly, so the audit
    tolerance is pure round-off.
    """
    times = np.asarray(times, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0):
        raise ValueError("theta must be nonnegative")
    u = solve_comparison(0.0, times, theta, np.ones_like(theta), lam)
    incr = (theta[:-1] - lam / 2.0) * np.diff(times)
    G = np.concatenate([[0.0], np.cumsum(incr)])
    running_min = np.minimum.accumulate(G)
    X = G - running_min
    bound = (2.0 / lam) * np.exp(X)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, u / bound, 0.0)
    window_ends = [np.searchsorted(times, w, side="right") - 1
                   for w in np.arange(1.0, times[-1] + 1e-9)]
    return ExcursionResult(times=times, u=u, excursion=X,
                           window_sups=X[window_ends],
                           bound_ok=bool(np.all(u <= bound * (1 + 1e-12))),
                           max_ratio=float(np.max(ratio)))


# ----------------------------------------------------------------------
# constructive concave moment function
# ----------------------------------------------------------------------

@dataclass
class PhiFunction:
    """Piecewise-linear concave nondecreasing map, unbounded, phi(0) = 0.

    Built so that E[phi(X)] is finite for the sampled distribution even
    when X has no finite polynomial moments. Subadditivity holds in the
    form phi(x + y) <= phi(x) + slope0 * y with slope0 the initial slope.
    """

    knots: np.ndarray
    values: np.ndarray

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.knots)

    @property
    def initial_slope(self) -> float:
        return float(self.slopes[0])

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.knots, self.values)
        tail = x > self.knots[-1]
        if np.any(tail):
            out = np.where(tail, self.values[-1] + self.slopes[-1] * (x - self.knots[-1]), out)
        return out

    def log_composed(self, x) -> np.ndarray:
        """phi(log(1 + x)): obeys the additive-log growth condition."""
        return self(np.log1p(np.asarray(x, dtype=float)))


def _threshold_ladder(x: np.ndarray, levels: int) -> np.ndarray:
    """Quantile thresholds targeting mass 4^{-n} above the n-th cell."""
    qs = [0.0]
    for n in range(1, levels + 1):
        qs.append(float(np.quantile(x, 1.0 - 4.0**-n)))
    ladder = [qs[0]]
    for v in qs[1:]:
        if v > ladder[-1] * (1 + 1e-12) + 1e-12:
            ladder.append(v)
    # degenerate samples leave too few distinct cells; extend artificially
    step = max(1.0, ladder[-1])
    while len(ladder) < min(levels + 1, 4):
        ladder.append(ladder[-1] + step)
    return np.array(ladder)


def phi_construct(samples: np.ndarray, knots: int = 20) -> PhiFunction:
    """Build the concave moment function from nonnegative samples.

    The empirical quantile ladder x_n realizes cells of mass ~ 4^{-n}; the
    step function taking value 2^n on the n-th cell has a finite empirical
    mean, its running average u is continuous and nondecreasing, and the
    returned map interpolates the level crossings y_n = max{x : u(x) = n}
    taking at each knot the smaller of n and the previous chord's
    continuation. That choice forces nonincreasing slopes (concavity)
    while keeping the map unbounded.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1 or x.size < max(knots, 10):
        raise ValueError(f"need at least max(knots, 10) = {max(knots, 10)} samples, got {x.size}")
    if np.any(x < 0):
        raise ValueError("samples must be nonnegative")
    levels = min(knots, max(2, int(np.log(x.size) / np.log(4.0))))
    thresholds = _threshold_ladder(x, levels)
    n_cells = thresholds.size - 1
    slopes_step = 2.0 ** np.arange(n_cells + 1) - 1.0   # slope of int (u_step - 1)

    # cumulative integral of the step function minus its infimum
    cumint = np.zeros(thresholds.size)
    for j in range(1, thresholds.size):
        cumint[j] = cumint[j - 1] + slopes_step[j - 1] * (thresholds[j] - thresholds[j - 1])

    def u_of(t: float) -> float:
        j = np.searchsorted(thresholds, t, side="right") - 1
        j = min(max(j, 0), thresholds.size - 1)
        return (cumint[j] + slopes_step[j] * (t - thresholds[j])) / t if t > 0 else 0.0

    # level crossings y_n = max { x : u(x) = n }
    y = [0.0]
    max_level = int(min(knots, slopes_step[-1] - 1))
    for n in range(1, max_level + 1):
        t_n = None
        for j in range(thresholds.size - 1, -1, -1):
            m = slopes_step[j]
            if m <= n:
                continue
            cand = (cumint[j] - m * thresholds[j]) / (n - m)
            lo = thresholds[j]
            hi = thresholds[j + 1] if j + 1 < thresholds.size else np.inf
            if lo - 1e-12 <= cand <= hi + 1e-12:
                t_n = cand
                break
        if t_n is None or t_n <= y[-1]:
            break
        y.append(float(t_n))
    if len(y) < 3:
        raise ValueError("could not place enough knots; samples may be degenerate")

    vals = [0.0, 1.0]
    for n in range(2, len(y)):
        slope_prev = (vals[n - 1] - vals[n - 2]) / (y[n - 1] - y[n - 2])
        continuation = vals[n - 2] + slope_prev * (y[n] - y[n - 2])
        vals.append(min(float(n), continuation))
    return PhiFunction(knots=np.array(y), values=np.array(vals))
