"""Time integration of the surface-growth dynamics and its variants.

All steppers are exponential Euler (ETD1): the diagonal linear part is
integrated exactly, the quadratic drift enters through the dt*phi1 weight,
and the stochastic convolution increment is sampled exactly from the step's
shared draws (see :mod:`growth_spde.noise`). Forcings that are known at
both step endpoints (the stochastic convolution driving the remainder
equation, replayed controls) use the exponentially weighted linear
interpolant, i.e. the dt*phi2 weight on the endpoint difference.

Model variants
--------------
full        dh = (-h_xxxx - h_xx + (h_x^2)_xx) dt + dW   (instability on)
stable      dh = (-h_xxxx + (h_x^2)_xx) dt + dW          (instability off)
cutoff      du = (-u_xxxx + d_xx[(-u + u_x^2)] chi(|u|_H1^2)) dt + dW
remainder   dv/dt = -v_xxxx - v_xx - z_xx + ((v+z)_x^2)_xx   given z
            (instability terms dropped and alpha z added for the damped
            stable split)

The cutoff variant keeps the backward-diffusion term inside the cut-off
factor, so below the exit radius it coincides with the full dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .noise import NoisePath, NoiseSpec, StepKernel, build_kernel, conv_increment
from .spectral import (
    GridSpec,
    SpectralField,
    bilinear_grad_modes,
    sobolev_norm_sq_modes,
    semigroup_rates,
)

__all__ = [
    "BlowupError",
    "IntegratorConfig",
    "CutoffSpec",
    "Trajectory",
    "step_full",
    "step_v",
    "step_tangent",
    "run_full",
    "run_coupled",
    "run_regularized",
    "mild_residual",
    "steer_control",
    "replay_control",
    "SteerResult",
]


class BlowupError(RuntimeError):
    """Raised when a trajectory leaves the representable range."""

    def __init__(self, t: float):
        super().__init__(f"nonfinite state at t = {t:.6g}")
        self.t = t


@dataclass(frozen=True)
class IntegratorConfig:
    """ETD1 integration parameters."""

    dt: float
    T: float
    instability: bool = True
    store_every: int = 1
    scheme: str = "etd1"

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.T < self.dt:
            raise ValueError("horizon must cover at least one step")
        if self.scheme != "etd1":
            raise ValueError(f"unsupported scheme {self.scheme!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))


def _smoothstep(s: np.ndarray) -> np.ndarray:
    """C-infinity ramp from 0 at s <= 0 to 1 at s >= 1."""
    s = np.clip(s, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        f = np.where(s > 0, np.exp(-1.0 / np.maximum(s, 1e-300)), 0.0)
        g = np.where(s < 1, np.exp(-1.0 / np.maximum(1.0 - s, 1e-300)), 0.0)
    return f / (f + g)


def _smoothstep_prime(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    inside = (s > 0) & (s < 1)
    out = np.zeros_like(s)
    si = s[inside]
    with np.errstate(divide="ignore", over="ignore"):
        f = np.exp(-1.0 / si)
        g = np.exp(-1.0 / (1.0 - si))
        fp = f / si**2
        gp = -g / (1.0 - si) ** 2
        out[inside] = (fp * g - f * gp) / (f + g) ** 2
    return out


@dataclass(frozen=True)
class CutoffSpec:
    """Smooth cut-off of the drift: 1 below rho^2, 0 above 2 rho^2.

    chi acts on the squared H^1 norm. Its derivative is bounded by
    C / rho^2 with C the maximum slope of the fixed smoothstep profile.
    """

    rho: float

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("cut-off radius must be positive")

    def chi(self, zeta: np.ndarray) -> np.ndarray:
        s = (np.asarray(zeta, dtype=float) - self.rho**2) / self.rho**2
        return 1.0 - _smoothstep(s)

    def chi_prime(self, zeta: np.ndarray) -> np.ndarray:
        s = (np.asarray(zeta, dtype=float) - self.rho**2) / self.rho**2
        return -_smoothstep_prime(s) / self.rho**2


@dataclass
class Trajectory:
    """Stored snapshots of co-evolved fields on a uniform time grid.

    Field arrays have shape (n_snapshots, K); any of them may be absent.
    When h, v and z are co-evolved, h = v + z holds within the solver
    tolerance (order dt), which split_gap() measures.
    """

    grid: GridSpec
    times: np.ndarray
    h: np.ndarray | None = None
    v: np.ndarray | None = None
    z: np.ndarray | None = None
    seed: int | None = None
    stream: int = 0
    dt: float = 0.0
    instability: bool = True
    alpha: float = 0.0
    cutoff_rho: float | None = None
    config_hash: str = ""
    tau: float | None = None

    def field(self, name: str, i: int) -> SpectralField:
        arr = getattr(self, name)
        if arr is None:
            raise ValueError(f"trajectory has no {name!r} snapshots")
        return SpectralField(self.grid, arr[i])

    def split_gap(self) -> float:
        """max_t |h - (v + z)|_{L2} over stored snapshots."""
        if self.h is None or self.v is None or self.z is None:
            raise ValueError("split gap needs h, v and z snapshots")
        from .spectral import l2_norm_sq_modes

        return float(np.max(np.sqrt(l2_norm_sq_modes(self.grid, self.h - (self.v + self.z)))))


# ----------------------------------------------------------------------
# drifts on (..., K) mode arrays
# ----------------------------------------------------------------------

def quad_drift(grid: GridSpec, c: np.ndarray) -> np.ndarray:
    """(u_x^2)_xx in modes: -q^2 times the alias-free product modes."""
    return -grid.q**2 * bilinear_grad_modes(grid, c, c)


def cutoff_core(grid: GridSpec, c: np.ndarray) -> np.ndarray:
    """q^2 (u - (u_x^2 modes)), the drift inside the cut-off factor."""
    return grid.q**2 * (c - bilinear_grad_modes(grid, c, c))


def tangent_core(grid: GridSpec, c: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """q^2 (psi - 2 (u_x psi_x modes)), linearization of cutoff_core in u."""
    return grid.q**2 * (psi - 2.0 * bilinear_grad_modes(grid, c, psi))


def h1_pairing(grid: GridSpec, ca: np.ndarray, cb: np.ndarray) -> np.ndarray:
    w = 1.0 + grid.q**2
    return 2.0 * grid.L * np.sum(w * np.real(np.conj(ca) * cb), axis=-1)


def ou_forcing_weights(l: np.ndarray, m: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint weights for int_0^dt e^{m (dt-s)} z(s) ds with z an OU path.

    z is replaced by its bridge conditional mean given the endpoints: for
    rate l the bridge kernel is K(s) = (e^{l(dt+s)} - e^{l(dt-s)}) /
    (e^{2 l dt} - 1), which decays into the step interior for stiff modes
    instead of interpolating linearly. Returns (w_now, w_next) with the
    quadrature w_now * z_n + w_next * z_{n+1}. Falls back to the linear
    interpolant (the l -> 0 limit) when the bridge is numerically flat.
    All exponentials are kept at nonpositive arguments up to the mild
    (m - l) dt term, so stiff modes cannot overflow.
    """
    from .spectral import phi1, phi2

    l = np.asarray(l, dtype=float)
    m = np.asarray(m, dtype=float)
    w_now = np.empty_like(l)
    w_next = np.empty_like(l)
    flat = np.abs(2.0 * l * dt) < 1e-6
    if np.any(flat):
        zm = m[flat] * dt
        w_next[flat] = dt * phi2(zm)
        w_now[flat] = dt * (phi1(zm) - phi2(zm))
    steep = ~flat
    if np.any(steep):
        ls, ms = l[steep], m[steep]
        e2l = np.exp(2.0 * ls * dt)
        denom = np.expm1(2.0 * ls * dt)
        # e^{l dt} G(-l, m) = dt phi1((m + l) dt);
        # e^{l dt} G(l, m)  = dt e^{2 l dt} phi1((m - l) dt)
        wb = dt * (e2l * phi1((ms - ls) * dt) - phi1((ms + ls) * dt)) / denom
        g_pos = dt * np.exp(ms * dt) * phi1((ls - ms) * dt)   # G(l, m)
        w_next[steep] = wb
        w_now[steep] = g_pos - np.exp(ls * dt) * wb
    return w_now, w_next


# ----------------------------------------------------------------------
# single-step public operations
# ----------------------------------------------------------------------

def step_full(h: SpectralField, path: NoisePath, step_index: int,
              cfg: IntegratorConfig, nonlinear: bool = True) -> SpectralField:
    """One ETD1 step of the full (or stable) equation."""
    grid = h.grid
    kern = build_kernel(grid, path.spec, semigroup_rates(grid, 0.0, cfg.instability), cfg.dt)
    xi, zeta = path.gaussians(step_index)
    c = kern.exp * h.coeff + conv_increment(kern, xi[0], zeta[0])
    if nonlinear:
        c = c + kern.phi1dt * quad_drift(grid, h.coeff)
    if not np.all(np.isfinite(c)):
        raise BlowupError((step_index + 1) * cfg.dt)
    return SpectralField(grid, c)


def step_v(v: SpectralField, z_now: SpectralField, z_next: SpectralField,
           dt: float, instability: bool = True, alpha: float = 0.0,
           nonlinear: bool = True) -> SpectralField:
    """One deterministic ETD1 step of the remainder equation driven by z.

    The z forcing coefficient is q^2 (from -z_xx) when the instability is
    active plus alpha for the damped split. Because z is a realized OU path
    (damped rate lam - alpha), the forcing integral uses the OU-bridge
    endpoint weights of :func:`ou_forcing_weights`; the quadratic drift is
    frozen at the left endpoint as usual for ETD1.
    """
    grid = v.grid
    if z_now.grid is not grid and (z_now.grid.N, z_now.grid.L) != (grid.N, grid.L):
        raise ValueError("fields live on different grids")
    rates = semigroup_rates(grid, 0.0, instability)
    z = rates * dt
    from .spectral import phi1

    p1 = dt * phi1(z)
    gamma = (grid.q**2 if instability else 0.0) + alpha
    w_now, w_next = ou_forcing_weights(grid.lam - alpha, rates, dt)
    c = np.exp(z) * v.coeff
    c = c + gamma * (w_now * z_now.coeff + w_next * z_next.coeff)
    if nonlinear:
        c = c + p1 * quad_drift(grid, v.coeff + z_now.coeff)
    if not np.all(np.isfinite(c)):
        raise BlowupError(dt)
    return SpectralField(grid, c)


def step_tangent(psi: SpectralField, u: SpectralField, dt: float,
                 cutoff: CutoffSpec, nonlinear: bool = True) -> SpectralField:
    """One ETD1 step of the variational equation along a cut-off trajectory.

    The drift is the exact Frechet derivative of the cut-off drift, so the
    discrete tangent is the Jacobian action of the discrete u step:

        chi * q^2 (psi - 2 (u_x psi_x)) + 2 chi' <u, psi>_{H1} q^2 (u - u_x^2).
    """
    grid = psi.grid
    kern_z = grid.lam * dt
    from .spectral import phi1

    p1 = dt * phi1(kern_z)
    if nonlinear:
        zeta = sobolev_norm_sq_modes(grid, u.coeff, 1.0)
        chi = cutoff.chi(zeta)
        chip = cutoff.chi_prime(zeta)
        drift = chi * tangent_core(grid, u.coeff, psi.coeff)
        drift = drift + 2.0 * chip * h1_pairing(grid, u.coeff, psi.coeff) * cutoff_core(grid, u.coeff)
    else:
        drift = 0.0
    c = np.exp(kern_z) * psi.coeff + p1 * drift
    if not np.all(np.isfinite(c)):
        raise BlowupError(dt)
    return SpectralField(grid, c)


# ----------------------------------------------------------------------
# trajectory drivers (batched internally over a leading path axis)
# ----------------------------------------------------------------------

def _gaussians_or_zero(path, step, shape):
    if path is None:
        return 0.0, 0.0
    return path.gaussians(step)


def run_full(x: SpectralField, cfg: IntegratorConfig, path: NoisePath | None,
             nonlinear: bool = True) -> Trajectory:
    """Integrate the full/stable equation, storing every store_every steps."""
    grid = x.grid
    spec = path.spec if path is not None else NoiseSpec.white_noise(grid)
    kern = build_kernel(grid, spec, semigroup_rates(grid, 0.0, cfg.instability), cfg.dt)
    c = x.coeff[None, :].copy()
    times = [0.0]
    snaps = [c[0].copy()]
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(cfg.n_steps):
            xi, zeta = _gaussians_or_zero(path, n, c.shape)
            noise = conv_increment(kern, xi, zeta) if path is not None else 0.0
            drift = kern.phi1dt * quad_drift(grid, c) if nonlinear else 0.0
            c = kern.exp * c + drift + noise
            if not np.all(np.isfinite(c)):
                raise BlowupError((n + 1) * cfg.dt)
            if (n + 1) % cfg.store_every == 0:
                times.append((n + 1) * cfg.dt)
                snaps.append(c[0].copy())
    return Trajectory(grid=grid, times=np.array(times), h=np.array(snaps),
                      seed=path.seed if path else None,
                      stream=path.stream if path else 0,
                      dt=cfg.dt, instability=cfg.instability)


def run_coupled(x: SpectralField, cfg: IntegratorConfig, path: NoisePath,
                z0: SpectralField | None = None, alpha: float = 0.0,
                with_h: bool = True) -> Trajectory:
    """Co-evolve the height field, its OU part and the remainder.

    z follows the exact damped OU update from z0 (default 0), v the
    deterministic remainder equation driven by the realized z, and h the
    direct equation. All three consume the same per-step draws, so
    h - (v + z) is pure ETD1 splitting error.
    """
    grid = x.grid
    spec = path.spec
    dt = cfg.dt
    rates_h = semigroup_rates(grid, 0.0, cfg.instability)
    kern_z = build_kernel(grid, spec, grid.lam - alpha, dt)
    kern_h = build_kernel(grid, spec, rates_h, dt)
    gamma = (grid.q**2 if cfg.instability else 0.0) + alpha
    w_now, w_next = ou_forcing_weights(grid.lam - alpha, rates_h, dt)

    z = (z0.coeff if z0 is not None else np.zeros(grid.K, dtype=complex))[None, :].copy()
    v = (x.coeff - z[0])[None, :].copy()
    h = x.coeff[None, :].copy() if with_h else None

    times = [0.0]
    zs, vs = [z[0].copy()], [v[0].copy()]
    hs = [h[0].copy()] if with_h else None
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(cfg.n_steps):
            xi, zeta = path.gaussians(n)
            z_next = kern_z.exp * z + conv_increment(kern_z, xi, zeta)
            v = (kern_h.exp * v
                 + gamma * (w_now * z + w_next * z_next)
                 + kern_h.phi1dt * quad_drift(grid, v + z))
            if with_h:
                h = (kern_h.exp * h + kern_h.phi1dt * quad_drift(grid, h)
                     + conv_increment(kern_h, xi, zeta))
                if not np.all(np.isfinite(h)):
                    raise BlowupError((n + 1) * dt)
            z = z_next
            if not np.all(np.isfinite(v)):
                raise BlowupError((n + 1) * dt)
            if (n + 1) % cfg.store_every == 0:
                times.append((n + 1) * dt)
                zs.append(z[0].copy())
                vs.append(v[0].copy())
                if with_h:
                    hs.append(h[0].copy())
    return Trajectory(grid=grid, times=np.array(times),
                      h=np.array(hs) if with_h else None,
                      v=np.array(vs), z=np.array(zs),
                      seed=path.seed, stream=path.stream, dt=dt,
                      instability=cfg.instability, alpha=alpha)


def run_regularized(u0: SpectralField, cutoff: CutoffSpec, path: NoisePath | None,
                    cfg: IntegratorConfig, forcing: np.ndarray | None = None,
                    nonlinear: bool = True) -> tuple[Trajectory, float]:
    """Integrate the cut-off equation; report the H^1 exit time.

    Returns (trajectory, tau) where tau is the first grid time at which
    |u(t)|_{H1} > rho (inf if never). The pure OU part z is co-evolved on
    the same draws so mild-form residuals and coupled audits can use it.
    An optional forcing array (n_steps, K) enters through the phi1 weight;
    it is how replayed controls are injected.
    """
    grid = u0.grid
    spec = path.spec if path is not None else NoiseSpec.white_noise(grid)
    kern = build_kernel(grid, spec, grid.lam, cfg.dt)
    c = u0.coeff[None, :].copy()
    z = np.zeros((1, grid.K), dtype=complex)
    tau = np.inf
    if np.sqrt(sobolev_norm_sq_modes(grid, c[0], 1.0)) > cutoff.rho:
        tau = 0.0
    times = [0.0]
    snaps = [c[0].copy()]
    zs = [z[0].copy()]
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(cfg.n_steps):
            xi, zeta = _gaussians_or_zero(path, n, c.shape)
            noise = conv_increment(kern, xi, zeta) if path is not None else 0.0
            if nonlinear:
                zeta_arg = sobolev_norm_sq_modes(grid, c, 1.0)
                drift = cutoff.chi(zeta_arg)[:, None] * cutoff_core(grid, c)
            else:
                drift = np.zeros_like(c)
            if forcing is not None:
                drift = drift + forcing[n]
            c = kern.exp * c + kern.phi1dt * drift + noise
            if path is not None:
                z = kern.exp * z + conv_increment(kern, xi, zeta)
            if not np.all(np.isfinite(c)):
                raise BlowupError((n + 1) * cfg.dt)
            t_next = (n + 1) * cfg.dt
            if np.isinf(tau) and np.sqrt(sobolev_norm_sq_modes(grid, c[0], 1.0)) > cutoff.rho:
                tau = t_next
            if (n + 1) % cfg.store_every == 0:
                times.append(t_next)
                snaps.append(c[0].copy())
                zs.append(z[0].copy())
    traj = Trajectory(grid=grid, times=np.array(times), h=np.array(snaps),
                      z=np.array(zs) if path is not None else None,
                      seed=path.seed if path else None,
                      stream=path.stream if path else 0,
                      dt=cfg.dt, instability=True, cutoff_rho=cutoff.rho, tau=tau)
    return traj, tau


def mild_residual(traj: Trajectory, cutoff: CutoffSpec, index: int = -1,
                  nonlinear: bool = True) -> float:
    """L^2 norm of the mild-formulation defect at a stored snapshot.

    Evaluates u(t) - e^{tA} u(0) - int_0^t dxx e^{(t-s)A} F(u(s)) ds - z(t)
    with F the cut-off drift. The integrand is interpolated linearly
    between snapshots and integrated exactly against the stiff exponential
    kernel (plain trapezoid cannot resolve the kernel boundary layer of the
    high modes at realistic strides). The defect shrinks with dt and
    snapshot stride; with the drift off the mild form is exact.
    """
    if traj.z is None:
        raise ValueError("mild residual needs the co-evolved z snapshots")
    grid = traj.grid
    idx = range(len(traj.times))[index]
    t = traj.times[idx]
    u_t = traj.h[idx]
    if idx == 0:
        return 0.0
    defect = u_t - np.exp(grid.lam * t) * traj.h[0] - traj.z[idx]
    if nonlinear:
        from .spectral import phi1, phi2

        ts = traj.times[: idx + 1]
        us = traj.h[: idx + 1]
        zeta = sobolev_norm_sq_modes(grid, us, 1.0)
        chi = cutoff.chi(zeta)[:, None]
        core = chi * cutoff_core(grid, us)      # dxx F(u(s)) in modes
        integral = np.zeros(grid.K, dtype=complex)
        for j in range(idx):
            dtj = ts[j + 1] - ts[j]
            zj = grid.lam * dtj
            tail = np.exp(grid.lam * (t - ts[j + 1]))
            integral += tail * dtj * (phi1(zj) * core[j] + phi2(zj) * (core[j + 1] - core[j]))
        defect = defect - integral
    from .spectral import l2_norm_sq_modes

    return float(np.sqrt(l2_norm_sq_modes(grid, defect)))


# ----------------------------------------------------------------------
# steering control
# ----------------------------------------------------------------------

STEER_BALL_FRACTION = 0.125  # admissible data: |x|_H1, |y|_H1 <= rho / 8


class SteeringError(RuntimeError):
    pass


@dataclass
class SteerResult:
    """Discrete control steering the cut-off dynamics from x to y by time T.

    forcing has shape (n_steps, K) and enters the ETD1 step through the
    phi1 weight; replaying it with noise off reproduces the planned path to
    round-off, hence h(T) = y by construction.
    """

    forcing: np.ndarray
    times: np.ndarray
    plan: np.ndarray
    max_h1: float
    rho: float

    @property
    def exit_time_exceeds_horizon(self) -> bool:
        return self.max_h1 <= self.rho


def steer_control(x: SpectralField, y: SpectralField, T: float, rho: float,
                  dt: float = 1e-3) -> SteerResult:
    """Two-phase steering: free decay to T/2, then linear interpolation.

    Phase one runs the uncontrolled cut-off dynamics (no noise) to smooth
    and shrink the state; phase two prescribes the straight path to the
    target and solves each ETD1 step for the forcing that realizes it.
    Raises SteeringError if the planned path ever leaves the H^1 ball of
    radius rho (the construction is rejected rather than adapted).
    """
    grid = x.grid
    lam_frac = STEER_BALL_FRACTION
    for name, f0 in (("start", x), ("target", y)):
        h1 = np.sqrt(sobolev_norm_sq_modes(grid, f0.coeff, 1.0))
        if h1 > lam_frac * rho:
            raise SteeringError(f"{name} state outside the admissible ball: "
                                f"|.|_H1 = {h1:.3g} > {lam_frac * rho:.3g}")
    cutoff = CutoffSpec(rho=rho)
    n_steps = int(round(T / dt))
    n_half = n_steps // 2
    kern = build_kernel(grid, NoiseSpec.white_noise(grid), grid.lam, dt)

    plan = np.empty((n_steps + 1, grid.K), dtype=complex)
    plan[0] = x.coeff
    c = x.coeff.copy()
    for n in range(n_half):
        zeta = sobolev_norm_sq_modes(grid, c, 1.0)
        drift = cutoff.chi(zeta) * cutoff_core(grid, c)
        c = kern.exp * c + kern.phi1dt * drift
        plan[n + 1] = c
    t_star = n_half * dt
    for n in range(n_half, n_steps):
        t_next = (n + 1) * dt
        w = (t_next - t_star) / (T - t_star)
        plan[n + 1] = (1.0 - w) * plan[n_half] + w * y.coeff

    forcing = np.zeros((n_steps, grid.K), dtype=complex)
    for n in range(n_half, n_steps):
        zeta = sobolev_norm_sq_modes(grid, plan[n], 1.0)
        drift = cutoff.chi(zeta) * cutoff_core(grid, plan[n])
        forcing[n] = (plan[n + 1] - kern.exp * plan[n]) / kern.phi1dt - drift

    h1_path = np.sqrt(sobolev_norm_sq_modes(grid, plan, 1.0))
    max_h1 = float(np.max(h1_path))
    if max_h1 > rho:
        raise SteeringError(f"planned path exits the ball: max |h|_H1 = {max_h1:.3g} > rho = {rho:.3g}")
    times = dt * np.arange(n_steps + 1)
    return SteerResult(forcing=forcing, times=times, plan=plan, max_h1=max_h1, rho=rho)


def replay_control(x: SpectralField, result: SteerResult, rho: float) -> SpectralField:
    """Re-integrate the cut-off dynamics under the stored control, no noise."""
    grid = x.grid
    dt = float(result.times[1] - result.times[0])
    cfg = IntegratorConfig(dt=dt, T=float(result.times[-1]), instability=True)
    cutoff = CutoffSpec(rho=rho)
    traj, _ = run_regularized(x, cutoff, None, cfg, forcing=result.forcing)
    return SpectralField(grid, traj.h[-1])
