"""Command-line shell tying the experiments together.

Every subcommand loads a JSON config (seed mandatory), runs its experiment,
and writes CSV data, a JSON verdict and the run manifest into the output
directory. Exit codes: 0 all verdicts pass, 1 any verdict failed,
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    RunManifest,
    aggregate_verdicts,
    load_config,
    load_trajectory,
    save_trajectory,
    write_report,
)
from .dynamics import CutoffSpec, IntegratorConfig, run_coupled, run_regularized, replay_control, steer_control
from .noise import NoisePath
from .spectral import SpectralField, norm, random_field

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _manifest(cfg: ExperimentConfig, streams) -> RunManifest:
    return RunManifest(config_hash=cfg.hash, seed=cfg.seed, streams=list(streams))


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    icfg = IntegratorConfig(dt=cfg.dt, T=cfg.T, instability=cfg.instability,
                            store_every=cfg.store_every)
    path = NoisePath(cfg.seed, cfg.grid, cfg.noise, cfg.dt)
    x = SpectralField.zero(cfg.grid)
    if cfg.cutoff_rho is not None:
        traj, tau = run_regularized(x, CutoffSpec(rho=cfg.cutoff_rho), path, icfg)
        print(f"cut-off run finished; exit time tau = {tau}")
    else:
        traj = run_coupled(x, icfg, path)
        print(f"coupled run finished; split gap = {traj.split_gap():.3e}")
    traj.config_hash = cfg.hash
    out = args.out or "trajectory.gstr"
    save_trajectory(traj, out, config=cfg.raw)
    print(f"wrote {out} ({traj.times.size} snapshots)")
    return EXIT_PASS


def cmd_energy_audit(cfg: ExperimentConfig, args) -> int:
    from .energy import audit_monotone, energy_series

    traj = load_trajectory(args.input)
    if traj.v is None or traj.z is None:
        print("error: trajectory lacks v/z snapshots; run simulate without --rho",
              file=sys.stderr)
        return EXIT_USAGE
    records = energy_series(traj, alpha=args.alpha)
    tol = args.tol_scale * traj.dt
    violations = audit_monotone(records, tol)
    rows = [{"t": r.t, "kinetic": r.kinetic, "accum": r.accum, "E": r.total,
             "violations_at_t": sum(1 for v in violations if v[1] == r.t)}
            for r in records]
    verdicts = {"monotone_within_tol": len(violations) == 0,
                "tolerance": tol, "n_violations": len(violations)}
    manifest = _manifest(cfg, [traj.stream])
    write_report(rows, verdicts, manifest, cfg.output_dir, "energy_audit")
    return EXIT_PASS if verdicts["monotone_within_tol"] else EXIT_FAIL


def cmd_strong_feller(cfg: ExperimentConfig, args) -> int:
    from .markov import default_functionals, strong_feller_modulus

    m = cfg.markov or {}
    table = strong_feller_modulus(
        default_functionals(cfg.grid), SpectralField.zero(cfg.grid),
        t=m.get("t", 0.5), h_scales=m.get("h_scales", [1e-1, 1e-2, 1e-3, 1e-4]),
        M=m.get("M", 2000), grid=cfg.grid, spec=cfg.noise, dt=m.get("dt", 2e-3),
        seed=cfg.seed, cutoff=CutoffSpec(rho=cfg.cutoff_rho) if cfg.cutoff_rho else None)
    rows = [{"h_scale": s, "modulus": mod, "stderr": e}
            for s, mod, e in zip(table.scales, table.modulus, table.stderr)]
    verdicts = {"nonincreasing": table.nonincreasing,
                "fit_constant": table.fit_constant,
                "fit_residual": table.fit_residual,
                "loglog_slope": table.loglog_slope}
    write_report(rows, verdicts, _manifest(cfg, [0]), cfg.output_dir, "strong_feller")
    return EXIT_PASS if table.nonincreasing else EXIT_FAIL


def cmd_bel_gradient(cfg: ExperimentConfig, args) -> int:
    from .dynamics import CutoffSpec
    from .markov import bel_gradient, mode_projection, run_ensemble

    m = cfg.markov or {}
    t, dt, M = m.get("t", 0.5), m.get("dt", 2e-3), m.get("M", 2000)
    rho = cfg.cutoff_rho or 5.0
    rng = np.random.default_rng(cfg.seed)
    rows, ok = [], True
    for trial in range(args.pairs):
        x = random_field(cfg.grid, rng, decay=2.0, amplitude=0.2)
        h = random_field(cfg.grid, rng, decay=2.0)
        phi = mode_projection(1 + trial % 2, "cos", bounded=False)
        est = bel_gradient(phi, x, h, t=t, cutoff=CutoffSpec(rho=rho), M=M,
                           grid=cfg.grid, spec=cfg.noise, dt=dt,
                           seed=cfg.seed, stream=trial)
        eps = 1e-3
        kw = dict(grid=cfg.grid, spec=cfg.noise, dt=dt, seed=cfg.seed,
                  stream=trial, cutoff=CutoffSpec(rho=rho))
        up, au = run_ensemble(x=SpectralField(cfg.grid, x.coeff + eps * h.coeff),
                              T=t, M=M, **kw)
        dn, ad = run_ensemble(x=x, T=t, M=M, **kw)
        alive = au & ad
        fd_vals = (phi(cfg.grid, up)[alive] - phi(cfg.grid, dn)[alive]) / eps
        fd, fd_err = np.mean(fd_vals), np.std(fd_vals, ddof=1) / np.sqrt(fd_vals.size)
        sigma = float(np.hypot(est.stderr, fd_err))
        agree = abs(est.value - fd) <= 3 * sigma
        ok = ok and agree
        rows.append({"pair": trial, "bel": est.value, "bel_stderr": est.stderr,
                     "fd": fd, "fd_stderr": fd_err, "agree_3sigma": agree})
    verdicts = {"all_pairs_agree": ok, "pairs": len(rows)}
    write_report(rows, verdicts, _manifest(cfg, list(range(args.pairs))),
                 cfg.output_dir, "bel_gradient")
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_tau_tail(cfg: ExperimentConfig, args) -> int:
    from .markov import tau_tail

    m = cfg.markov or {}
    table = tau_tail(SpectralField.zero(cfg.grid),
                     rho_grid=m.get("rho_grid", [1.0, 1.5, 2.0]),
                     eps_grid=m.get("eps_grid", [0.1, 0.25, 0.5]),
                     M=m.get("M", 2000), grid=cfg.grid, spec=cfg.noise,
                     dt=m.get("dt", 2e-3), seed=cfg.seed)
    rows = []
    for i, rho in enumerate(table.rho_grid):
        for j, eps in enumerate(table.eps_grid):
            rows.append({"rho": rho, "eps": eps, "p_exit": table.prob[i, j],
                         "lo": table.lo[i, j], "hi": table.hi[i, j],
                         "p_z_sup_small": table.z_sup_prob[i, j]})
    verdicts = {"monotone_in_rho": table.monotone_in_rho(),
                "monotone_in_eps": table.monotone_in_eps(),
                "stay_bound": table.stay_bound_satisfied()}
    write_report(rows, verdicts, _manifest(cfg, [0]), cfg.output_dir, "tau_tail")
    return EXIT_PASS if aggregate_verdicts(verdicts) else EXIT_FAIL


def cmd_markov_test(cfg: ExperimentConfig, args) -> int:
    from .markov import default_functionals, markov_restart_test

    m = cfg.markov or {}
    pairs = m.get("restart_pairs", [[0.0, 0.5], [0.25, 0.75], [0.5, 1.0]])
    rows, ok = [], True
    for s, t in pairs:
        res = markov_restart_test(SpectralField.zero(cfg.grid), s=s, t=t,
                                  M=m.get("M", 2000),
                                  functionals=default_functionals(cfg.grid),
                                  grid=cfg.grid, spec=cfg.noise,
                                  dt=m.get("dt", 2e-3), seed=cfg.seed)
        for r in res:
            ok = ok and r["p_value"] > 0.01
            rows.append({"s": s, "t": t, **r})
    verdicts = {"all_p_above_0.01": ok, "pairs": len(pairs)}
    write_report(rows, verdicts, _manifest(cfg, [10, 20, 30]),
                 cfg.output_dir, "markov_test")
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_ergodicity(cfg: ExperimentConfig, args) -> int:
    from .ergodic import (ErgodicityConfig, krylov_bogoliubov, moments_settled,
                          tail_tightness)

    e = cfg.ergodicity or {}
    ecfg = ErgodicityConfig(gamma=e.get("gamma", 1.3),
                            T_grid=tuple(e.get("T_grid", (50.0, 100.0, 200.0))),
                            burn_in=e.get("burn_in", 20.0),
                            R_grid=tuple(e.get("R_grid", (0.5, 1.0, 2.0, 4.0))),
                            dt=e.get("dt", 2e-3),
                            store_every=e.get("store_every", 250),
                            n_paths=e.get("n_paths", 8))
    measures = krylov_bogoliubov(cfg.grid, cfg.noise, ecfg, seed=cfg.seed)
    from .markov import EnsembleSummary

    rows = []
    for meas in measures:
        for name in meas.samples:
            s = EnsembleSummary.from_values(name, meas.pooled(name), cfg.seed)
            rows.append({"T": meas.T, "functional": name, "mean": s.mean,
                         "stderr": s.stderr, "second_moment": meas.moment(name, 2),
                         "paths": s.paths})
    table = tail_tightness(measures, ecfg.R_grid)
    settle = moments_settled(measures, "norm_L2")
    verdicts = {"second_moments_settling": settle["settled"],
                "moment_gaps": settle["gaps"],
                "tails_nonincreasing_in_R": table["nonincreasing_in_R"],
                "sup_tail_at_Rmax": table["sup_tail_at_Rmax"],
                "tails_uniformly_small": table["sup_tail_at_Rmax"] <= 0.05}
    write_report(rows, verdicts, _manifest(cfg, [0]), cfg.output_dir, "ergodicity")
    return EXIT_PASS if aggregate_verdicts(verdicts) else EXIT_FAIL


def cmd_phi_construct(cfg: ExperimentConfig | None, args) -> int:
    from .ergodic import phi_construct

    samples = np.loadtxt(args.input, delimiter=",").ravel()
    phi = phi_construct(samples, knots=args.knots)
    rows = [{"knot": float(k), "value": float(v)}
            for k, v in zip(phi.knots, phi.values)]
    slopes = phi.slopes
    verdicts = {"concave": bool(np.all(np.diff(slopes) <= 1e-12)),
                "nondecreasing": bool(np.all(np.diff(phi.values) >= -1e-12)),
                "unbounded": bool(slopes[-1] > 0),
                "mean_phi": float(np.mean(phi(samples)))}
    outdir = cfg.output_dir if cfg else "out"
    manifest = _manifest(cfg, [0]) if cfg else RunManifest("-", 0, [0])
    write_report(rows, verdicts, manifest, outdir, "phi_construct")
    return EXIT_PASS if aggregate_verdicts(verdicts) else EXIT_FAIL


def cmd_steer(cfg: ExperimentConfig, args) -> int:
    rho = cfg.cutoff_rho or 10.0
    rng = np.random.default_rng(cfg.seed)
    x = random_field(cfg.grid, rng, decay=2.0)
    x = x * (rho / 100.0 / norm(x, "H", s=1.0))
    y = random_field(cfg.grid, rng, decay=3.0)
    y = y * (rho / 100.0 / norm(y, "H", s=1.0))
    res = steer_control(x, y, T=cfg.T, rho=rho, dt=cfg.dt)
    end = replay_control(x, res, rho)
    err = norm(SpectralField(cfg.grid, end.coeff - y.coeff), "H", s=1.0)
    rows = [{"target_error_H1": err, "max_h1": res.max_h1, "rho": rho}]
    verdicts = {"endpoint_within_1e-6": bool(err <= 1e-6),
                "stays_inside_ball": res.exit_time_exceeds_horizon}
    write_report(rows, verdicts, _manifest(cfg, [0]), cfg.output_dir, "steer")
    return EXIT_PASS if aggregate_verdicts(verdicts) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="growth-spde",
                                description="surface-growth SPDE laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="integrate and store a trajectory")
    sim.add_argument("--config", required=True)
    sim.add_argument("--n", type=int, help="override grid size")
    sim.add_argument("--length", type=float, help="override domain length")
    sim.add_argument("--dt", type=float)
    sim.add_argument("--horizon", type=float)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--rho", type=float, help="enable the cut-off dynamics")
    stab = sim.add_mutually_exclusive_group()
    stab.add_argument("--stable", action="store_true")
    stab.add_argument("--unstable", action="store_true")
    sim.add_argument("--out", help="trajectory output file")

    ea = sub.add_parser("energy-audit", help="balance audit of a stored trajectory")
    ea.add_argument("--config", required=True)
    ea.add_argument("--in", dest="input", required=True)
    ea.add_argument("--alpha", type=float, default=None)
    ea.add_argument("--tol-scale", type=float, default=10.0)

    for name in ("strong-feller", "tau-tail", "markov-test", "ergodicity", "steer"):
        q = sub.add_parser(name)
        q.add_argument("--config", required=True)

    bg = sub.add_parser("bel-gradient", help="gradient estimator vs finite differences")
    bg.add_argument("--config", required=True)
    bg.add_argument("--pairs", type=int, default=3)

    pc = sub.add_parser("phi-construct", help="concave moment map from samples")
    pc.add_argument("--config", required=False, default=None)
    pc.add_argument("--in", dest="input", required=True)
    pc.add_argument("--knots", type=int, default=20)
    return p


def _apply_overrides(data: dict, args) -> dict:
    grid = dict(data.get("grid", {}))
    integ = dict(data.get("integrator", {}))
    if getattr(args, "n", None):
        grid["N"] = args.n
    if getattr(args, "length", None):
        grid["L"] = args.length
    if getattr(args, "dt", None):
        integ["dt"] = args.dt
    if getattr(args, "horizon", None):
        integ["T"] = args.horizon
    if getattr(args, "stable", False):
        integ["instability"] = False
    if getattr(args, "unstable", False):
        integ["instability"] = True
    out = {**data, "grid": grid, "integrator": integ}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "rho", None):
        out["cutoff"] = {"rho": args.rho}
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "energy-audit": cmd_energy_audit,
    "strong-feller": cmd_strong_feller,
    "bel-gradient": cmd_bel_gradient,
    "tau-tail": cmd_tau_tail,
    "markov-test": cmd_markov_test,
    "ergodicity": cmd_ergodicity,
    "phi-construct": cmd_phi_construct,
    "steer": cmd_steer,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0,) else 0
    try:
        cfg = None
        if args.config is not None:
            with open(args.config) as fh:
                data = json.load(fh)
            from .config import parse_config

            cfg = parse_config(_apply_overrides(data, args))
        elif args.command != "phi-construct":
            print("error: --config is required", file=sys.stderr)
            return EXIT_USAGE
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.time()
    code = COMMANDS[args.command](cfg, args)
    print(f"{args.command}: {'PASS' if code == EXIT_PASS else 'FAIL'} "
          f"({time.time() - t0:.1f}s)")
    return code


if __name__ == "__main__":
    sys.exit(main())
