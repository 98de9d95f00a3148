"""Experiment configuration, manifests and persistent outputs.

All randomness flows from the single config seed through documented stream
offsets, every output file references the manifest of the run that made
it, and report writing is byte-stable: identical config + seed reruns
produce identical CSV bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .noise import NoiseSpec
from .spectral import GridSpec
from .dynamics import Trajectory

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RunManifest",
    "load_config",
    "parse_config",
    "normalize_config",
    "config_hash",
    "write_report",
    "aggregate_verdicts",
    "save_trajectory",
    "load_trajectory",
]

TRAJ_MAGIC = b"GSTR"
TRAJ_VERSION = 1

DEFAULTS = {
    "grid": {"N": 64, "L": 2.0 * np.pi},
    "noise": {"white": True, "delta": 1.0, "alpha_decay": None},
    "integrator": {"dt": 1e-3, "T": 1.0, "instability": True, "store_every": 1},
    "output_dir": "out",
}

GAMMA_LO, GAMMA_HI = 1.25, 1.5


class ConfigError(ValueError):
    """Configuration rejected; the message names the offending field."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, defaults-filled experiment description."""

    raw: dict
    seed: int
    grid: GridSpec
    noise: NoiseSpec
    dt: float
    T: float
    instability: bool
    store_every: int
    cutoff_rho: float | None
    markov: dict | None
    ergodicity: dict | None
    output_dir: str

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _fill_defaults(data: dict) -> dict:
    out = {}
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            block = dict(default)
            block.update(data.get(key, {}) or {})
            out[key] = block
        else:
            out[key] = data.get(key, default)
    for key in ("seed", "cutoff", "markov", "ergodicity"):
        if key in data:
            out[key] = data[key]
    return out


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a parsed config dict, fill defaults, build typed objects."""
    if not isinstance(data, dict):
        raise ConfigError("top level: config must be a JSON object")
    filled = _fill_defaults(data)

    _require("seed" in filled, "seed", "missing; reproducibility requires an explicit seed")
    seed = filled["seed"]
    _require(isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0,
             "seed", "must be a nonnegative integer")

    g = filled["grid"]
    _require(isinstance(g.get("N"), int) and g["N"] >= 16 and g["N"] % 2 == 0,
             "grid.N", "must be an even integer >= 16")
    _require(isinstance(g.get("L"), (int, float)) and g["L"] > 0,
             "grid.L", "must be a positive number")
    grid = GridSpec.create(N=g["N"], L=float(g["L"]))

    nz = filled["noise"]
    _require(isinstance(nz.get("white"), bool), "noise.white", "must be a boolean")
    decay = nz.get("alpha_decay")
    if nz["white"]:
        _require(decay in (None, 0, 0.0), "noise.alpha_decay",
                 "white noise fixes alpha_k = 1; remove the decay exponent")
    delta = nz.get("delta")
    if delta is not None:
        _require(isinstance(delta, (int, float)), "noise.delta", "must be a number or null")
    needs_nondegenerate = "markov" in filled or "ergodicity" in filled
    if needs_nondegenerate:
        _require(delta is not None and delta > 0, "noise.delta",
                 "must be > 0 when markov/ergodicity experiments are enabled "
                 "(nondegenerate covariance assumption)")
    if nz["white"]:
        noise = NoiseSpec(alpha=np.ones(grid.K), white=True, delta=delta)
    else:
        _require(isinstance(decay, (int, float)) and decay >= 0,
                 "noise.alpha_decay", "must be a nonnegative exponent for colored noise")
        k = np.arange(1, grid.K + 1, dtype=float)
        alpha = k ** (-float(decay))
        if delta is not None and delta > 0:
            _require(bool(np.all(alpha >= delta)), "noise.delta",
                     f"alpha_K = {alpha[-1]:.3g} falls below delta = {delta}")
        noise = NoiseSpec(alpha=alpha, white=False, delta=delta)

    it = filled["integrator"]
    _require(isinstance(it.get("dt"), (int, float)) and it["dt"] > 0,
             "integrator.dt", "must be a positive number")
    _require(isinstance(it.get("T"), (int, float)) and it["T"] >= it["dt"],
             "integrator.T", "must cover at least one step")
    _require(isinstance(it.get("instability"), bool), "integrator.instability",
             "must be a boolean")
    _require(isinstance(it.get("store_every"), int) and it["store_every"] >= 1,
             "integrator.store_every", "must be a positive integer")

    rho = None
    if "cutoff" in filled and filled["cutoff"] is not None:
        c = filled["cutoff"]
        _require(isinstance(c, dict) and isinstance(c.get("rho"), (int, float))
                 and c["rho"] > 0, "cutoff.rho", "must be a positive number")
        rho = float(c["rho"])

    markov = filled.get("markov")
    if markov is not None:
        _require(isinstance(markov, dict), "markov", "must be an object")
        m = dict(markov)
        m.setdefault("t", 0.5)
        m.setdefault("M", 2000)
        m.setdefault("dt", 2e-3)
        m.setdefault("h_scales", [1e-1, 1e-2, 1e-3, 1e-4])
        m.setdefault("rho_grid", [1.0, 1.5, 2.0])
        m.setdefault("eps_grid", [0.1, 0.25, 0.5])
        m.setdefault("restart_pairs", [[0.0, 0.5], [0.25, 0.75], [0.5, 1.0]])
        _require(m["M"] >= 100, "markov.M", "needs at least 100 paths")
        markov = m

    ergodicity = filled.get("ergodicity")
    if ergodicity is not None:
        _require(isinstance(ergodicity, dict), "ergodicity", "must be an object")
        e = dict(ergodicity)
        e.setdefault("gamma", 1.3)
        e.setdefault("T_grid", [50.0, 100.0, 200.0])
        e.setdefault("burn_in", 20.0)
        e.setdefault("R_grid", [0.5, 1.0, 2.0, 4.0])
        e.setdefault("dt", 2e-3)
        e.setdefault("store_every", 250)
        e.setdefault("n_paths", 8)
        _require(GAMMA_LO < e["gamma"] < GAMMA_HI, "ergodicity.gamma",
                 f"must lie in the open interval ({GAMMA_LO}, {GAMMA_HI})")
        ergodicity = e

    outdir = os.environ.get("GROWTH_SPDE_OUTDIR", filled["output_dir"])
    normalized = normalize_config({**filled,
                                   "markov": markov, "ergodicity": ergodicity,
                                   "cutoff": {"rho": rho} if rho is not None else None})
    return ExperimentConfig(raw=normalized, seed=seed, grid=grid, noise=noise,
                            dt=float(it["dt"]), T=float(it["T"]),
                            instability=it["instability"],
                            store_every=it["store_every"], cutoff_rho=rho,
                            markov=markov, ergodicity=ergodicity,
                            output_dir=outdir)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
    return parse_config(data)


def normalize_config(data: dict) -> dict:
    """Canonical form: defaults filled, null sections dropped, keys sorted."""
    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in sorted(obj.items()) if v is not None}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        return obj

    return clean(_fill_defaults(data))


def config_hash(data: dict) -> str:
    canon = json.dumps(normalize_config(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    """Provenance record referenced by every output file of a run."""

    config_hash: str
    seed: int
    streams: list
    verdicts: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def versions(self) -> dict:
        import scipy

        from . import __version__

        return {"growth_spde": __version__, "numpy": np.__version__,
                "scipy": scipy.__version__}

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed,
                "streams": list(self.streams), "verdicts": self.verdicts,
                "wall_clock_s": round(self.wall_clock, 3),
                "versions": self.versions()}


def aggregate_verdicts(verdicts: dict) -> bool:
    """True only if every leaf verdict passes."""
    ok = True
    for v in verdicts.values():
        if isinstance(v, dict):
            ok = ok and aggregate_verdicts(v)
        elif isinstance(v, bool):
            ok = ok and v
    return ok


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_report(rows: list[dict], verdicts: dict, manifest: RunManifest,
                 outdir: str, name: str,
                 columns: list[str] | None = None) -> dict:
    """Write {name}.csv, {name}_verdict.json and manifest.json.

    The CSV is byte-stable for identical inputs: fixed column order,
    repr-formatted floats, no timestamps. Returns the file paths.
    """
    os.makedirs(outdir, exist_ok=True)
    csv_path = os.path.join(outdir, f"{name}.csv")
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    try:
        with open(csv_path, "w", newline="") as fh:
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")
    except OSError as e:
        raise OSError(f"failed writing report {csv_path}: {e}") from e

    manifest.verdicts = {**manifest.verdicts, name: verdicts}
    verdict_path = os.path.join(outdir, f"{name}_verdict.json")
    payload = {"verdicts": verdicts, "pass": aggregate_verdicts(verdicts),
               "config_hash": manifest.config_hash}
    with open(verdict_path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")

    manifest_path = os.path.join(outdir, "manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(_jsonable(manifest.to_dict()), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"csv": csv_path, "verdict": verdict_path, "manifest": manifest_path}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


# ----------------------------------------------------------------------
# trajectory files: header JSON + framed snapshots
# ----------------------------------------------------------------------

def save_trajectory(traj: Trajectory, path: str, config: dict | None = None):
    fields = [n for n in ("h", "v", "z") if getattr(traj, n) is not None]
    header = {
        "L": traj.grid.L, "N": traj.grid.N, "K": traj.grid.K,
        "dt": traj.dt, "instability": traj.instability, "alpha": traj.alpha,
        "seed": traj.seed, "stream": traj.stream, "fields": fields,
        "n_snapshots": int(traj.times.size),
        "cutoff_rho": traj.cutoff_rho,
        "tau": None if traj.tau is None or np.isinf(traj.tau) else traj.tau,
        "config": config or {},
        "config_hash": traj.config_hash,
    }
    blob = json.dumps(_jsonable(header), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC + bytes([TRAJ_VERSION]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for i, t in enumerate(traj.times):
            fh.write(struct.pack("<d", float(t)))
            for name in fields:
                fh.write(np.ascontiguousarray(getattr(traj, name)[i],
                                              dtype="<c16").tobytes())


def load_trajectory(path: str) -> Trajectory:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != TRAJ_MAGIC:
            raise ValueError(f"{path}: not a trajectory file")
        version = fh.read(1)[0]
        if version != TRAJ_VERSION:
            raise ValueError(f"{path}: unsupported trajectory version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        grid = GridSpec.create(N=header["N"], L=header["L"])
        K = grid.K
        S = header["n_snapshots"]
        fields = header["fields"]
        times = np.empty(S)
        data = {name: np.empty((S, K), dtype=complex) for name in fields}
        for i in range(S):
            (times[i],) = struct.unpack("<d", fh.read(8))
            for name in fields:
                buf = fh.read(16 * K)
                data[name][i] = np.frombuffer(buf, dtype="<c16")
    return Trajectory(grid=grid, times=times,
                      h=data.get("h"), v=data.get("v"), z=data.get("z"),
                      seed=header.get("seed"), stream=header.get("stream", 0),
                      dt=header.get("dt", 0.0),
                      instability=header.get("instability", True),
                      alpha=header.get("alpha", 0.0),
                      cutoff_rho=header.get("cutoff_rho"),
                      config_hash=header.get("config_hash", ""),
                      tau=header.get("tau") if header.get("tau") is not None else np.inf)
