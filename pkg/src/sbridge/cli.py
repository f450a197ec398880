"""Command-line frontend: ``sbridge <subcommand> <config>``.

The config is a TOML file with flat dotted keys (``grid.lower = -4.0``), or
a ``manifest.json`` written by an earlier run, whose ``config`` block is
replayed. Every key is validated against the subcommand's schema before any
computation starts; unknown keys are rejected.

Exit codes: 0 success, 2 invalid configuration or input, 3 solver
non-convergence (a ``diagnostic.json`` is written next to the manifest).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .cone_metric import INFINITE, birkhoff_ratio, hilbert_distance, projective_diameter
from .discrete_bridge import (
    DiscreteBridgeProblem,
    interpolate,
    relative_entropy,
    solve,
    write_solution_csv,
)
from .errors import (
    DomainError,
    InfeasibleError,
    NonConvergenceError,
    SimulationError,
    UnsupportedConfiguration,
)
from .gaussian_bridge import (
    GaussianState,
    LinearSystem,
    control_energy,
    covariance_path,
    solve_gauss_bridge,
)
from .markov_prior import (
    Grid1D,
    TransitionKernel,
    build_heat_kernel,
    discretize_gaussian,
    read_matrix_csv,
)
from .omt_reference import Normal1D, check_grid_margin, write_study_csv, zero_noise_study
from .oscillator_cooling import OscillatorModel, cooling_plan, effective_temperatures
from .sde_lab import simulate, oscillator_drift, tube_stats, write_paths_csv, write_tube_csv
from .stationary_steering import StationaryProblem, optimal_stationary_gain

log = logging.getLogger("sbridge")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGENCE = 0, 2, 3

REQUIRED = object()


class ConfigError(DomainError):
    pass


# --- config schema -----------------------------------------------------------
# value kinds: "float", "int", "str", "vector", "matrix", "bool"

_COMMON = {"output_dir": ("str", REQUIRED), "seed": ("int", 0)}

SCHEMAS = {
    "metric": {
        "matrix": ("matrix", REQUIRED),
        "x": ("vector", None),
        "y": ("vector", None),
    },
    "bridge-discrete": {
        "prior.kernel": ("matrix", None),
        "prior.kernel_csv": ("str", None),
        "prior.epsilon": ("float", None),
        "prior.n_steps": ("int", 1),
        "prior.t_final": ("float", 1.0),
        "grid.check_margin": ("bool", True),
        "grid.lower": ("float", None),
        "grid.upper": ("float", None),
        "grid.points": ("int", None),
        "p0.values": ("vector", None),
        "p0.mean": ("float", None),
        "p0.variance": ("float", None),
        "pT.values": ("vector", None),
        "pT.mean": ("float", None),
        "pT.variance": ("float", None),
        "solver.tol": ("float", 1e-12),
        "solver.max_cycles": ("int", 100_000),
    },
    "bridge-gauss": {
        "system.A": ("matrix", REQUIRED),
        "system.B": ("matrix", REQUIRED),
        "system.B1": ("matrix", None),
        "system.t_final": ("float", 1.0),
        "start.mean": ("vector", None),
        "start.covariance": ("matrix", REQUIRED),
        "end.mean": ("vector", None),
        "end.covariance": ("matrix", REQUIRED),
        "solver.n_grid": ("int", 400),
        "solver.tol": ("float", 1e-9),
        "solver.max_iter": ("int", 2000),
    },
    "maintain": {
        "system.A": ("matrix", REQUIRED),
        "system.B": ("matrix", REQUIRED),
        "system.B1": ("matrix", REQUIRED),
        "target.covariance": ("matrix", REQUIRED),
    },
    "cool": {
        "oscillator.m": ("float", 1.0),
        "oscillator.beta": ("float", 1.0),
        "oscillator.k": ("float", 1.0),
        "oscillator.T": ("float", 1.0),
        "oscillator.kappa": ("float", 1.0),
        "initial.covariance": ("matrix", None),
        "target.T_eff": ("float", REQUIRED),
        "steering.t1": ("float", 1.0),
        "steering.n_grid": ("int", 400),
        "steering.tol": ("float", 1e-9),
        "sim.n_paths": ("int", 100_000),
        "sim.n_steps": ("int", 1000),
        "sim.hold_time": ("float", 1.0),
        "sim.record_every": ("int", 10),
        "sim.export_paths": ("int", 20),
        "sim.tube_k": ("float", 3.0),
        "sim.chunk_size": ("int", 4096),
        "sim.workers": ("int", 1),
    },
    "limit-study": {
        "rho0.mean": ("float", REQUIRED),
        "rho0.std": ("float", REQUIRED),
        "rho1.mean": ("float", REQUIRED),
        "rho1.std": ("float", REQUIRED),
        "grid.lower": ("float", -4.0),
        "grid.upper": ("float", 4.0),
        "grid.points": ("int", 400),
        "epsilons": ("vector", REQUIRED),
        "n_time_steps": ("int", 8),
        "solver.tol": ("float", 1e-10),
        "solver.max_cycles": ("int", 200_000),
    },
}


def _flatten(tree, prefix=""):
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(name, kind, value):
    def number(v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {v!r}")
        return float(v)

    if kind == "float":
        out = number(value)
        if not math.isfinite(out):
            raise ConfigError(f"{name}: must be finite")
        return out
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true or false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if kind == "vector":
        if not isinstance(value, list) or not value:
            raise ConfigError(f"{name}: expected a nonempty list of numbers")
        return [number(v) for v in value]
    if kind == "matrix":
        if not isinstance(value, list) or not value or not all(isinstance(r, list) for r in value):
            raise ConfigError(f"{name}: expected a nonempty list of rows")
        rows = [[number(v) for v in r] for r in value]
        if len({len(r) for r in rows}) != 1:
            raise ConfigError(f"{name}: rows have different lengths")
        return rows
    raise AssertionError(kind)


def validate_config(subcommand: str, raw: dict) -> dict:
    """Flatten, type-check and default-fill a raw config; unknown keys are an error."""
    if subcommand not in SCHEMAS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    schema = {**_COMMON, **SCHEMAS[subcommand]}
    flat = _flatten(raw)
    unknown = sorted(set(flat) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for {subcommand}: {', '.join(unknown)}")
    cfg = {}
    for name, (kind, default) in schema.items():
        if name in flat:
            cfg[name] = _coerce(name, kind, flat[name])
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {name!r}")
        elif default is not None:
            cfg[name] = default
    return cfg


def load_config(subcommand: str, path) -> dict:
    path = Path(path)
    try:
        if path.suffix == ".json":
            with open(path, encoding="utf-8") as fh:
                manifest = json.load(fh)
            if manifest.get("subcommand") != subcommand:
                raise ConfigError(f"manifest was written by {manifest.get('subcommand')!r}, not {subcommand!r}")
            raw = manifest["config"]
        else:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return validate_config(subcommand, raw)


def _echo(cfg: dict) -> dict:
    """Nested form of the validated config (replayable as a manifest)."""
    tree: dict = {}
    for key, value in cfg.items():
        node = tree
        *head, last = key.split(".")
        for part in head:
            node = node.setdefault(part, {})
        node[last] = value
    return tree


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _finite_or_str(x):
    return x if math.isfinite(x) else "inf"


# --- subcommands -------------------------------------------------------------


def _run_metric(cfg, out: Path) -> list[str]:
    E = np.array(cfg["matrix"])
    diam = projective_diameter(E)
    ratio = birkhoff_ratio(E)
    report = {"projective_diameter": _finite_or_str(diam), "birkhoff_ratio": ratio}
    if ("x" in cfg) != ("y" in cfg):
        raise ConfigError("x and y must be given together")
    if "x" in cfg:
        report["hilbert_distance"] = _finite_or_str(hilbert_distance(cfg["x"], cfg["y"]))
    _write_json(out / "metric.json", report)
    (out / "ratio.txt").write_text(repr(ratio) + "\n")
    return ["metric.json", "ratio.txt"]


def _discrete_marginal(cfg, key, grid):
    if f"{key}.values" in cfg:
        return np.array(cfg[f"{key}.values"])
    if f"{key}.mean" in cfg and f"{key}.variance" in cfg:
        if grid is None:
            raise ConfigError(f"{key}.mean/variance need a grid (grid.* and prior.epsilon)")
        return discretize_gaussian(grid, cfg[f"{key}.mean"], cfg[f"{key}.variance"])
    raise ConfigError(f"{key}: give {key}.values or {key}.mean and {key}.variance")


def _run_bridge_discrete(cfg, out: Path) -> list[str]:
    sources = [k for k in ("prior.kernel", "prior.kernel_csv", "prior.epsilon") if k in cfg]
    if len(sources) != 1:
        raise ConfigError("give exactly one of prior.kernel, prior.kernel_csv, prior.epsilon")
    n_steps = cfg["prior.n_steps"]
    if n_steps < 1:
        raise ConfigError("prior.n_steps must be >= 1")
    grid = None
    if "prior.epsilon" in cfg:
        try:
            grid = Grid1D(cfg["grid.lower"], cfg["grid.upper"], cfg["grid.points"])
        except KeyError as exc:
            raise ConfigError(f"heat-kernel prior needs {exc.args[0]}") from None
        step = build_heat_kernel(grid, cfg["prior.epsilon"], cfg["prior.t_final"] / n_steps)
    elif "prior.kernel" in cfg:
        step = TransitionKernel(np.array(cfg["prior.kernel"]))
    else:
        step = TransitionKernel(read_matrix_csv(cfg["prior.kernel_csv"]))
    p0 = _discrete_marginal(cfg, "p0", grid)
    pT = _discrete_marginal(cfg, "pT", grid)
    gaussian = [Normal1D(cfg[f"{k}.mean"], math.sqrt(cfg[f"{k}.variance"]))
                for k in ("p0", "pT") if f"{k}.values" not in cfg and f"{k}.variance" in cfg]
    if grid is not None and cfg["grid.check_margin"] and gaussian:
        check_grid_margin(grid, gaussian, cfg["prior.epsilon"], cfg["prior.t_final"])

    problem = DiscreteBridgeProblem(None, p0, pT, step_kernels=[step] * n_steps)
    sol = solve(problem, tol=cfg["solver.tol"], max_cycles=cfg["solver.max_cycles"])
    marginals = interpolate(sol, problem)
    write_solution_csv(out, sol, problem, marginals)
    r0, rT = sol.marginal_residuals(problem)
    report = {
        "cycles": sol.iterations,
        "log_domain": sol.log_domain,
        "residual_p0": r0,
        "residual_pT": rT,
        "relative_entropy": relative_entropy(sol, problem),
        "birkhoff_ratio": birkhoff_ratio(problem.prior.matrix),
        "final_hilbert_change": sol.convergence_log[-1][1],
    }
    _write_json(out / "report.json", report)
    return ["potentials.csv", "coupling.csv", "convergence.csv", "interpolation.csv", "report.json"]


def _run_bridge_gauss(cfg, out: Path) -> list[str]:
    A = np.array(cfg["system.A"])
    B = np.array(cfg["system.B"])
    B1 = np.array(cfg.get("system.B1", cfg["system.B"]))
    sys_ = LinearSystem(A, B, B1, cfg["system.t_final"])
    start = GaussianState(cfg.get("start.mean"), np.array(cfg["start.covariance"]))
    end = GaussianState(cfg.get("end.mean"), np.array(cfg["end.covariance"]))
    sched = solve_gauss_bridge(sys_, start, end, n_grid=cfg["solver.n_grid"],
                               tol=cfg["solver.tol"], max_iter=cfg["solver.max_iter"])
    sched.to_csv(out / "schedule.csv")
    sig = covariance_path(sched, sys_, start)
    n = sys_.n
    with open(out / "covariance_path.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"Sigma_{i + 1}{j + 1}" for i in range(n) for j in range(n)])
        for t, S in zip(sched.times, sig):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in S.ravel()])
    report = {
        "iterations": sched.iterations,
        "boundary_residuals": [float(r) for r in sched.boundary_residuals],
        "control_energy": control_energy(sched, sig),
        "terminal_covariance": sig[-1].tolist(),
        "terminal_error": float(np.max(np.abs(sig[-1] - end.covariance))),
    }
    _write_json(out / "report.json", report)
    return ["schedule.csv", "covariance_path.csv", "report.json"]


def _run_maintain(cfg, out: Path) -> list[str]:
    prob = StationaryProblem(np.array(cfg["system.A"]), np.array(cfg["system.B"]),
                             np.array(cfg["system.B1"]), np.array(cfg["target.covariance"]))
    try:
        report = optimal_stationary_gain(prob).to_dict()
    except InfeasibleError as exc:
        # infeasibility is an answer, not a failure
        report = {"feasible": False, "feasibility_residual": exc.report.residual,
                  "threshold": exc.report.threshold}
    _write_json(out / "gain.json", report)
    return ["gain.json"]


def _run_cool(cfg, out: Path) -> list[str]:
    model = OscillatorModel(cfg["oscillator.m"], cfg["oscillator.beta"], cfg["oscillator.k"],
                            cfg["oscillator.T"], cfg["oscillator.kappa"])
    if "initial.covariance" in cfg:
        initial = GaussianState.centered(np.array(cfg["initial.covariance"]))
    else:
        initial = GaussianState.centered(np.diag([model.k * model.T / model.kappa, model.k * model.T / model.m]))
    t1 = cfg["steering.t1"]
    plan = cooling_plan(model, initial, cfg["target.T_eff"], t1=t1,
                        n_grid=cfg["steering.n_grid"], tol=cfg["steering.tol"])
    plan.to_json(out / "plan.json")

    n_steps, every = cfg["sim.n_steps"], cfg["sim.record_every"]
    dt = t1 / n_steps
    hold_steps = cfg["sim.hold_time"] / dt
    if cfg["sim.hold_time"] < 0 or abs(hold_steps - round(hold_steps)) > 1e-9 * max(1.0, hold_steps):
        raise ConfigError("sim.hold_time must be a nonnegative multiple of steering.t1 / sim.n_steps")
    total = n_steps + int(round(hold_steps))
    if n_steps % every or total % every:
        raise ConfigError("sim.record_every must divide both phase step counts")
    if not 0 <= cfg["sim.export_paths"] <= min(100, cfg["sim.n_paths"]):
        raise ConfigError("sim.export_paths must lie in [0, min(100, sim.n_paths)]")

    drift = oscillator_drift(model, force=plan.force)
    G = np.array([[0.0], [model.sigma]])
    t_final = t1 + int(round(hold_steps)) * dt
    ens = simulate(drift, G, initial, t_final, cfg["sim.n_paths"], total, cfg["seed"],
                   record_every=every, chunk_size=cfg["sim.chunk_size"],
                   workers=cfg["sim.workers"], policy="cooling")
    tube = tube_stats(ens, k=cfg["sim.tube_k"])
    write_tube_csv(out / "tube.csv", tube)
    files = ["plan.json", "tube.csv"]
    if cfg["sim.export_paths"]:
        write_paths_csv(out / "paths.csv", ens, cfg["sim.export_paths"])
        files.append("paths.csv")

    j1 = n_steps // every
    cov_t1 = np.cov(ens.paths[:, j1].T)
    cov_end = np.cov(ens.paths[:, -1].T)
    report = {
        "target_covariance": plan.target.covariance.tolist(),
        "terminal_half_width_ode": (cfg["sim.tube_k"] * np.sqrt(np.diag(plan.terminal_covariance))).tolist(),
        "terminal_half_width_mc": tube.half_width[j1].tolist(),
        "final_half_width_mc": tube.half_width[-1].tolist(),
        "mc_covariance_t1": cov_t1.tolist(),
        "mc_covariance_final": cov_end.tolist(),
        "maintained_T_eff": list(effective_temperatures(model, plan.maintained_covariance)),
        "steering_energy": plan.steering_energy,
        "maintenance_power": plan.maintenance.power,
        "n_paths": ens.n_paths,
        "dt": dt,
    }
    _write_json(out / "report.json", report)
    files.append("report.json")
    return files


def _run_limit_study(cfg, out: Path) -> list[str]:
    grid = Grid1D(cfg["grid.lower"], cfg["grid.upper"], cfg["grid.points"])
    rho0 = Normal1D(cfg["rho0.mean"], cfg["rho0.std"])
    rho1 = Normal1D(cfg["rho1.mean"], cfg["rho1.std"])
    rows = zero_noise_study(rho0, rho1, grid, cfg["epsilons"], n_time_steps=cfg["n_time_steps"],
                            tol=cfg["solver.tol"], max_cycles=cfg["solver.max_cycles"])
    write_study_csv(out / "study.csv", rows)
    with open(out / "mid_marginals.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x"] + [f"eps_{r.epsilon!r}" for r in rows])
        for i, x in enumerate(grid.points):
            w.writerow([repr(float(x))] + [repr(float(r.mid_marginal[i])) for r in rows])
    with open(out / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "cycle", "dH", "residual"])
        for r in rows:
            for k, dh, res in r.convergence_log:
                w.writerow([repr(r.epsilon), k, repr(float(dh)), repr(float(res))])
    w2 = [r.w2_mid for r in rows]
    floor = rows[0].discretization_floor
    report = {
        "w2_mid": w2,
        "discretization_floor": floor,
        "strictly_decreasing_above_floor": all(
            b < a or a <= floor for a, b in zip(w2, w2[1:])
        ),
    }
    _write_json(out / "report.json", report)
    return ["study.csv", "mid_marginals.csv", "convergence.csv", "report.json"]


RUNNERS = {
    "metric": _run_metric,
    "bridge-discrete": _run_bridge_discrete,
    "bridge-gauss": _run_bridge_gauss,
    "maintain": _run_maintain,
    "cool": _run_cool,
    "limit-study": _run_limit_study,
}


def run(subcommand: str, config_path) -> int:
    """Validate, execute and record one run; returns the process exit code."""
    start = time.perf_counter()
    try:
        cfg = load_config(subcommand, config_path)
    except DomainError as exc:
        print(f"sbridge: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)

    code, files, error = EXIT_OK, [], None
    try:
        files = RUNNERS[subcommand](cfg, out)
    except (NonConvergenceError, SimulationError) as exc:
        code, error = EXIT_NONCONVERGENCE, str(exc)
        diag = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, NonConvergenceError):
            diag["last_change"] = exc.last_change
            diag["log"] = [list(map(float, row)) if isinstance(row, (tuple, list)) else float(row)
                           for row in (exc.log or [])]
        _write_json(out / "diagnostic.json", diag)
        files = ["diagnostic.json"]
    except (DomainError, InfeasibleError, UnsupportedConfiguration, ValueError) as exc:
        code, error = EXIT_INVALID, str(exc)

    manifest = {
        "subcommand": subcommand,
        "config": _echo(cfg),
        "seed": cfg["seed"],
        "versions": {
            "sbridge": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "artifacts": sorted(files),
        "exit_code": code,
        "error": error,
        "wall_time_s": time.perf_counter() - start,
    }
    _write_json(out / "manifest.json", manifest)
    if error:
        print(f"sbridge {subcommand}: {error}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="sbridge", description="Schrödinger bridge and covariance steering toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("subcommand", choices=sorted(RUNNERS))
    parser.add_argument("config", help="TOML config or a manifest.json to replay")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.subcommand, args.config)


if __name__ == "__main__":
    sys.exit(main())
