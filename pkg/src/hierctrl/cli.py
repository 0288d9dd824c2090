"""Batch front end: problem files in, manifested result directories out.

Problem files are JSON.  Every run writes one directory containing
manifest.json (command, config hash, output list, wall time, versions)
plus the command's result files; every CSV gets a sibling
<name>.schema.json documenting its columns.  Identical problem file and
seed give bit-identical result files (the manifest differs in wall time
only).

Commands: validate, simulate, nash, control, observability, carleman,
sweep.  See the README for the file format.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import scipy

from . import __version__
from .analysis import (carleman_ratio_check, energy_constant_check,
                       observability_ratio, single_equation_samples)
from .errors import ConvergenceError, ValidationError
from .leader import run_hierarchic_control, x_norm
from .nash import (ControlProfile, check_nash_stationarity, leader_cost,
                   solve_nash_operator, solve_nash_optimality,
                   state_with_controls)
from .pde import state_to_binary, state_to_csv
from .problem import (HierarchicProblem, SolverOptions, prepare)

COMMANDS = ("validate", "simulate", "nash", "control", "observability",
            "carleman", "sweep")

_TOP_KEYS = {"grid", "regions", "coefficients", "functionals", "initial",
             "targets", "weights", "controls", "solver", "seed", "sweep"}


@dataclass
class ProblemFile:
    """A parsed problem file plus its provenance."""

    problem: HierarchicProblem
    raw: dict
    sha256: str
    path: Optional[str] = None


@dataclass
class RunManifest:
    command: str
    config_sha256: str
    outputs: list
    wall_time_s: float
    versions: dict
    error: Optional[str] = None
    extra: dict = field(default_factory=dict)


def _versions() -> dict:
    return {"hierctrl": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(map(str, sys.version_info[:3]))}


def _take(section: dict, key, default=None):
    return section.get(key, default) if section else default


def _problem_from_config(cfg: dict) -> HierarchicProblem:
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ValidationError(f"unknown problem-file sections: {sorted(unknown)}")
    grid = cfg.get("grid", {})
    regions = cfg.get("regions", {})
    coeffs = cfg.get("coefficients", {})
    funcs = cfg.get("functionals", {})
    weights = cfg.get("weights", {})
    controls = cfg.get("controls", {})
    targets = cfg.get("targets", {})
    solver = SolverOptions(**cfg.get("solver", {}))
    hp = HierarchicProblem(
        dim=_take(grid, "dim", 1), n_x=_take(grid, "n_x", 31),
        n_t=_take(grid, "n_t", 40), T=_take(grid, "T", 1.0),
        domain=_take(grid, "domain"),
        omega=_take(regions, "omega", (0.3, 0.7)),
        omega1=_take(regions, "omega1", (0.05, 0.2)),
        omega2=_take(regions, "omega2", (0.8, 0.95)),
        od=_take(regions, "Od", (0.25, 0.75)),
        omega_prime=_take(regions, "omega_prime"),
        a11=_take(coeffs, "a11", 0.0), a12=_take(coeffs, "a12", 0.0),
        a21=_take(coeffs, "a21", 0.0), a22=_take(coeffs, "a22", 0.0),
        alphas=_take(funcs, "alpha", (1.0, 1.0)),
        mu=_take(funcs, "mu", "auto"),
        mu_safety=_take(funcs, "mu_safety", 2.0),
        y0=cfg.get("initial"),
        yd1=_take(targets, "yd1"), yd2=_take(targets, "yd2"),
        lam=_take(weights, "lambda", 2.0), s=_take(weights, "s", "auto"),
        g=_take(controls, "g", 0.0), h1=_take(controls, "h1", 0.0),
        h2=_take(controls, "h2", 0.0),
        solver=solver, seed=cfg.get("seed", 0))
    hp.validate()
    return hp


def parse_problem(path) -> ProblemFile:
    """Load, hash, and validate a problem file."""
    raw_bytes = Path(path).read_bytes()
    sha = hashlib.sha256(raw_bytes).hexdigest()
    try:
        cfg = json.loads(raw_bytes.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(
            f"parse error in {path} at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from None
    hp = _problem_from_config(cfg)
    return ProblemFile(problem=hp, raw=cfg, sha256=sha, path=str(path))


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _write_csv(path: Path, columns, rows) -> list:
    """Write a CSV plus its schema file; returns both paths."""
    with open(path, "w") as fh:
        fh.write(",".join(name for name, _ in columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    schema = path.with_suffix(path.suffix + ".schema.json")
    _write_json(schema, {"columns": [{"name": n, "description": d}
                                     for n, d in columns]})
    return [path, schema]


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _write_json(path: Path, obj) -> Path:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _control_csv_rows(profile: ControlProfile):
    grid = profile.grid
    coords = grid.node_coords()
    for k, t in enumerate(grid.times):
        for p in range(grid.n_nodes):
            row = [t, coords[p, 0]]
            if grid.dim == 2:
                row.append(coords[p, 1])
            row.append(profile.values[k, p])
            yield row


def _space_cols(grid):
    cols = [("t", "time level"), ("x", "node coordinate (first axis)")]
    if grid.dim == 2:
        cols.append(("y", "node coordinate (second axis)"))
    return cols


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_validate(disc, pf, out, flags):
    return [], {"hypothesis": disc.hypothesis_report(),
                "mu": list(disc.mus),
                "mu_thresholds": list(disc.mu_thresholds),
                "tau_coercivity": disc.tau_coercivity,
                "s": disc.s, "eta_c0": disc.eta.c0}


def _cmd_simulate(disc, pf, out, flags):
    hp = pf.problem
    g = ControlProfile(disc.eval_levels(hp.g), disc.omega, disc.grid)
    h1 = ControlProfile(disc.eval_levels(hp.h1), disc.omega_i[0], disc.grid)
    h2 = ControlProfile(disc.eval_levels(hp.h2), disc.omega_i[1], disc.grid)
    state = state_with_controls(disc, g, (h1, h2))
    outputs = []
    csv_path = out / "trajectory.csv"
    state_to_csv(state, csv_path)
    _write_json(csv_path.with_suffix(".csv.schema.json"), {
        "columns": [{"name": n, "description": d} for n, d in
                    _space_cols(disc.grid) +
                    [("c1", "first state component"),
                     ("c2", "second state component")]]})
    outputs += [csv_path, csv_path.with_suffix(".csv.schema.json")]
    bin_path = out / "trajectory.bin"
    state_to_binary(state, bin_path)
    outputs.append(bin_path)
    terminal = state.data[disc.grid.n_t]
    return outputs, {"terminal_norm": x_norm_like(disc, terminal)}


def x_norm_like(disc, v):
    return float(np.sqrt(disc.grid.node_weight * np.sum(np.square(v))))


def _cmd_nash(disc, pf, out, flags):
    g = None
    if pf.problem.g not in (0.0, "0", "0.0"):
        g = ControlProfile(disc.eval_levels(pf.problem.g), disc.omega, disc.grid)
    op = solve_nash_operator(disc, g)
    opt, _sol = solve_nash_optimality(disc, g)
    gap_num = gap_den = 0.0
    for i in (0, 1):
        d = op.h_bar[i].values - opt.h_bar[i].values
        gap_num += float(np.sum(d * d))
        gap_den += float(np.sum(opt.h_bar[i].values ** 2))
    route_gap = float(np.sqrt(gap_num / gap_den)) if gap_den > 0 else 0.0
    stat = check_nash_stationarity(disc, g, opt.h_bar)
    outputs = []
    for i in (0, 1):
        cols = _space_cols(disc.grid) + [("h_value", f"follower {i+1} control")]
        outputs += _write_csv(out / f"nash_h{i+1}.csv", cols,
                              _control_csv_rows(opt.h_bar[i]))
    summary = {
        "residuals": {"operator": op.residuals, "optimality": opt.residuals},
        "iterations": {"operator": op.iterations, "optimality": opt.iterations},
        "route_relative_gap": route_gap,
        "stationarity": list(stat),
        "tau_coercivity": disc.tau_coercivity,
        "mu": list(disc.mus),
        "mu_thresholds": list(disc.mu_thresholds),
    }
    outputs.append(_write_json(out / "nash_summary.json", summary))
    return outputs, {"route_relative_gap": route_gap}


def _cmd_control(disc, pf, out, flags):
    ladder = flags.get("epsilon_ladder") or [flags.get("epsilon", 1e-5)]
    report = run_hierarchic_control(disc, ladder)
    outputs = []
    rows = []
    for idx, res in enumerate(report.entries):
        ratio = (res.terminal_norm / report.y_free_norm
                 if report.y_free_norm > 0 else 0.0)
        rows.append([res.epsilon, res.terminal_norm, ratio, res.leader_cost,
                     res.cg_iterations])
        hum = {
            "epsilon": res.epsilon,
            "terminal_norm": res.terminal_norm,
            "terminal_over_free": ratio,
            "leader_cost": res.leader_cost,
            "follower_costs": list(res.follower_costs),
            "cg_iterations": res.cg_iterations,
            "cg_relative_residual": res.cg_relative_residual,
            "duality_residual": res.duality_residual,
            "variational_residual": res.variational_residual,
            "nash_stationarity": list(report.stationarity[idx]),
        }
        outputs.append(_write_json(out / f"hum_{idx:02d}.json", hum))
        cols = _space_cols(disc.grid) + [("g_value", "leader control")]
        outputs += _write_csv(out / f"gbar_{idx:02d}.csv", cols,
                              _control_csv_rows(res.g_bar))
        state_path = out / f"state_{idx:02d}.csv"
        state_to_csv(res.state, state_path)
        _write_json(state_path.with_suffix(".csv.schema.json"), {
            "columns": [{"name": n, "description": d} for n, d in
                        _space_cols(disc.grid) +
                        [("c1", "first controlled state component"),
                         ("c2", "second controlled state component")]]})
        outputs += [state_path, state_path.with_suffix(".csv.schema.json")]
    outputs += _write_csv(
        out / "decay.csv",
        [("epsilon", "penalty parameter"),
         ("terminal_norm", "L2 norm of the controlled terminal state"),
         ("terminal_over_free", "terminal norm over the free terminal norm"),
         ("leader_cost", "0.5 * squared L2(omega x (0,T)) norm of g"),
         ("cg_iterations", "conjugate-gradient iterations")],
        rows)
    summary = {"y_free_norm": report.y_free_norm,
               "hypothesis": report.hypothesis}
    outputs.append(_write_json(out / "control_report.json", summary))
    return outputs, summary


def _cmd_observability(disc, pf, out, flags):
    n_samples = flags.get("samples", 50)
    rep = observability_ratio(disc, n_samples=n_samples)
    outputs = _write_csv(
        out / "observability_samples.csv",
        [("sample", "sample index"), ("ratio", "lhs/rhs for this draw")],
        ([i, r] for i, r in enumerate(rep.sample_ratios)))
    outputs.append(_write_json(out / "observability.json", {
        "sample_max": rep.sample_max,
        "power_estimate": rep.power_estimate,
        "power_iterations": rep.power_iterations,
        "regularization": rep.regularization,
        "n_samples": n_samples}))
    return outputs, {"power_estimate": rep.power_estimate}


def _cmd_carleman(disc, pf, out, flags):
    n_samples = flags.get("samples", 50)
    lambdas = flags.get("lambdas") or [pf.problem.lam]
    svalues = flags.get("svalues") or [disc.s]
    outputs, grid_rows = [], []
    cell = 0
    for lam in lambdas:
        for s in svalues:
            if lam == pf.problem.lam and s == disc.s:
                dcell = disc
            else:
                dcell = prepare(replace(pf.problem, lam=lam, s=s))
            rep = carleman_ratio_check(dcell, n_samples=n_samples)
            cols = [("sample", "sample index"),
                    ("lhs", "sum of the four weighted energies"),
                    ("rhs", "lam^24 weighted observation term"),
                    ("ratio", "lhs / rhs")]
            outputs += _write_csv(
                out / f"carleman_samples_{cell:02d}.csv", cols,
                ([i, sm["lhs"], sm["rhs"], sm["ratio"]]
                 for i, sm in enumerate(rep.samples)))
            outputs.append(_write_json(out / f"carleman_{cell:02d}.json", {
                "lambda": lam, "s": rep.s, "max_ratio": rep.max_ratio,
                "n_unbounded": rep.n_unbounded, "quantiles": rep.quantiles,
                "mu": list(rep.mus), "n_samples": n_samples}))
            grid_rows.append([lam, rep.s, rep.max_ratio, rep.n_unbounded])
            cell += 1
    outputs += _write_csv(
        out / "carleman_grid.csv",
        [("lambda", "weight sharpness parameter"),
         ("s", "weight scale parameter"),
         ("max_ratio", "largest finite sampled ratio"),
         ("n_unbounded", "samples with positive lhs and zero rhs")],
        grid_rows)
    if flags.get("single_equation"):
        rep1 = single_equation_samples(disc, n_samples=min(n_samples, 10))
        outputs.append(_write_json(out / "single_equation.json", rep1))
    return outputs, {"cells": cell}


def _set_dotted(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if isinstance(node, list):
            node = node[int(k)]
        else:
            node = node.setdefault(k, {})
    last = keys[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def _run_sweep_cell(args):
    cfg, command, cell_dir, flags = args
    cfg_path = Path(cell_dir) / "problem.json"
    Path(cell_dir).mkdir(parents=True, exist_ok=True)
    _write_json(cfg_path, cfg)
    error = None
    try:
        pf = parse_problem(cfg_path)
        dispatch(command, pf, dict(flags, out=cell_dir))
    except Exception as exc:  # cell isolation; the cell manifest records it
        error = f"{type(exc).__name__}: {exc}"
    return str(Path(cell_dir) / "manifest.json"), error


def _cmd_sweep(disc, pf, out, flags):
    spec = pf.raw.get("sweep")
    if not spec or "command" not in spec or "parameters" not in spec:
        raise ValidationError(
            "sweep needs a problem-file section "
            '{"sweep": {"command": ..., "parameters": {path: [values]}}}')
    command = spec["command"]
    if command not in COMMANDS or command == "sweep":
        raise ValidationError(f"sweep cannot dispatch command {command!r}")
    names = sorted(spec["parameters"])
    grids = [spec["parameters"][n] for n in names]
    cells = [[]]
    for values in grids:
        cells = [c + [v] for c in cells for v in values]
    jobs = max(1, int(flags.get("jobs", 1)))
    tasks = []
    for idx, combo in enumerate(cells):
        cfg = copy.deepcopy(pf.raw)
        cfg.pop("sweep", None)
        for name, value in zip(names, combo):
            _set_dotted(cfg, name, value)
        tasks.append((cfg, command, str(out / f"cell_{idx:03d}"),
                      {k: v for k, v in flags.items() if k != "out"}))
    outputs, errors = [], []
    if jobs == 1:
        results = [_run_sweep_cell(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_sweep_cell, tasks))
    for path, err in results:
        outputs.append(Path(path))
        if err:
            errors.append(err)
    if errors:
        raise ConvergenceError(f"{len(errors)} sweep cells failed: {errors[0]}")
    return outputs, {"cells": len(cells), "parameters": names}


_HANDLERS = {
    "validate": _cmd_validate,
    "simulate": _cmd_simulate,
    "nash": _cmd_nash,
    "control": _cmd_control,
    "observability": _cmd_observability,
    "carleman": _cmd_carleman,
    "sweep": _cmd_sweep,
}

_NEEDS_OD_OMEGA = {"control", "observability", "carleman"}


def dispatch(command: str, pf: ProblemFile, flags: Optional[dict] = None) -> RunManifest:
    """Run one command and write its manifest; returns the manifest."""
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command!r}; "
                              f"choose from {', '.join(COMMANDS)}")
    flags = dict(flags or {})
    out = Path(flags.get("out") or Path("runs") / command)
    out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    error = None
    outputs: list = []
    extra: dict = {}
    try:
        hp = pf.problem
        if flags.get("seed") is not None:
            hp = replace(hp, seed=int(flags["seed"]))
        disc = prepare(hp, require_od_omega=command in _NEEDS_OD_OMEGA)
        outputs, extra = _HANDLERS[command](disc, pf, out, flags)
    except Exception as exc:  # recorded in the manifest, then re-raised
        error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest = RunManifest(
            command=command, config_sha256=pf.sha256,
            outputs=sorted(str(Path(p)) for p in outputs),
            wall_time_s=time.monotonic() - start,
            versions=_versions(), error=error, extra=_jsonable(extra))
        _write_json(out / "manifest.json", asdict(manifest))
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hierctrl",
        description="Hierarchic control laboratory for coupled fourth-order "
                    "parabolic systems")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--problem", required=True, help="problem JSON file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--epsilon", type=float, default=1e-5)
    parser.add_argument("--epsilon-ladder", default=None,
                        help="comma list of penalty values")
    parser.add_argument("--samples", type=int, default=50)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--lambdas", default=None,
                        help="comma list for the carleman grid")
    parser.add_argument("--svalues", default=None,
                        help="comma list for the carleman grid")
    parser.add_argument("--single-equation", action="store_true",
                        help="also sample the scalar-equation estimate")
    args = parser.parse_args(argv)

    flags = {"out": args.out, "epsilon": args.epsilon,
             "samples": args.samples, "jobs": args.jobs, "seed": args.seed,
             "single_equation": args.single_equation}
    if args.epsilon_ladder:
        flags["epsilon_ladder"] = [float(v) for v in
                                   args.epsilon_ladder.split(",")]
    if args.lambdas:
        flags["lambdas"] = [float(v) for v in args.lambdas.split(",")]
    if args.svalues:
        flags["svalues"] = [float(v) for v in args.svalues.split(",")]

    try:
        pf = parse_problem(args.problem)
        dispatch(args.command, pf, flags)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
