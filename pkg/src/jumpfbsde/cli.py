"""Command-line driver: config ingestion, experiment runs and report files.

Config files are TOML. Recognised sections and keys::

    [grid]          T, steps
    [markspace]     marks, weights            (only with a linear coefficient table)
    [coefficients]  builtin, params = {...}   or  x0 plus the tables below
    [coefficients.b|sigma|f|g]  x, y, z, zt, const, u, u2   (scalar or per-mark list)
    [coefficients.phi]          slope, const, curvature
    [controls]      kind ("box" | "finite"), lower, upper, values,
                    candidate ("oracle" | "default" | number), shift
    [budget]        L1, L2, L3, L4
    [run]           paths, seed, threads
    [regression]    degree, ridge, z_mark_mode, winsor, implicit_inner_iters, implicit_tol
    [picard]        tol, max_iter
    [spike]         t_bar, epsilon, replacement (number | "oracle")
    [mp]            tol, n_times, n_paths, offsets, U_grid
    [order]         selector, beta, epsilons, band
    [expansion]     epsilons
    [output]        dir, max_paths

Exit codes: 0 pass, 1 error, 2 acceptance violation or non-convergence,
3 singular K-algebra or shift fixed point.
"""

from __future__ import annotations

import argparse
import copy
import json
import re
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import maxprinciple as mp
from .adjoint import (AdjointBoundError, KAlgebraSingularity, solve_first_order_adjoint,
                      solve_second_order_adjoint, write_adjoint_csv)
from .fbsolve import ContractionError, DivergenceError, evaluate_cost, picard_solve, write_solution_csv
from .markspace import MarkSpace
from .model import (Coefficients, ControlSet, LipschitzBudget, Problem, affine, builtin_problem,
                    list_problems, quadratic_terminal, validate_problem)
from .noise import TimeGrid, generate_noise
from .regression import RegressionConfig

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION, EXIT_SINGULAR = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


SCHEMA = {
    "grid": {"T", "steps"},
    "markspace": {"marks", "weights"},
    "coefficients": {"builtin", "params", "x0", "b", "sigma", "f", "g", "phi"},
    "controls": {"kind", "lower", "upper", "values", "candidate", "shift"},
    "budget": {"L1", "L2", "L3", "L4"},
    "run": {"paths", "seed", "threads"},
    "regression": {"degree", "ridge", "z_mark_mode", "winsor", "implicit_inner_iters",
                   "implicit_tol"},
    "picard": {"tol", "max_iter"},
    "spike": {"t_bar", "epsilon", "replacement"},
    "mp": {"tol", "n_times", "n_paths", "offsets", "U_grid"},
    "order": {"selector", "beta", "epsilons", "band"},
    "expansion": {"epsilons"},
    "output": {"dir", "max_paths"},
}
LINEAR_KEYS = {"x", "y", "z", "zt", "const", "u", "u2"}
TERMINAL_KEYS = {"slope", "const", "curvature"}

DEFAULTS = {
    "grid": {"steps": 400},
    "controls": {"candidate": "default", "shift": 0.0},
    "run": {"paths": 10000, "seed": 0, "threads": 1},
    "regression": {},
    "picard": {"tol": 1e-6, "max_iter": 30},
    "spike": {"t_bar": 0.4, "epsilon": 0.1, "replacement": "oracle"},
    "mp": {"tol": 1e-2, "n_times": 20, "n_paths": 200,
           "offsets": np.linspace(-2.0, 2.0, 41).round(12).tolist()},
    "order": {"selector": "forward_gap", "beta": 2.0,
              "epsilons": [0.2, 0.1, 0.05, 0.025, 0.0125]},
    "expansion": {"epsilons": [0.2, 0.1, 0.05, 0.025, 0.0125]},
    "output": {"dir": "out", "max_paths": 1000},
}


# ------------------------------------------------------------------ config

def _key_line(text: str, section: str, key: str):
    """Line number of ``key`` inside ``[section]`` in the raw TOML, if found."""
    current = None
    for i, line in enumerate(text.splitlines(), start=1):
        head = re.match(r"^\s*\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            if current == section and key is None:
                return i
            continue
        if current == section and re.match(rf"^\s*{re.escape(key)}\s*=", line or ""):
            return i
    return None


def _check_keys(cfg: dict, text: str = "") -> None:
    def fail(section, key, msg):
        line = _key_line(text, section, key) if text else None
        where = f"line {line}: " if line else ""
        raise ConfigError(f"{where}{msg}")

    for section, body in cfg.items():
        if section not in SCHEMA:
            fail(section, None, f"unknown section [{section}]")
        if not isinstance(body, dict):
            fail(section, None, f"[{section}] must be a table")
        for key in body:
            if key not in SCHEMA[section]:
                fail(section, key, f"unknown key {key!r} in [{section}]")
    coefs = cfg.get("coefficients", {})
    for name in ("b", "sigma", "f", "g", "phi"):
        if name in coefs:
            allowed = TERMINAL_KEYS if name == "phi" else LINEAR_KEYS - ({"z"} if name == "f" else set())
            for key in coefs[name]:
                if key not in allowed:
                    fail(f"coefficients.{name}", key,
                         f"unknown key {key!r} in [coefficients.{name}]")


def load_config(path) -> dict:
    """Read and key-check a TOML config; parse errors carry line numbers."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        cfg = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    _check_keys(cfg, text)
    return cfg


def resolve_config(cfg: dict, args) -> dict:
    """Merge defaults, the file and command-line overrides."""
    out = copy.deepcopy(DEFAULTS)
    for section, body in cfg.items():
        out.setdefault(section, {}).update(copy.deepcopy(body))
    if getattr(args, "problem", None):
        out["coefficients"] = {"builtin": args.problem, "params": {}}
    for flag, section, key in (("seed", "run", "seed"), ("paths", "run", "paths"),
                               ("threads", "run", "threads"), ("steps", "grid", "steps"),
                               ("out", "output", "dir")):
        val = getattr(args, flag, None)
        if val is not None:
            out[section][key] = val
    _check_keys(out)
    if "coefficients" not in out:
        raise ConfigError("no problem given: use --problem NAME or a [coefficients] section")
    if int(out["run"]["paths"]) < 2 or int(out["grid"]["steps"]) < 1:
        raise ConfigError("need at least 2 paths and 1 step")
    return out


def _per_mark(value, marks):
    if isinstance(value, (list, tuple)):
        vals = np.asarray(value, dtype=float)
        if vals.size != len(marks):
            raise ConfigError("per-mark coefficient lists must have one entry per mark")
        m = np.asarray(marks, dtype=float)
        return lambda e: vals[np.searchsorted(m, e)]
    return float(value)


def _linear_coefficient(table: dict, marks):
    a = float(table.get("u", 0.0))
    a2 = float(table.get("u2", 0.0))
    return affine(*(_per_mark(table.get(k, 0.0), marks) for k in ("x", "y", "z", "zt", "const")),
                  control=lambda u, e: a * u + a2 * u * u)


def build_problem(cfg: dict) -> Problem:
    coefs = cfg["coefficients"]
    if "builtin" in coefs:
        extra = set(coefs) - {"builtin", "params"}
        if extra or "markspace" in cfg:
            raise ConfigError("a builtin problem takes only 'params'; drop " +
                              ", ".join(sorted(extra | ({"[markspace]"} if "markspace" in cfg else set()))))
        params = dict(coefs.get("params", {}))
        if "T" in cfg["grid"]:
            params["T"] = cfg["grid"]["T"]
        try:
            problem = builtin_problem(coefs["builtin"], **params)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {coefs['builtin']!r}: {exc}") from exc
    else:
        ms_cfg = cfg.get("markspace", {"marks": [1.0], "weights": [1.0]})
        ms = MarkSpace(tuple(ms_cfg["marks"]), tuple(ms_cfg["weights"]))
        tables = {name: _linear_coefficient(coefs.get(name, {}), ms.marks)
                  for name in ("b", "sigma", "f", "g")}
        phi = coefs.get("phi", {})
        c = Coefficients(tables["b"], tables["sigma"], tables["f"], tables["g"],
                         quadratic_terminal(**{k: float(v) for k, v in phi.items()}))
        problem = Problem("linear", float(coefs.get("x0", 1.0)), float(cfg["grid"].get("T", 1.0)),
                          c, ms, ControlSet.box(-1.0, 1.0))
    ctl = cfg["controls"]
    kind = ctl.get("kind")
    controls = problem.controls
    if kind == "box":
        controls = ControlSet.box(float(ctl.get("lower", -np.inf)), float(ctl.get("upper", np.inf)))
    elif kind == "finite":
        controls = ControlSet.finite(ctl["values"])
    elif kind is not None:
        raise ConfigError(f"controls.kind must be 'box' or 'finite', got {kind!r}")
    budget = problem.budget
    if "budget" in cfg:
        budget = LipschitzBudget(**{k: float(v) for k, v in cfg["budget"].items()})
    if controls is not problem.controls or budget is not problem.budget:
        problem = Problem(problem.name, problem.x0, problem.T, problem.coefficients,
                          problem.markspace, controls, budget, problem.params, problem.oracle,
                          problem.default_control)
    return problem


def candidate_control(problem: Problem, cfg: dict, grid: TimeGrid) -> np.ndarray:
    ctl = cfg["controls"]
    return problem.control_path(grid.knots, ctl.get("candidate", "default"),
                                float(ctl.get("shift", 0.0)))


def spike_config(problem: Problem, cfg: dict) -> mp.SpikeConfig:
    sp = cfg["spike"]
    rep = sp.get("replacement", "oracle")
    t_bar = float(sp["t_bar"])
    if rep == "oracle":
        if problem.oracle.control is None:
            raise ConfigError("spike.replacement = 'oracle' needs a problem with an oracle control")
        rep = float(problem.oracle.control(t_bar))
    return mp.SpikeConfig(t_bar, float(sp.get("epsilon", 0.1)), float(rep))


class Run:
    """Everything a subcommand needs, built once from the resolved config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.problem = build_problem(cfg)
        self.grid = TimeGrid(self.problem.T, int(cfg["grid"]["steps"]))
        run = cfg["run"]
        self.noise = generate_noise(self.grid, self.problem.markspace, int(run["paths"]),
                                    int(run["seed"]), threads=int(run["threads"]))
        self.reg = RegressionConfig(**cfg["regression"])
        self.tol = float(cfg["picard"]["tol"])
        self.max_iter = int(cfg["picard"]["max_iter"])
        self.out = Path(cfg["output"]["dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.max_paths = cfg["output"].get("max_paths")
        self.control = candidate_control(self.problem, cfg, self.grid)

    def solve(self, control=None):
        return picard_solve(self.problem, self.control if control is None else control,
                            self.noise, self.reg, self.tol, self.max_iter)

    def report(self, name: str, body: dict) -> Path:
        doc = {"command": name, "config": _jsonable(self.cfg),
               "noise_hash": self.noise.params_hash(), **_jsonable(body)}
        path = self.out / f"{name}_report.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- commands

def cmd_solve(cfg: dict) -> int:
    run = Run(cfg)
    sol = run.solve()
    write_solution_csv(sol, run.grid, run.out / "solution.csv", run.max_paths)
    y0, se = evaluate_cost(sol, override=True)
    run.report("solve", {"cost": y0, "se": se, "picard": sol.picard.to_dict()})
    _say(f"cost {y0:.10g} +/- {se:.3g}  picard iterations {sol.picard.iterations} "
         f"converged {sol.converged}")
    _say(f"lipschitz budget C0={run.problem.budget.C0:.3g}; observed ratios "
         + ", ".join(f"{r:.3g}" for r in sol.picard.ratios))
    return EXIT_OK if sol.converged else EXIT_VIOLATION


def _write_guard_log(path: Path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("t,path,mark,guard_name,value\n")
        for t, p, m, name, v in rows:
            fh.write(f"{t:.17g},{p},{m},{name},{v:.17g}\n")


def cmd_adjoint(cfg: dict) -> int:
    run = Run(cfg)
    sol = run.solve()
    try:
        fo = solve_first_order_adjoint(run.problem, sol, run.noise, run.reg)
        so = solve_second_order_adjoint(run.problem, sol, fo, run.noise, run.reg)
    except KAlgebraSingularity as exc:
        _write_guard_log(run.out / "guards.csv", exc.violations)
        run.report("adjoint", {"error": str(exc), "guard": exc.guard,
                               "violations": len(exc.violations)})
        _say(f"singular K-algebra: {exc}")
        return EXIT_SINGULAR
    _write_guard_log(run.out / "guards.csv", [])
    write_adjoint_csv(fo, so, run.grid.knots, run.out / "adjoint.csv", run.max_paths)
    body = {"max_abs_p": fo.max_abs_p, "bounded": fo.bounded, "notes": fo.notes,
            "p0": float(fo.p[0].mean()), "P0": float(so.P[0].mean()),
            "picard": sol.picard.to_dict()}
    if run.problem.oracle.p is not None:
        body["max_p_oracle_error"] = float(np.max(np.abs(
            fo.p.mean(axis=1) - run.problem.oracle.p(run.grid.knots))))
    run.report("adjoint", body)
    _say(f"p(0) = {body['p0']:.6g}, P(0) = {body['P0']:.6g}, max |p| = {fo.max_abs_p:.6g}")
    return EXIT_OK


def _adjoints(run: Run):
    sol = run.solve()
    fo = solve_first_order_adjoint(run.problem, sol, run.noise, run.reg)
    so = solve_second_order_adjoint(run.problem, sol, fo, run.noise, run.reg)
    return sol, fo, so


def cmd_verify_mp(cfg: dict) -> int:
    run = Run(cfg)
    sol, fo, so = _adjoints(run)
    m = cfg["mp"]
    grid_u = m.get("U_grid")
    rep = mp.verify_mp(run.problem, sol, fo, so, run.noise, U_grid=grid_u,
                       offsets=None if grid_u is not None else m["offsets"],
                       n_times=int(m["n_times"]), n_paths=int(m["n_paths"]), tol=float(m["tol"]))
    run.report("verify_mp", rep.to_dict())
    ok = rep.violation_fraction == 0
    _say(f"min gap {rep.min_gap:.6g} at {rep.argmin}; violation fraction "
         f"{rep.violation_fraction:.4g} -> {'PASS' if ok else 'VIOLATED'}")
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_spike_order(cfg: dict) -> int:
    run = Run(cfg)
    o = cfg["order"]
    selector = o["selector"]
    base = run.solve()
    fit = mp.order_experiment(run.problem, base.control, spike_config(run.problem, cfg),
                              run.noise, o["epsilons"], selector, float(o["beta"]), run.reg,
                              run.tol, run.max_iter, baseline=base)
    mp.write_order_csv(fit, run.out / "order.csv")
    lo, hi = o.get("band", [0.85 * fit.expected_slope, 1.15 * fit.expected_slope])
    body = fit.to_dict()
    body["band"] = [lo, hi]
    if fit.inconclusive:
        run.report("spike_order", body)
        _say("notice: statistic at the Monte Carlo noise floor; slope inconclusive")
        return EXIT_OK
    ok = lo <= fit.slope <= hi
    run.report("spike_order", body)
    _say(f"{selector} slope {fit.slope:.4f} (R^2 {fit.r2:.4f}) band [{lo:.3g}, {hi:.3g}] -> "
         f"{'PASS' if ok else 'VIOLATED'}")
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_expansion(cfg: dict) -> int:
    run = Run(cfg)
    rep = mp.expansion_check(run.problem, run.control, spike_config(run.problem, cfg), run.noise,
                             cfg["expansion"]["epsilons"], run.reg, run.tol, run.max_iter)
    rows = np.column_stack([rep.epsilons, rep.gaps, rep.gap_ses, rep.residuals])
    np.savetxt(run.out / "expansion.csv", rows, fmt="%.17g", delimiter=",",
               header="epsilon,gap,se,residual", comments="")
    run.report("expansion", rep.to_dict())
    _say(f"G = {rep.G:.6g}; residuals " + ", ".join(f"{r:.3g}" for r in rep.residuals)
         + f"; threshold {rep.threshold:.3g} -> {'PASS' if rep.passed else 'VIOLATED'}")
    return EXIT_OK if rep.passed else EXIT_VIOLATION


def cmd_validate(cfg: dict) -> int:
    problem = build_problem(cfg)
    rep = validate_problem(problem)
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "validate_report.json").write_text(
        json.dumps({"command": "validate", "config": _jsonable(cfg), **_jsonable(rep.to_dict())},
                   indent=2, sort_keys=True) + "\n")
    _say(f"{problem.name}: {'valid' if rep.passed else 'INVALID'}")
    for f in rep.failures:
        _say(f"  {f}")
    return EXIT_OK if rep.passed else EXIT_VIOLATION


COMMANDS = {
    "solve": cmd_solve,
    "adjoint": cmd_adjoint,
    "verify-mp": cmd_verify_mp,
    "spike-order": cmd_spike_order,
    "expansion": cmd_expansion,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jumpfbsde",
                                     description="Coupled FBSDEs with jumps and maximum-principle checks")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("list-problems", help="print the builtin problem names")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML config file")
        p.add_argument("--problem", help="builtin problem name (replaces [coefficients])")
        p.add_argument("--seed", type=int)
        p.add_argument("--paths", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--out", type=str)
        p.add_argument("--threads", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "list-problems":
        for name in list_problems():
            print(name)
        return EXIT_OK
    try:
        raw = load_config(args.config) if args.config else {}
        cfg = resolve_config(raw, args)
        return COMMANDS[args.command](cfg)
    except (KAlgebraSingularity, mp.FixedPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except (ContractionError, DivergenceError, AdjointBoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (ConfigError, KeyError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
