"""Command-line front end.

Each subcommand reads one TOML config (or the JSON manifest of an earlier
run), lets ``--seed``, ``--workers``, ``--quality`` and ``--out`` override
it, writes CSV/JSON artifacts plus ``manifest.json`` into the output
directory, and returns

    0  success
    1  a checked property or criterion failed
    2  configuration error
    3  the fixed-point iteration did not converge
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pmvlab import __version__
from pmvlab.constants import DomainError, derive_params, gm_identity_sweep
from pmvlab.dpp import (
    BracketViolationError,
    DPPProblem,
    DPPSolution,
    MonotonicityError,
    NonConvergenceError,
    poisson_fd_1d,
    radial_solution,
    solve,
    solve_bracketed,
    sweep_operator,
)
from pmvlab.expansion import DEFAULT_LADDER, find_case, run_ladder
from pmvlab.fields import Domain, GridField, read_gridfield_csv, write_gridfield_csv
from pmvlab.game import (
    GameConfig,
    estimate_value,
    quasi_optimal_strategies,
    random_strategy,
    write_transcripts_jsonl,
)
from pmvlab.operators import CSearchConfig, SingularGradientError, operator_reach

log = logging.getLogger("pmvlab")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 1, 2, 3
OUT_ENV = "PMVLAB_OUT"
QUALITIES = ("low", "default", "high")


class ConfigError(DomainError):
    """Invalid or inconsistent configuration."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_REQUIRED = object()

SCHEMA: dict = {
    "": {"seed": 0, "quality": "default", "workers": 0},
    "problem": {
        "p": 3.0, "d": 1, "domain": "box", "lower": [-1.0], "upper": [1.0],
        "center": [0.0], "radius": 1.0, "r_in": 0.5, "f": "1", "g": "0",
        "variant": "overline", "n_coarse": 64, "h": 0.0, "band_margin": 0.01,
    },
    "solve": {"epsilon": 0.1, "tol": 0.0, "max_iter": 100000, "method": "jacobi",
              "bracketed": False},
    "game": {"epsilon": 0.1, "x0": [0.0], "rollouts": 10000, "sandwich_rollouts": 500,
             "max_steps": 1000000, "transcripts": 100, "solution": "inline", "tol": 0.0,
             "value_slack": 0.02, "max_cap_fraction": 1e-3},
    "convergence": {"epsilons": _REQUIRED, "oracle": "radial", "exact": "", "slack": 0.1,
                    "final_max": -1.0, "tol": 0.0, "max_iter": 100000},
    "expand": {"field": "quadratic", "x": [], "operators": ["A", "M", "L"], "epsilons": [],
               "reference_quality": "high"},
    "identities": {"cases": 10000, "grid": 10000, "alpha": -1.0, "rel_tol": 1e-6,
                   "eps_min": 1e-3, "eps_max": 0.99},
}


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, list):
        return isinstance(value, list)
    if isinstance(default, str):
        return isinstance(value, str)
    return True


def resolve_config(raw: dict, tables=("problem",)) -> dict:
    """Fill defaults for the given tables and reject unknown keys or mistyped values."""
    cfg: dict = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in SCHEMA:
                raise ConfigError(f"unknown table [{key}]")
        elif key not in SCHEMA[""]:
            raise ConfigError(f"unknown top-level key {key!r}")
    for table in ("",) + tuple(tables):
        src = raw if table == "" else raw.get(table, {})
        out = {}
        for key, default in SCHEMA[table].items():
            where = f"[{table}].{key}" if table else key
            if key in src:
                value = src[key]
                if default is not _REQUIRED and not _type_ok(default, value):
                    raise ConfigError(f"{where}: expected {type(default).__name__}, "
                                      f"got {value!r}")
                out[key] = float(value) if isinstance(default, float) else copy.deepcopy(value)
            elif default is _REQUIRED:
                raise ConfigError(f"{where} is required")
            else:
                out[key] = copy.deepcopy(default)
        if table:
            unknown = set(src) - set(SCHEMA[table])
            if unknown:
                raise ConfigError(f"unknown key(s) in [{table}]: {sorted(unknown)}")
            cfg[table] = out
        else:
            cfg.update(out)
    if cfg["quality"] not in QUALITIES:
        raise ConfigError(f"quality must be one of {QUALITIES}, got {cfg['quality']!r}")
    return cfg


def load_config(path: Optional[str]) -> dict:
    """Raw config from a TOML file or from the ``config`` entry of a manifest."""
    if path is None:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if p.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict) or "config" not in data:
            raise ConfigError(f"{path}: a JSON config must be a run manifest with a 'config' entry")
        return data["config"]
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_FUNCTIONS = {name: getattr(np, name) for name in (
    "exp", "log", "sin", "cos", "tan", "sinh", "cosh", "tanh", "sqrt", "abs", "sign",
    "minimum", "maximum", "where")}


def expression_function(expr: str, d: int, what: str = "expression") -> Callable:
    """Vectorized function of points ``(N, d)`` from an arithmetic expression.

    The expression may use ``x0 .. x{d-1}``, ``r`` (Euclidean norm), ``pi``
    and the numpy functions in ``_FUNCTIONS``.
    """
    try:
        code = compile(str(expr), f"<{what}>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"{what}: cannot parse {expr!r}: {exc.msg}") from exc
    allowed = set(_FUNCTIONS) | {"pi", "r"} | {f"x{k}" for k in range(d)}
    unknown = set(code.co_names) - allowed
    if unknown:
        raise ConfigError(f"{what}: unknown names {sorted(unknown)} in {expr!r}")

    def fn(x):
        x = np.asarray(x, dtype=float).reshape(-1, d)
        ns = dict(_FUNCTIONS, pi=math.pi, r=np.linalg.norm(x, axis=1))
        ns.update({f"x{k}": x[:, k] for k in range(d)})
        val = eval(code, {"__builtins__": {}}, ns)  # names checked above
        return np.broadcast_to(np.asarray(val, dtype=float), (x.shape[0],)).copy()

    try:
        fn(np.zeros((1, d)))
    except Exception as exc:  # noqa: BLE001 - any evaluation failure is a config error
        raise ConfigError(f"{what}: evaluating {expr!r} failed: {exc}") from exc
    return fn


def constant_of(expr: str, what: str) -> float:
    try:
        return float(expr)
    except ValueError as exc:
        raise ConfigError(f"{what} must be a numeric constant for this oracle, got {expr!r}") from exc


def build_domain(pc: dict, epsilon: float, params) -> Domain:
    d = params.d
    r_out = operator_reach(epsilon, params) + pc["band_margin"]
    kind = pc["domain"]
    if kind == "box":
        lo, hi = pc["lower"], pc["upper"]
        if len(lo) != d or len(hi) != d:
            raise ConfigError(f"[problem].lower/upper need {d} entries")
        return Domain.box(lo, hi, r_out=r_out)
    if len(pc["center"]) != d:
        raise ConfigError(f"[problem].center needs {d} entries")
    if kind == "ball":
        return Domain.ball(pc["center"], pc["radius"], r_out=r_out)
    if kind == "annulus":
        return Domain.annulus(pc["center"], pc["r_in"], pc["radius"], r_out=r_out)
    raise ConfigError(f"[problem].domain must be box, ball or annulus, got {kind!r}")


def build_problem(cfg: dict, epsilon: float) -> DPPProblem:
    pc = cfg["problem"]
    params = derive_params(pc["p"], pc["d"])
    domain = build_domain(pc, epsilon, params)
    f = expression_function(pc["f"], params.d, "[problem].f")
    g = expression_function(pc["g"], params.d, "[problem].g")
    return DPPProblem(domain, f, g, epsilon, params, variant=pc["variant"],
                      csearch=CSearchConfig(n_coarse=pc["n_coarse"]), quality=cfg["quality"],
                      h=pc["h"] if pc["h"] > 0 else None, name=f"eps={epsilon!r}")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    experiment: str
    config: dict
    seed: int
    timings: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    version: str = __version__

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def _write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_identities(cfg: dict, out: Path, manifest: RunManifest) -> int:
    ic = cfg["identities"]
    alpha = None if ic["alpha"] < 0 else ic["alpha"]
    if alpha is not None and not 0.0 < alpha < 1.0:
        raise ConfigError(f"[identities].alpha must lie in the open interval (0, 1), got {alpha}")
    sweep = gm_identity_sweep(ic["cases"], cfg["seed"], ic["grid"], ic["rel_tol"],
                              (ic["eps_min"], ic["eps_max"]), alpha=alpha)
    rows = list(sweep.rows())
    manifest.artifacts.append(str(_write_csv(out / "identities.csv", rows[0], rows[1:]).name))
    bad = sweep.n_violations
    print(f"identities: {ic['cases']} cases, max rel err {float(np.max(sweep.rel_err)):.3e}, "
          f"violations {bad}")
    return EXIT_FAILED if bad else EXIT_OK


def cmd_expand(cfg: dict, out: Path, manifest: RunManifest) -> int:
    pc, ec = cfg["problem"], cfg["expand"]
    params = derive_params(pc["p"], pc["d"])
    case = find_case(params.d, params.p, ec["field"])
    if ec["x"]:
        if len(ec["x"]) != params.d:
            raise ConfigError(f"[expand].x needs {params.d} entries")
        case = type(case)(case.name, case.field, np.asarray(ec["x"], dtype=float), case.note)
    eps = tuple(ec["epsilons"]) or DEFAULT_LADDER
    for op in ec["operators"]:
        if op not in ("A", "M", "L"):
            raise ConfigError(f"[expand].operators: unknown operator {op!r}")
        try:
            rep = run_ladder(op, case, params, eps, cfg["quality"], ec["reference_quality"])
        except SingularGradientError as exc:
            raise ConfigError(f"operator {op} on {case.name!r} at {case.x.tolist()}: {exc}") from exc
        path = rep.write_csv(out / f"expansion_{op}_{case.name}.csv")
        manifest.artifacts.append(path.name)
        print(f"{op} {case.name}: rate {rep.fitted_rate:.3f}, final error "
              f"{float(rep.errors[-1]):.3e}, target {rep.target:.4g}")
    return EXIT_OK


def _solve(problem: DPPProblem, cfg_solve: dict):
    tol = cfg_solve["tol"] if cfg_solve["tol"] > 0 else None
    if cfg_solve.get("bracketed"):
        return solve_bracketed(problem, tol=tol, max_iter=cfg_solve["max_iter"])
    return solve(problem, tol=tol, max_iter=cfg_solve["max_iter"],
                 method=cfg_solve.get("method", "jacobi"))


def _solution_record(sol: DPPSolution) -> dict:
    return {"iterations": sol.iterations, "final_residual": sol.final_residual,
            "contraction_ratio": sol.contraction_ratio, "bracket_gap": sol.bracket_gap,
            "nodes": sol.u.grid.size, "h": sol.u.grid.h}


def cmd_solve(cfg: dict, out: Path, manifest: RunManifest) -> int:
    sc = cfg["solve"]
    problem = build_problem(cfg, sc["epsilon"])
    sol = _solve(problem, sc)
    manifest.timings["solve"] = sol.wall_time
    manifest.artifacts.append(write_gridfield_csv(sol.u, out / "solution.csv").name)
    manifest.artifacts.append(_write_json(out / "solve.json", _solution_record(sol)).name)
    print(f"solve: {sol.iterations} iterations, residual {sol.final_residual:.3e}")
    return EXIT_OK


def cmd_game(cfg: dict, out: Path, manifest: RunManifest) -> int:
    gc = cfg["game"]
    problem = build_problem(cfg, gc["epsilon"])
    if gc["solution"] == "inline":
        t0 = time.perf_counter()
        sol = solve(problem, tol=gc["tol"] if gc["tol"] > 0 else None)
        manifest.timings["solve"] = time.perf_counter() - t0
    else:
        path = Path(gc["solution"])
        if not path.exists():
            raise ConfigError(f"[game].solution: no solution file at {path}; run 'pmvlab solve' "
                              "first or set solution = \"inline\"")
        grid = sweep_operator(problem).grid
        sol = DPPSolution(read_gridfield_csv(path, grid), 0, math.nan, problem=problem)
    x0 = np.asarray(gc["x0"], dtype=float)
    if x0.size != problem.params.d:
        raise ConfigError(f"[game].x0 needs {problem.params.d} entries")
    u0 = float(sol(x0.reshape(1, -1))[0])
    I, II = quasi_optimal_strategies(sol)
    R = random_strategy(problem)
    gconf = GameConfig(problem, max_steps=gc["max_steps"], rng_seed=cfg["seed"])
    workers = cfg["workers"]
    mixes = [("quasi-quasi", I, II, gc["rollouts"]),
             ("quasi-random", I, R, gc["sandwich_rollouts"]),
             ("random-quasi", R, II, gc["sandwich_rollouts"])]
    results = {}
    for name, a, b, n in mixes:
        t0 = time.perf_counter()
        keep = name == "quasi-quasi" and gc["transcripts"] > 0
        est = estimate_value(x0, a, b, n, gconf, workers=workers, keep_transcripts=keep)
        manifest.timings[name] = time.perf_counter() - t0
        results[name] = est
        manifest.artifacts.append(_write_csv(out / f"payoffs_{name}.csv", ["payoff"],
                                             ([v] for v in est.payoffs)).name)
        if keep:
            est.transcripts = est.transcripts[:gc["transcripts"]]
            manifest.artifacts.append(write_transcripts_jsonl(est, out / "transcripts.jsonl").name)
        print(f"game {name}: mean {est.mean:.5f} +- {est.stderr:.5f} "
              f"(cap fraction {est.cap_fraction:.2e})")
    qq, qr, rq = results["quasi-quasi"], results["quasi-random"], results["random-quasi"]
    value_tol = max(3.0 * qq.stderr, gc["value_slack"])
    checks = {
        "value": abs(qq.mean - u0) <= value_tol,
        "cap_fraction": qq.cap_fraction <= gc["max_cap_fraction"],
        # Player I quasi-optimal guarantees at least the value, Player II at most
        "sandwich": (qr.mean + 3.0 * math.hypot(qr.stderr, qq.stderr) >= qq.mean
                     and rq.mean - 3.0 * math.hypot(rq.stderr, qq.stderr) <= qq.mean),
    }
    summary = {"u_eps_x0": u0, "x0": x0.tolist(), "epsilon": gc["epsilon"],
               "value_tolerance": value_tol, "checks": checks,
               "mixes": {k: v.summary() for k, v in results.items()}}
    manifest.artifacts.append(_write_json(out / "summary.json", summary).name)
    return EXIT_OK if all(checks.values()) else EXIT_FAILED


def convergence_oracle(cfg: dict) -> Callable:
    pc, cc = cfg["problem"], cfg["convergence"]
    d, p = pc["d"], pc["p"]
    oracle = cc["oracle"]
    if oracle == "expression":
        if not cc["exact"]:
            raise ConfigError("[convergence].exact is required for oracle = \"expression\"")
        return expression_function(cc["exact"], d, "[convergence].exact")
    if oracle == "radial":
        f0 = constant_of(pc["f"], "[problem].f")
        g0 = constant_of(pc["g"], "[problem].g")
        if pc["domain"] == "ball":
            return radial_solution(p, d, f0, pc["radius"], g0, pc["center"])
        if pc["domain"] == "box" and d == 1:
            lo, hi = pc["lower"][0], pc["upper"][0]
            return radial_solution(p, 1, f0, 0.5 * (hi - lo), g0, [0.5 * (hi + lo)])
        raise ConfigError("the radial oracle needs a ball, or an interval in 1-d")
    if oracle == "poisson-fd":
        if d != 1 or p != 2.0 or pc["domain"] != "box":
            raise ConfigError("the finite-difference oracle covers p = 2 on an interval only")
        f = expression_function(pc["f"], 1, "[problem].f")
        g = expression_function(pc["g"], 1, "[problem].g")
        xs, us = poisson_fd_1d(f, g, pc["lower"][0], pc["upper"][0])
        return lambda x: np.interp(np.asarray(x, dtype=float).reshape(-1), xs, us)
    raise ConfigError(f"[convergence].oracle must be radial, poisson-fd or expression, "
                      f"got {oracle!r}")


def convergence_ladder(cfg: dict, out: Optional[Path] = None, manifest=None) -> list[dict]:
    """Solve along the epsilon ladder and measure the sup-error at interior nodes."""
    cc = cfg["convergence"]
    exact = convergence_oracle(cfg)
    rows = []
    for eps in cc["epsilons"]:
        problem = build_problem(cfg, float(eps))
        sol = _solve(problem, {"tol": cc["tol"], "max_iter": cc["max_iter"]})
        op = sweep_operator(problem)
        nodes = op.nodes[op.interior]
        err = float(np.max(np.abs(sol.u.values[op.interior] - exact(nodes))))
        rows.append({"epsilon": float(eps), "h": op.grid.h, "iterations": sol.iterations,
                     "sup_error": err})
        if out is not None:
            name = write_gridfield_csv(sol.u, out / f"solution_eps{eps!r}.csv").name
            if manifest is not None:
                manifest.artifacts.append(name)
                manifest.timings[f"solve eps={eps!r}"] = sol.wall_time
        print(f"eps {eps}: {sol.iterations} iterations, sup error {err:.5f}")
    return rows


def ladder_ok(errors, slack: float) -> bool:
    """Nonincreasing up to ``slack`` relative growth per step."""
    return all(b <= a * (1.0 + slack) for a, b in zip(errors, errors[1:]))


def cmd_convergence(cfg: dict, out: Path, manifest: RunManifest) -> int:
    cc = cfg["convergence"]
    if not isinstance(cc["epsilons"], list) or not cc["epsilons"]:
        raise ConfigError("[convergence].epsilons must be a nonempty list")
    if any(not 0.0 < float(e) < 1.0 for e in cc["epsilons"]):
        raise ConfigError("[convergence].epsilons must lie in (0, 1)")
    rows = convergence_ladder(cfg, out, manifest)
    manifest.artifacts.append(_write_csv(out / "convergence.csv",
                                         ["epsilon", "h", "iterations", "sup_error"],
                                         ([r["epsilon"], r["h"], r["iterations"], r["sup_error"]]
                                          for r in rows)).name)
    errors = [r["sup_error"] for r in rows]
    ok = ladder_ok(errors, cc["slack"])
    if cc["final_max"] >= 0:
        ok = ok and errors[-1] <= cc["final_max"]
    return EXIT_OK if ok else EXIT_FAILED


COMMANDS = {
    "identities": (cmd_identities, ("identities",)),
    "expand": (cmd_expand, ("problem", "expand")),
    "solve": (cmd_solve, ("problem", "solve")),
    "game": (cmd_game, ("problem", "game")),
    "convergence": (cmd_convergence, ("problem", "convergence")),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmvlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pmvlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML config or JSON manifest of an earlier run")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--workers", type=int, help="worker threads (default: CPU count)")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./pmvlab-out)")
        sp.add_argument("--quality", choices=QUALITIES, help="ball sampling quality")
        sp.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func, tables = COMMANDS[args.command]
    try:
        raw = load_config(args.config)
        for key in ("seed", "workers", "quality"):
            value = getattr(args, key)
            if value is not None:
                raw[key] = value
        cfg = resolve_config(raw, tables)
        if cfg["seed"] < 0:
            raise ConfigError("seed must be nonnegative")
        if cfg["workers"] <= 0:
            cfg["workers"] = os.cpu_count() or 1
        out = Path(args.out or os.environ.get(OUT_ENV) or "pmvlab-out")
        out.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(args.command, cfg, cfg["seed"])
        t0 = time.perf_counter()
        code = func(cfg, out, manifest)
        manifest.timings["total"] = time.perf_counter() - t0
        manifest.write(out)
        return code
    except (ConfigError, DomainError) as exc:
        print(f"pmvlab {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"pmvlab {args.command}: no convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (MonotonicityError, BracketViolationError) as exc:
        print(f"pmvlab {args.command}: check failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
