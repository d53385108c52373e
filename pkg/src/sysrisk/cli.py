"""Command-line entry point: ``sysrisk gen | solve | compare``.

Exit codes: 0 converged / success, 2 not converged, 3 invalid input,
4 infeasible or unbounded.  Parameters come from an optional JSON config
(``--config``) overridden by flags; environment variables are never read.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import disaster as dis
from .lp import LPInfeasible, LPUnbounded
from .model import SCHEMA as PROBLEM_SCHEMA
from .model import ModelError, TwoStageSystemProblem, build_extended, homogenize
from .solver.adal import SolverError, SolverParams, run
from .solver.centralized import solve_centralized

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3, 4
MODES = ("expectation", "semideviation", "linear-scalarization")
SOLUTION_SCHEMA = "sysrisk/solution@1"


class InputError(ValueError):
    """A violated precondition of the command line or the config file."""


@dataclass
class RunConfig:
    command: str = "solve"
    instance: Optional[str] = None
    seed: int = 0
    scenarios: int = 10
    nu1: float = 20.0
    nu2: float = 2.0
    aggregation: str = "semideviation"
    method: str = "distributed"
    kappa: float = 0.3
    tau: Optional[float] = None
    tol: float = 1e-5
    max_iter: int = 20000
    cut_period: int = 25
    workers: int = 1
    out: str = "out"

    def check(self) -> None:
        if self.command == "gen" and self.scenarios < 1:
            raise InputError(f"scenarios (N) must be at least 1, got {self.scenarios}")
        if self.aggregation not in MODES:
            raise InputError(f"aggregation must be one of {MODES}, got {self.aggregation!r}")
        if self.method not in ("distributed", "centralized"):
            raise InputError(f"method must be 'distributed' or 'centralized', got {self.method!r}")
        if not self.kappa > 0:
            raise InputError(f"penalty kappa must be positive, got {self.kappa}")
        if self.tau is not None and not self.tau > 0:
            raise InputError(f"step tau must be positive, got {self.tau}")
        if not self.tol > 0 or self.max_iter < 1 or self.cut_period < 1 or self.workers < 1:
            raise InputError("tol, max-iter, cut-period and workers must be positive")
        if self.command != "gen" and self.instance is None:
            raise InputError("an instance file is required")

    def check_step(self, m: int) -> None:
        """The step size bound ``0 < tau < 1/m`` needs the agent count."""
        if self.tau is not None and not self.tau < 1.0 / m:
            raise InputError(f"step tau={self.tau} violates tau < 1/m = {1.0 / m:.6g} for m={m} agents")

    def solver_params(self) -> SolverParams:
        return SolverParams(kappa=self.kappa, tau=self.tau, tol=self.tol, max_iter=self.max_iter,
                            cut_period=self.cut_period, workers=self.workers)


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def build_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(raw, dict):
            raise InputError("config must be a JSON object")
        unknown = set(k.replace("-", "_") for k in raw) - _FIELDS
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        values.update({k.replace("-", "_"): v for k, v in raw.items()})
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    values["command"] = args.command
    cfg = RunConfig(**values)
    cfg.check()
    return cfg


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sysrisk", description="Systemic-risk two-stage models and solvers.")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default values for any flag")
    common.add_argument("--out", help="output directory (gen: file or directory)")
    common.add_argument("--seed", type=int)
    common.add_argument("--scenarios", type=int, help="number of scenarios N")
    solve = argparse.ArgumentParser(add_help=False)
    solve.add_argument("instance", nargs="?", help="disaster instance or two-stage problem file")
    solve.add_argument("--aggregation", help=f"one of {', '.join(MODES)}")
    solve.add_argument("--method", help="distributed (default) or centralized")
    solve.add_argument("--kappa", type=float, help="augmented Lagrangian penalty")
    solve.add_argument("--tau", type=float, help="primal step, 0 < tau < 1/m (default 0.9/m)")
    solve.add_argument("--tol", type=float)
    solve.add_argument("--max-iter", dest="max_iter", type=int)
    solve.add_argument("--cut-period", dest="cut_period", type=int)
    solve.add_argument("--workers", type=int)

    g = sub.add_parser("gen", parents=[common], help="generate a seeded disaster instance")
    g.add_argument("--nu1", type=float, help="demand scale nu_1")
    g.add_argument("--nu2", type=float, help="demand decay nu_2")
    sub.add_parser("solve", parents=[common, solve], help="solve an instance")
    sub.add_parser("compare", parents=[common, solve], help="compare aggregation modes on an instance")
    return ap


# --- io helpers ---------------------------------------------------------------------


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"output directory {out} is not writable: {exc}") from exc
    return out


def _load(path: str):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read instance {path}: {exc}") from exc
    schema = raw.get("schema") if isinstance(raw, dict) else None
    try:
        if schema == dis.INSTANCE_SCHEMA:
            return dis.DisasterInstance.from_dict(raw)
        if schema == PROBLEM_SCHEMA:
            return TwoStageSystemProblem.from_dict(raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed instance {path}: {exc}") from exc
    raise InputError(f"unknown schema {schema!r} in {path}; expected {dis.INSTANCE_SCHEMA!r} "
                     f"or {PROBLEM_SCHEMA!r}")


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


# --- solving ------------------------------------------------------------------------


@dataclass
class Outcome:
    mode: str
    objective: float
    converged: bool
    iterations: int
    residuals: dict
    theta: np.ndarray
    x: np.ndarray
    disaster: Optional[dis.DisasterSolution] = None
    trace: object = None


def _solve_problem(problem: TwoStageSystemProblem, cfg: RunConfig, mode: str):
    """``(Outcome, distributed Solution or None)``."""
    if cfg.method == "centralized":
        c = solve_centralized(problem)
        return Outcome(mode, c.objective, True, 0, {}, c.theta, c.x), None
    cfg.check_step(problem.m)
    ext = build_extended(homogenize(problem))
    sol = run(ext, cfg.solver_params())
    n1 = problem.n1
    return Outcome(mode, sol.objective, sol.converged, sol.iterations, dict(sol.residuals),
                   sol.theta, sol.x[:, :n1], trace=sol.trace), sol


def _solve_disaster(inst: dis.DisasterInstance, cfg: RunConfig, mode: str) -> Outcome:
    if mode == "linear-scalarization":
        d = dis.solve_linear_scalarization(inst)
        return Outcome(mode, d.objective, True, 0, {}, d.individual_risks(inst), d.r[:, None], d)
    if cfg.method == "centralized":
        d = dis.solve_direct(inst, mode)
        return Outcome(mode, d.objective, True, 0, {}, d.theta, d.r[:, None], d)
    out, sol = _solve_problem(dis.to_two_stage(inst, mode), cfg, mode)
    if sol is None:
        return out
    out.disaster = dis.from_distributed(inst, sol, mode)
    out.x = out.disaster.r[:, None]
    return out


def _solve(target, cfg: RunConfig, mode: str) -> Outcome:
    if isinstance(target, dis.DisasterInstance):
        return _solve_disaster(target, cfg, mode)
    if mode == "linear-scalarization":
        raise InputError("aggregation 'linear-scalarization' needs a disaster instance")
    return _solve_problem(target, cfg, mode)[0]


def _solution_dict(o: Outcome, cfg: RunConfig) -> dict:
    d = {
        "schema": SOLUTION_SCHEMA,
        "method": cfg.method if o.mode != "linear-scalarization" else "centralized",
        "aggregation": o.mode,
        "objective": float(o.objective),
        "converged": bool(o.converged),
        "iterations": int(o.iterations),
        "residuals": {k: float(v) for k, v in o.residuals.items()},
        "theta": _floats(o.theta),
        "x": _floats(o.x),
    }
    if o.disaster is not None:
        d["allocation"] = _floats(o.disaster.r)
        d["flows"] = _floats(o.disaster.flows)
    return d


def _summary(o: Outcome) -> str:
    lines = [
        f"aggregation  {o.mode}",
        f"objective    {o.objective:.10g}",
        f"converged    {o.converged}",
        f"iterations   {o.iterations}",
    ]
    lines += [f"residual     {k} {v:.3e}" for k, v in sorted(o.residuals.items())]
    return "\n".join(lines) + "\n"


# --- commands -----------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> int:
    inst = dis.generate_instance(cfg.seed, N=cfg.scenarios, nu1=cfg.nu1, nu2=cfg.nu2)
    out = Path(cfg.out)
    path = out / f"disaster_N{cfg.scenarios}_seed{cfg.seed}.json" if out.suffix != ".json" else out
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        inst.save(path)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc}") from exc
    print(f"seed={cfg.seed} N={cfg.scenarios} demand={_digest(inst.demand)} -> {path}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig) -> int:
    target = _load(cfg.instance)
    out = _out_dir(cfg)
    o = _solve(target, cfg, cfg.aggregation)
    _write(out / "solution.json", json.dumps(_solution_dict(o, cfg), indent=1) + "\n")
    _write(out / "summary.txt", _summary(o))
    if o.trace is not None:
        o.trace.to_csv(out / "trace.csv")
    sys.stdout.write(_summary(o))
    return EXIT_OK if o.converged else EXIT_NOT_CONVERGED


def cmd_compare(cfg: RunConfig) -> int:
    target = _load(cfg.instance)
    if not isinstance(target, dis.DisasterInstance):
        raise InputError("compare needs a disaster instance")
    out = _out_dir(cfg)
    keys = {"expectation": "expectation", "semideviation": "semideviation", "linear-scalarization": "linear"}
    sols, outcomes = {}, {}
    for mode in MODES:
        o = _solve(target, cfg, mode)
        outcomes[mode] = o
        sols[keys[mode]] = o.disaster
    rep = dis.report(sols, target)
    spread_lines = ["aggregation,spread,converged"]
    for mode, o in outcomes.items():
        risks = o.disaster.individual_risks(target)
        spread_lines.append(f"{mode},{risks.max() - risks.min():.6f},{o.converged}")
    _write(out / "risk.csv", rep.risk_csv())
    _write(out / "allocation.csv", rep.allocation_csv())
    _write(out / "spread.csv", "\n".join(spread_lines) + "\n")
    _write(out / "report.txt", rep.text() + "\n")
    sys.stdout.write(rep.text() + "\n\n" + "\n".join(spread_lines) + "\n")
    return EXIT_OK if all(o.converged for o in outcomes.values()) else EXIT_NOT_CONVERGED


COMMANDS = {"gen": cmd_gen, "solve": cmd_solve, "compare": cmd_compare}


def main(argv=None) -> int:
    ap = _parser()
    args = ap.parse_args(argv)
    try:
        cfg = build_config(args)
        if cfg.command != "gen" and cfg.tau is not None:
            # disaster instances fix m up front, so the step bound is checked before any work
            target = _load(cfg.instance)
            cfg.check_step(target.m)
        return COMMANDS[cfg.command](cfg)
    except (InputError, SolverError, ModelError, dis.DisasterError) as exc:
        print(f"sysrisk: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (LPInfeasible, LPUnbounded) as exc:
        print(f"sysrisk: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
