"""Command-line entry point.

Exit codes::

    0  success
    2  usage error (bad flags)
    3  parse failure (XDL, scene, robot or plan file)
    4  precondition failure (hardware or reagent missing from the scene)
    5  planning failure
    6  refinement failure during execution
    7  experiment aborted (repeat condition never met)
    8  execution failure (pour, scene or analysis error)
    9  goals not satisfied after execution
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path as FsPath

from labtamp.bench import cplan_csv, pour_csv, run_cplan_bench, run_pour_bench
from labtamp.cplanner import PlanningFailure
from labtamp.execute import ExecutionConfig, ExecutionError, RefinementFailure, execute_plan
from labtamp.experiments import AnalysisError, run_recrystallization, run_solubility
from labtamp.kinematics import load_model, panda7, panda8
from labtamp.perception import PerceptionError
from labtamp.scene import SceneError, load_scene
from labtamp.skills import PourError
from labtamp.taskplan import ExperimentAborted, GoalPlanningError, Plan, PreconditionError, StreamEnv, run_alg1
from labtamp.xdl import XdlError, load_xdl

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_PRECONDITION = 4
EXIT_PLANNING = 5
EXIT_REFINEMENT = 6
EXIT_ABORTED = 7
EXIT_EXECUTION = 8
EXIT_UNSATISFIED = 9


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def out_dir(args) -> FsPath:
    d = FsPath(os.environ.get("LABTAMP_OUT") or args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def robot(name: str):
    if name in ("panda8", "8"):
        return panda8()
    if name in ("panda7", "7"):
        return panda7()
    try:
        return load_model(name)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot load robot model {name!r}: {exc}", EXIT_PARSE) from None


def _inputs(args):
    try:
        w = load_scene(args.scene)
    except SceneError as exc:
        raise CliError(f"scene: {exc}", EXIT_PARSE) from None
    try:
        prog = load_xdl(args.xdl) if getattr(args, "xdl", None) else None
    except XdlError as exc:
        raise CliError(f"xdl [{exc.code}]: {exc}", EXIT_PARSE) from None
    return w, prog


def _exec_cfg(args) -> ExecutionConfig:
    return ExecutionConfig(noise_m=args.noise)


def cmd_plan(args) -> int:
    w, prog = _inputs(args)
    model = robot(args.robot)
    plan = run_alg1(prog, w, StreamEnv(model), seed=args.seed)
    out = out_dir(args)
    plan.to_json(out, model)
    (out / "plan.txt").write_text(plan.describe() + "\n", encoding="utf-8")
    print(plan.describe())
    print(f"{len(plan)} actions written to {out / 'plan.json'}")
    return EXIT_OK


def cmd_execute(args) -> int:
    w, _ = _inputs(args)
    model = robot(args.robot)
    try:
        plan = Plan.from_json(args.plan)
        dof = json.loads((FsPath(args.plan) / "plan.json" if FsPath(args.plan).is_dir()
                          else FsPath(args.plan)).read_text(encoding="utf-8"))["dof"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read plan {args.plan!r}: {exc}", EXIT_PARSE) from None
    if dof != model.dof:
        raise CliError(f"plan was made for a {dof}-DoF arm, robot has {model.dof}", EXIT_PARSE)
    res = execute_plan(plan, w, StreamEnv(model), _exec_cfg(args), seed=args.seed)
    out = out_dir(args)
    res.write(out)
    print(res.summary())
    return EXIT_OK if res.goals_satisfied else EXIT_UNSATISFIED


def cmd_solubility(args) -> int:
    w, prog = _inputs(args)
    model = robot(args.robot)
    run = run_solubility(prog, w, StreamEnv(model), seed=args.seed, pour_g=args.pour_g, cfg=_exec_cfg(args))
    out = out_dir(args)
    run.plan.to_json(out, model)
    run.execution.write(out)
    (out / "solubility.csv").write_text(run.result.to_csv(), encoding="utf-8")
    print(run.execution.summary())
    print(run.result.to_csv(), end="")
    return EXIT_OK if run.execution.goals_satisfied else EXIT_UNSATISFIED


def cmd_recrystallize(args) -> int:
    w, prog = _inputs(args)
    model = robot(args.robot)
    run = run_recrystallization(prog, w, StreamEnv(model), seed=args.seed, t_cool=args.t_cool,
                                cfg=_exec_cfg(args))
    out = out_dir(args)
    run.plan.to_json(out, model)
    run.execution.write(out)
    (out / "recrystallization.csv").write_text(run.to_csv(), encoding="utf-8")
    print(run.execution.summary())
    print(run.to_csv(), end="")
    return EXIT_OK if run.execution.goals_satisfied else EXIT_UNSATISFIED


def cmd_bench_cplan(args) -> int:
    rows = run_cplan_bench({7: panda7(), 8: panda8()}, trials=args.trials, seed=args.seed)
    text = cplan_csv(rows)
    (out_dir(args) / "cplan.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_bench_pour(args) -> int:
    rows = run_pour_bench(targets=tuple(args.targets), seeds=args.trials, seed=args.seed)
    text = pour_csv(rows)
    (out_dir(args) / "pour.csv").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _nonneg(text: str) -> float:
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labtamp", description="Plan and simulate chemistry-lab manipulation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, scene=True, xdl=True):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", default="out", help="output directory (LABTAMP_OUT overrides)")
        if scene:
            sp.add_argument("--scene", required=True, help="scene JSON file or shipped fixture name")
            sp.add_argument("--robot", default="panda8", help="panda7, panda8 or a robot JSON file")
        if xdl:
            sp.add_argument("--xdl", required=True, help="XDL file or shipped fixture name")

    sp = sub.add_parser("plan", help="plan an XDL experiment and write plan.json")
    common(sp)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("execute", help="simulate a plan with pose noise and closed-loop skills")
    common(sp, xdl=False)
    sp.add_argument("--plan", required=True, help="plan.json or the directory holding it")
    sp.add_argument("--noise", type=_nonneg, default=0.0, help="pose-estimate error bound [m]; 0.01 = 1 cm, 5 deg")
    sp.set_defaults(func=cmd_execute)

    sp = sub.add_parser("solubility", help="plan, execute and analyze a solubility measurement")
    common(sp)
    sp.add_argument("--noise", type=_nonneg, default=0.0)
    sp.add_argument("--pour-g", type=float, default=None, help="override the amount of each water pour [g]")
    sp.set_defaults(func=cmd_solubility)

    sp = sub.add_parser("recrystallize", help="plan, execute and analyze a recrystallization")
    common(sp)
    sp.add_argument("--noise", type=_nonneg, default=0.0)
    sp.add_argument("--t-cool", type=float, default=None, help="override the final HeatChill temperature [C]")
    sp.set_defaults(func=cmd_recrystallize)

    sp = sub.add_parser("bench-cplan", help="7- vs 8-DoF constrained planning benchmark")
    common(sp, scene=False, xdl=False)
    sp.add_argument("--trials", type=_positive_int, default=50)
    sp.set_defaults(func=cmd_bench_cplan)

    sp = sub.add_parser("bench-pour", help="shaping vs PD pouring benchmark")
    common(sp, scene=False, xdl=False)
    sp.add_argument("--trials", type=_positive_int, default=20, help="seeds per cell")
    sp.add_argument("--targets", type=float, nargs="+", default=[10.0, 30.0, 50.0, 100.0])
    sp.set_defaults(func=cmd_bench_pour)
    return p


_ERROR_CODES = (
    (CliError, None),
    (XdlError, EXIT_PARSE),
    (PreconditionError, EXIT_PRECONDITION),
    (GoalPlanningError, EXIT_PLANNING),
    (PlanningFailure, EXIT_PLANNING),
    (RefinementFailure, EXIT_REFINEMENT),
    (ExperimentAborted, EXIT_ABORTED),
    (ExecutionError, EXIT_EXECUTION),
    (PourError, EXIT_EXECUTION),
    (SceneError, EXIT_EXECUTION),
    (PerceptionError, EXIT_EXECUTION),
    (AnalysisError, EXIT_EXECUTION),
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except tuple(cls for cls, _ in _ERROR_CODES) as exc:
        code = next(c for cls, c in _ERROR_CODES if isinstance(exc, cls))
        code = exc.code if code is None else code
        print(f"error: {exc}", file=sys.stderr)
        partial = getattr(exc, "partial", None)
        if partial is not None:
            partial.write(out_dir(args))
            print(partial.summary(), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
