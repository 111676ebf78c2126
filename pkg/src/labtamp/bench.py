"""Benchmark harnesses: constrained planning (7 vs 8 DoF) and pouring controllers."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from labtamp.cplanner import UPRIGHT, Budget, PlanningFailure, plan_constrained
from labtamp.kinematics import IkFailure, IkObjective, RobotModel, as_seed_sequence, solve_ik
from labtamp.scene import Workspace
from labtamp.skills import PourControllerConfig, make_plant, pour_pd_baseline, pour_shaping
from labtamp.transforms import Transform

GOAL_BOX_LO = (0.3, -0.3, 0.1)
GOAL_BOX_HI = (0.6, 0.3, 0.5)

# success rates reported for the physical robot, used only for the "matched" column
TABLE_I = {(7, 1): (99, 84), (7, 2): (99, 70), (8, 1): (100, 97), (8, 2): (100, 84)}
MATCH_PP = 15.0


@dataclass
class CplanRow:
    dof: int
    scenario: int
    trials: int
    ik_success: int
    plan_success: int

    @property
    def ik_pct(self) -> float:
        return 100.0 * self.ik_success / self.trials

    @property
    def plan_pct(self) -> float:
        return 100.0 * self.plan_success / self.trials

    def matched(self) -> tuple[bool, bool]:
        ik_ref, plan_ref = TABLE_I.get((self.dof, self.scenario), (np.nan, np.nan))
        return abs(self.ik_pct - ik_ref) <= MATCH_PP, abs(self.plan_pct - plan_ref) <= MATCH_PP


def _level_pose(rng: np.random.Generator) -> Transform:
    return Transform.from_xyz_rpy(rng.uniform(GOAL_BOX_LO, GOAL_BOX_HI))


def _trial(model: RobotModel, w: Workspace, scenario: int, seed_seq: np.random.SeedSequence,
           budget: Budget, restarts: int) -> tuple[bool, bool]:
    """One benchmark trial; returns (ik ok, plan ok).

    Poses depend only on the seed, so both arms see the same queries.
    """
    pose_seed, plan_seed = as_seed_sequence(seed_seq).spawn(2)
    rng = np.random.default_rng(pose_seed)
    poses = [_level_pose(rng) for _ in range(scenario + 1)]
    plan_seeds = plan_seed.spawn(restarts + 1)
    ik_ok = True
    for attempt in range(restarts + 1):
        seeds = plan_seeds[attempt].spawn(len(poses))
        try:
            q = solve_ik(model, poses[0], IkObjective.manipulability(), seed=seeds[0])
        except IkFailure:
            return False, False
        failed = False
        for k, target in enumerate(poses[1:], start=1):
            try:
                path = plan_constrained(model, w, q, target, UPRIGHT, budget, seed=seeds[k])
            except PlanningFailure as exc:
                if exc.reason == "ik":
                    return False, False
                failed = True
                break
            q = path.end
        if not failed:
            return ik_ok, True
    return ik_ok, False


def run_cplan_bench(models: dict[int, RobotModel], trials: int = 50, seed: int = 0,
                    scenarios=(1, 2), budget: Budget = Budget(samples=600),
                    sequence_restarts: int = 1, progress=None) -> list[CplanRow]:
    """Table-I style campaign in an obstacle-free workspace.

    Scenario 1 plans start -> goal; scenario 2 adds an intermediate waypoint
    and restarts the whole sequence (at most ``sequence_restarts`` times)
    when a step fails.
    """
    w = Workspace()
    rows = []
    for dof in sorted(models):
        for scenario in scenarios:
            ik = plan = 0
            for i in range(trials):
                ss = np.random.SeedSequence([seed, scenario, i])
                restarts = sequence_restarts if scenario > 1 else 0
                a, b = _trial(models[dof], w, scenario, ss, budget, restarts)
                ik += a
                plan += b
                if progress:
                    progress(dof, scenario, i, a, b)
            rows.append(CplanRow(dof, scenario, trials, ik, plan))
    return rows


def cplan_csv(rows: list[CplanRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["dof", "scenario", "ik_pct", "plan_pct", "ik_matched", "plan_matched"])
    for r in rows:
        m = r.matched()
        wr.writerow([r.dof, r.scenario, f"{r.ik_pct:.1f}", f"{r.plan_pct:.1f}", int(m[0]), int(m[1])])
    return buf.getvalue()


# -- pouring ---------------------------------------------------------------------


@dataclass
class PourRow:
    controller: str
    material: str
    target_g: float
    errors: np.ndarray
    times: np.ndarray

    @property
    def mean_abs_err(self) -> float:
        return float(np.mean(np.abs(self.errors)))

    @property
    def mean_err(self) -> float:
        return float(np.mean(self.errors))

    @property
    def sd_err(self) -> float:
        return float(np.std(self.errors, ddof=1)) if len(self.errors) > 1 else 0.0

    @property
    def mean_rel_err_pct(self) -> float:
        return float(np.mean(np.abs(self.errors)) / self.target_g * 100.0)

    @property
    def mean_time_s(self) -> float:
        return float(np.mean(self.times))


def run_pour_bench(targets=(10.0, 30.0, 50.0, 100.0), materials=("liquid", "granular"),
                   seeds: int = 20, seed: int = 0, cfg: PourControllerConfig | None = None) -> list[PourRow]:
    rows = []
    base = cfg or PourControllerConfig()
    for controller, fn in (("shaping", pour_shaping), ("pd", pour_pd_baseline)):
        for material in materials:
            for target in targets:
                errs, times = [], []
                for k in range(seeds):
                    # plant jitter depends on the seed only, so both controllers face the same plants
                    plant = make_plant(material, np.random.default_rng([seed, k, 7]))
                    trace = fn(plant, base.with_target(target), seed=[seed, k])
                    errs.append(trace.final_mass - target)
                    times.append(trace.duration)
                rows.append(PourRow(controller, material, float(target), np.array(errs), np.array(times)))
    return rows


def pour_csv(rows: list[PourRow]) -> str:
    """Summary table; mean_err_g is the signed mean of (poured - target)."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["controller", "material", "target_g", "mean_err_g", "sd_err_g", "mean_rel_err_pct", "mean_time_s"])
    for r in rows:
        wr.writerow([
            r.controller, r.material, f"{r.target_g:g}", f"{r.mean_err:.4f}", f"{r.sd_err:.4f}",
            f"{r.mean_rel_err_pct:.4f}", f"{r.mean_time_s:.3f}",
        ])
    return buf.getvalue()
