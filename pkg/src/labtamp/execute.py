"""Simulated execution of a reference plan.

Before each pick the target vessel's pose is re-estimated with bounded
noise and the approach is refined (new IK goal and path). Pours run the
closed-loop controller against the simulated plant; observations query the
turbidity model. Observe goals with ``repeat_until`` re-run their body
through :func:`labtamp.taskplan.refine_task`, reusing the body's plan steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from labtamp.collision import collision_free
from labtamp.cplanner import UNCONSTRAINED, UPRIGHT, Path, PlanningFailure, plan_between
from labtamp.kinematics import as_seed_sequence
from labtamp.perception import (
    SOLVENT,
    SolubilityModel,
    TurbiditySeries,
    detect_dissolved,
    experiment_log_csv,
    load_solubility_models,
    turbidity_observe,
)
from labtamp.scene import (
    Phase,
    PickEffect,
    PlaceEffect,
    PourEffect,
    StirEffect,
    TemperatureEffect,
    Workspace,
    apply_effect,
    with_vessel_pose,
)
from labtamp.skills import PourControllerConfig, PourError, PourTrace, make_plant, pour_shaping
from labtamp.taskplan import (
    ExperimentAborted,
    Plan,
    PlanStep,
    StreamEnv,
    StreamFailure,
    parse_loc,
    refine_task,
    resting_contacts,
    sample_grasp,
    solve_ik_stream,
)
from labtamp.transforms import Transform
from labtamp.xdl import Goal

POSE_NOISE_M = 0.01
POSE_NOISE_RAD = math.radians(5.0)
POUR_TOLERANCE_G = 0.1
OBSERVE_FRAMES = 5


class ExecutionError(RuntimeError):
    pass


class RefinementFailure(ExecutionError):
    pass


@dataclass(frozen=True)
class ExecutionConfig:
    noise_m: float = 0.0  # bound on the pose-estimate translation error
    noise_rad: float | None = None  # yaw bound; defaults to noise_m scaled as 5 deg per cm
    refine_m: float = POSE_NOISE_M  # largest pose change local refinement is trusted for
    refine_rad: float = POSE_NOISE_RAD
    pour: PourControllerConfig = field(default_factory=PourControllerConfig)
    pour_size_g: float | None = None  # overrides every Add amount when set
    replan_attempts: int = 3
    frames: int = OBSERVE_FRAMES

    @property
    def yaw_bound(self) -> float:
        if self.noise_rad is not None:
            return self.noise_rad
        return self.noise_m * POSE_NOISE_RAD / POSE_NOISE_M


@dataclass
class Observation:
    vessel: str
    quantity: str
    value: float
    temperature_c: float
    goal_index: int


@dataclass
class ExecutionResult:
    workspace: Workspace
    q: np.ndarray
    traces: list[tuple[str, PourTrace]] = field(default_factory=list)
    series: dict[str, TurbiditySeries] = field(default_factory=dict)
    observations: list[Observation] = field(default_factory=list)
    refinements: int = 0
    repetitions: dict[int, int] = field(default_factory=dict)
    goal_ok: dict[int, bool] = field(default_factory=dict)
    executed: list[PlanStep] = field(default_factory=list)
    poured_g: dict[str, float] = field(default_factory=dict)  # measured water added per vessel
    n_goals: int = 0

    @property
    def goals_satisfied(self) -> bool:
        return len(self.goal_ok) == self.n_goals and all(self.goal_ok.values())

    def summary(self) -> str:
        lines = [f"goals completed: {len(self.goal_ok)}/{self.n_goals}",
                 f"actions executed: {len(self.executed)}", f"pour traces: {len(self.traces)}",
                 f"motion refinements: {self.refinements}"]
        for gi, n in sorted(self.repetitions.items()):
            lines.append(f"goal {gi}: body repeated {n} times")
        lines.append("goals satisfied: " + ("yes" if self.goals_satisfied else "no"))
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = FsPath(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, tr in self.traces:
            tr.to_csv(out / f"{name}.csv")
        for vid, s in sorted(self.series.items()):
            (out / f"experiment_log_{vid}.csv").write_text(experiment_log_csv(s), encoding="utf-8")
        (out / "summary.txt").write_text(self.summary() + "\n", encoding="utf-8")


def perturb_pose(pose: Transform, rng: np.random.Generator, bound_m: float, bound_rad: float) -> Transform:
    """Uniform planar offset within a disc of radius bound_m and yaw within +-bound_rad."""
    r = bound_m * math.sqrt(rng.uniform())
    a = rng.uniform(0.0, 2.0 * math.pi)
    yaw = rng.uniform(-bound_rad, bound_rad) if bound_rad > 0 else 0.0
    delta = Transform.from_xyz_rpy((r * math.cos(a), r * math.sin(a), 0.0), (0.0, 0.0, yaw))
    return Transform(delta.rotation @ pose.rotation, pose.translation + delta.translation)


def _material(w: Workspace, vessel: str, species: str) -> str:
    return "liquid" if w.vessel(vessel).phase_of(species) == Phase.LIQUID else "granular"


def _solute(w: Workspace, vessel: str) -> str | None:
    for c in w.vessel(vessel).contents:
        if c.species != SOLVENT and c.mass_g > 0:
            return c.species
    return None


class Executor:
    def __init__(self, plan: Plan, w: Workspace, env: StreamEnv, cfg: ExecutionConfig = ExecutionConfig(),
                 seed=0, models: dict[str, SolubilityModel] | None = None):
        self.plan = plan
        self.env = env
        self.cfg = cfg
        self.models = load_solubility_models() if models is None else models
        self.ss = as_seed_sequence(seed)
        self.rng = np.random.default_rng(self.ss.spawn(1)[0])
        self.res = ExecutionResult(w, env.start(), n_goals=len(plan.goals))
        self._path_cache: dict = {}
        self._last_pour = None

    # -- helpers --------------------------------------------------------------

    def _seed(self):
        return self.ss.spawn(1)[0]

    @property
    def w(self) -> Workspace:
        return self.res.workspace

    @w.setter
    def w(self, value: Workspace) -> None:
        self.res.workspace = value

    def _spec(self):
        return UPRIGHT if self.w.held is not None and self.w.vessel(self.w.held).is_filled else UNCONSTRAINED

    def _ignore(self, step: PlanStep) -> tuple:
        extra = set(resting_contacts(self.env.model, self.w, self.res.q))
        return tuple(sorted((set(step.ignore) | extra) - {self.w.held}))

    def _plan_to(self, goals, ignore) -> Path:
        spec = self._spec()
        key = (tuple(np.round(self.res.q, 9)), tuple(np.round(goals[0], 9)), spec.kind, self.w.held, ignore)
        if key in self._path_cache and self.cfg.noise_m == 0:
            return self._path_cache[key]
        for _ in range(self.cfg.replan_attempts):
            try:
                path = plan_between(self.env.model, self.w, self.res.q, goals[:3], spec, self.env.budget,
                                    seed=self._seed(), attached=self.w.held, ignore=ignore)
            except PlanningFailure:
                continue
            self._path_cache[key] = path
            self.res.refinements += 1
            return path
        raise RefinementFailure("motion refinement failed: no path to the refined goal")

    def _move(self, step: PlanStep, next_step: PlanStep | None) -> None:
        kind, target, k = parse_loc(step.loc)
        if kind == "grasp" and next_step is not None and next_step.action == "pick":
            self._refine_grasp(step, target, k)
            return
        path = step.path
        if np.allclose(path.start, self.res.q, atol=1e-9):
            self.res.q = path.end
            return
        ignore = self._ignore(step)
        goals = [path.end] if collision_free(self.env.model, self.w, path.end, self.w.held, ignore) else []
        if step.tool_pose is not None:
            # the start moved, so configurations nearer to it may connect more easily
            try:
                goals += list(solve_ik_stream(self.env, self.w, step.tool_pose, self.res.q, self._spec(),
                                              self._seed(), ignore))
            except StreamFailure:
                pass
        if not goals:
            raise RefinementFailure(f"no collision-free configuration for {step.loc}")
        self.res.q = self._plan_to(np.array(goals), ignore).end

    def _refine_grasp(self, step: PlanStep, vessel: str, k: int) -> None:
        v = self.w.vessel(vessel)
        before = self.w.device_under(vessel)
        if self.cfg.noise_m > 0 or self.cfg.yaw_bound > 0:
            pose = perturb_pose(v.pose, self.rng, self.cfg.noise_m, self.cfg.yaw_bound)
            dp = float(np.linalg.norm(pose.translation - v.pose.translation))
            dyaw = abs(math.atan2(*(pose.rotation @ v.pose.rotation.T)[[1, 0], 0]))
            self.w = with_vessel_pose(self.w, vessel, pose)
            if self.w.device_under(vessel) != before:
                raise RefinementFailure(f"{vessel!r} left its device footprint: logical state changed")
            if dp > self.cfg.refine_m + 1e-12 or dyaw > self.cfg.refine_rad + 1e-12:
                raise RefinementFailure(
                    f"{vessel!r} pose error {dp * 100:.1f} cm / {math.degrees(dyaw):.1f} deg exceeds the refinement bound"
                )
        unchanged = step.tool_pose is not None and sample_grasp(self.w, vessel, k).allclose(step.tool_pose)
        if unchanged and np.allclose(step.path.start, self.res.q, atol=1e-9):
            self.res.q = step.path.end
            return
        ignore = tuple(sorted(set(self._ignore(step)) | {vessel}))
        try:
            goals = solve_ik_stream(self.env, self.w, sample_grasp(self.w, vessel, k), step.path.end,
                                    UNCONSTRAINED, self._seed(), ignore)
        except StreamFailure:
            raise RefinementFailure(f"no IK solution for the refined grasp of {vessel!r}") from None
        self.res.q = self._plan_to(goals, ignore).end

    def _pour(self, step: PlanStep, index: int) -> None:
        src, dst, sp = step.args[0], step.args[1], step.species
        target = self.cfg.pour_size_g if self.cfg.pour_size_g is not None else step.transfer_g
        sv = self.w.vessel(src)
        plant = make_plant(_material(self.w, src, sp), np.random.default_rng(self._seed()),
                           initial_mass=sv.mass(sp), capacity_ml=sv.capacity_ml, density=self.w.density(sp))
        # the goal is "at least target": aim so that the controller's stop band ends above it
        aim = min(target + self.cfg.pour.stop_band + POUR_TOLERANCE_G, sv.mass(sp))
        try:
            trace = pour_shaping(plant, self.cfg.pour.with_target(aim), seed=self._seed())
        except (PourError, ValueError) as exc:
            raise ExecutionError(f"pour {src} -> {dst} failed: {exc}") from None
        self.w = apply_effect(self.w, PourEffect(src, dst, trace.final_mass, sp))
        self.res.traces.append((f"pour_{len(self.res.traces):03d}_{src}_to_{dst}", trace))
        if sp == SOLVENT:
            measured = float(trace.scale_reading[-1]) if len(trace.scale_reading) else 0.0
            self.res.poured_g[dst] = self.res.poured_g.get(dst, 0.0) + measured
        self._last_pour = (dst, sp, trace.final_mass, target)

    def _observe(self, step: PlanStep, goal_index: int) -> None:
        vessel, quantity = step.args[0], step.args[1]
        temp = self.w.temperature_of(vessel)
        solute = _solute(self.w, vessel)
        model = self.models.get(solute) if solute else None
        if quantity == "turbidity":
            if model is None:
                raise ExecutionError(f"no solubility model for the solute in {vessel!r}")
            # one observation averages a short burst of frames
            value = float(np.mean([turbidity_observe(self.w, vessel, model, seed=sd)
                                   for sd in self.ss.spawn(self.cfg.frames)]))
            s = self.res.series.setdefault(vessel, TurbiditySeries())
            s.append(len(s) + 1, self.res.poured_g.get(vessel, 0.0), value)
        else:
            # "dissolved"/"crystals": report undissolved solute mass at the current temperature
            if model is None:
                value = 0.0
            else:
                v = self.w.vessel(vessel)
                value = max(0.0, v.mass(solute) - model.dissolvable(v.mass(SOLVENT), temp))
        self.res.observations.append(Observation(vessel, quantity, float(value), temp, goal_index))

    def _step(self, step: PlanStep, next_step: PlanStep | None, goal_index: int) -> None:
        a = step.action
        if a == "move":
            self._move(step, next_step)
        elif a == "pick":
            self.w = apply_effect(self.w, PickEffect(step.args[0]))
        elif a == "place":
            self.w = apply_effect(self.w, PlaceEffect(step.args[0], step.vessel_pose))
        elif a == "pour":
            self._pour(step, goal_index)
        elif a == "stir":
            self.w = apply_effect(self.w, StirEffect(step.device, True))
        elif a == "heatchill":
            self.w = apply_effect(self.w, TemperatureEffect(step.device, step.value))
        elif a == "observe":
            self._observe(step, goal_index)
        else:
            raise ExecutionError(f"unknown action {a!r}")
        self.res.executed.append(step)

    def _run_goals(self, indices) -> None:
        steps = self.plan.segment(indices)
        for n, s in enumerate(steps):
            self._last_pour = None
            self._step(s, steps[n + 1] if n + 1 < len(steps) else None, s.goal_index)
            if s.action == "pour":
                self._check_pour(s)
        for gi in indices:
            self.res.goal_ok.setdefault(gi, True)
            self.res.goal_ok[gi] = self.res.goal_ok[gi] and self._goal_holds(self.plan.goals[gi])

    def _check_pour(self, step: PlanStep) -> None:
        dst, sp, moved, target = self._last_pour
        ok = moved >= target - POUR_TOLERANCE_G
        self.res.goal_ok[step.goal_index] = self.res.goal_ok.get(step.goal_index, True) and ok

    def _goal_holds(self, g: Goal) -> bool:
        if g.kind == "stirred":
            did = self.w.device_under(g.vessel)
            return did is not None and self.w.devices[did].stirring
        if g.kind == "at-temperature":
            return abs(self.w.temperature_of(g.vessel) - g.value) < 1e-9
        if g.kind == "measured":
            return any(o.vessel == g.vessel for o in self.res.observations)
        return True  # contains: checked per pour

    def _condition(self, g: Goal):
        if g.repeat_until != "dissolved":
            raise ExecutionError(f"unsupported repeat condition {g.repeat_until!r}")
        return lambda: detect_dissolved(self.res.series.get(g.vessel, TurbiditySeries())) is not None

    def run(self) -> ExecutionResult:
        try:
            self._run_all()
        except (ExecutionError, ExperimentAborted) as exc:
            exc.partial = self.res  # logs gathered so far are kept
            raise
        return self.res

    def _run_all(self) -> None:
        for gi, g in enumerate(self.plan.goals):
            self._run_goals([gi])
            if g.repeat_until is not None:
                body = list(range(gi - g.body, gi + 1))
                try:
                    self.res.repetitions[gi] = refine_task(
                        self._condition(g), lambda _: self._run_goals(body), g.max_repeats)
                except ExperimentAborted:
                    self.res.repetitions[gi] = g.max_repeats
                    self.res.goal_ok[gi] = False
                    raise


def execute_plan(plan: Plan, w: Workspace, env: StreamEnv, cfg: ExecutionConfig = ExecutionConfig(), seed=0,
                 models: dict[str, SolubilityModel] | None = None) -> ExecutionResult:
    """Run ``plan`` in simulation; raises RefinementFailure, ExecutionError or ExperimentAborted."""
    return Executor(plan, w, env, cfg, seed, models).run()
