"""Task and motion planning over pick/move/place/pour plus device actions.

Symbolic layer: STRIPS schemas with ``?var`` templates, grounded over typed
objects and searched with A*. Continuous choices (grasps, placements, pour
poses, joint configurations, trajectories) are represented by optimistic
location objects such as ``grasp:beaker1:0``. After a symbolic plan is found
the streams are evaluated in plan order; a failing instance is disabled and
the next round allows one more optimistic instance per stream class.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Callable

import numpy as np

from labtamp.cplanner import (
    UNCONSTRAINED,
    UPRIGHT,
    Budget,
    ConstraintSpec,
    Path,
    PlanningFailure,
    goal_configurations,
    plan_between,
    write_path_csv,
)
from labtamp.collision import collision_free
from labtamp.kinematics import RobotModel, as_seed_sequence
from labtamp.scene import (
    DeviceKind,
    PickEffect,
    PlaceEffect,
    PourEffect,
    SceneError,
    StirEffect,
    TemperatureEffect,
    Workspace,
    apply_effect,
)
from labtamp.transforms import Transform
from labtamp.xdl import Goal, XdlProgram, to_goals

HOME = "home"
T_MAX = 60.0  # s per goal, safety cap only
MAX_ROUNDS = 5
POUR_CLEARANCE = 0.02  # m between the held vessel's bounding capsule and the receiver rim
OBSERVE_HEIGHT = 0.25  # m above the vessel base
YAW_OFFSETS = (0.0, 0.35, -0.35, 0.7, -0.7, 1.05, -1.05)
READY = (0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785)


class TaskPlanningError(RuntimeError):
    pass


class PreconditionError(TaskPlanningError):
    """A required hardware item or reagent is missing from the workspace."""

    def __init__(self, missing: str, what: str = "hardware"):
        super().__init__(f"missing {what}: {missing!r}")
        self.missing = missing


class GoalPlanningError(TaskPlanningError):
    def __init__(self, message: str, goal_index: int | None = None, stream_failures: Counter | None = None):
        self.goal_index = goal_index
        self.stream_failures = stream_failures or Counter()
        worst = self.stream_failures.most_common(1)
        detail = f" (most failures: {worst[0][0]} x{worst[0][1]})" if worst else ""
        prefix = f"goal {goal_index}: " if goal_index is not None else ""
        super().__init__(prefix + message + detail)


class ExperimentAborted(RuntimeError):
    def __init__(self, repetitions: int):
        super().__init__(f"condition still false after {repetitions} repetitions")
        self.repetitions = repetitions


# -- symbolic layer -------------------------------------------------------------

Literal = tuple


@dataclass(frozen=True)
class ActionSchema:
    name: str
    params: tuple[tuple[str, str], ...]  # (?var, type)
    pre: tuple[Literal, ...]
    add: tuple[Literal, ...]
    delete: tuple[Literal, ...] = ()
    distinct: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        declared = {v for v, _ in self.params}
        for lit in self.pre + self.add + self.delete:
            for a in lit[1:]:
                if isinstance(a, str) and a.startswith("?") and a not in declared:
                    raise ValueError(f"{self.name}: undeclared parameter {a}")


DOMAIN = (
    ActionSchema("move", (("?from", "loc"), ("?to", "loc")),
                 pre=(("arm-at", "?from"),), add=(("arm-at", "?to"),), delete=(("arm-at", "?from"),),
                 distinct=(("?from", "?to"),)),
    ActionSchema("pick", (("?v", "vessel"), ("?l", "loc")),
                 pre=(("hand-empty",), ("arm-at", "?l"), ("grasp-loc", "?l", "?v"), ("graspable", "?v"),
                      ("at-rest", "?v")),
                 add=(("holding", "?v"),), delete=(("hand-empty",), ("at-rest", "?v"))),
    ActionSchema("place", (("?v", "vessel"), ("?l", "loc")),
                 pre=(("holding", "?v"), ("arm-at", "?l"), ("place-loc", "?l", "?v")),
                 add=(("hand-empty",), ("at-rest", "?v")), delete=(("holding", "?v"),)),
    ActionSchema("pour", (("?src", "vessel"), ("?dst", "vessel"), ("?sp", "species"), ("?amt", "amount"),
                          ("?l", "loc")),
                 pre=(("holding", "?src"), ("arm-at", "?l"), ("pour-loc", "?l", "?dst"), ("has", "?src", "?sp"),
                      ("wants", "?dst", "?sp", "?amt")),
                 add=(("contains", "?dst", "?sp", "?amt"),), distinct=(("?src", "?dst"),)),
    ActionSchema("stir", (("?v", "vessel"), ("?d", "device")),
                 pre=(("on-device", "?v", "?d"), ("stirrer", "?d"), ("at-rest", "?v")),
                 add=(("stirred", "?v"),)),
    ActionSchema("heatchill", (("?v", "vessel"), ("?d", "device"), ("?t", "temp")),
                 pre=(("on-device", "?v", "?d"), ("heater", "?d"), ("at-rest", "?v")),
                 add=(("at-temperature", "?v", "?t"),)),
    ActionSchema("observe", (("?v", "vessel"), ("?q", "quantity"), ("?tag", "tag"), ("?l", "loc")),
                 pre=(("hand-empty",), ("arm-at", "?l"), ("observe-loc", "?l", "?v")),
                 add=(("measured", "?v", "?q", "?tag"),)),
)

FLUENTS = {"arm-at", "hand-empty", "holding", "at-rest", "contains", "stirred", "at-temperature", "measured"}


@dataclass(frozen=True)
class GroundAction:
    name: str
    args: tuple
    pre: frozenset
    add: frozenset
    delete: frozenset

    def applicable(self, state: frozenset) -> bool:
        return self.pre <= state

    def apply(self, state: frozenset) -> frozenset:
        return (state - self.delete) | self.add

    def __str__(self) -> str:
        return f"{self.name}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class Problem:
    objects: dict  # type -> tuple of objects
    init: frozenset
    goal: frozenset
    t_max: float = T_MAX

    def __post_init__(self):
        for lit in self.goal:
            if lit[0] not in FLUENTS:
                raise ValueError(f"goal literal {lit} is not a fluent")


def _subst(lit: Literal, binding: dict) -> Literal:
    return tuple(binding.get(a, a) if isinstance(a, str) else a for a in lit)


def ground(problem: Problem, domain=DOMAIN, disabled: frozenset = frozenset()) -> list[GroundAction]:
    """All grounded actions whose static preconditions hold in the initial state."""
    out = []
    for schema in domain:
        choices = [problem.objects.get(t, ()) for _, t in schema.params]
        names = [v for v, _ in schema.params]
        for combo in itertools.product(*choices):
            b = dict(zip(names, combo))
            if any(b[x] == b[y] for x, y in schema.distinct):
                continue
            pre = frozenset(_subst(p, b) for p in schema.pre)
            if any(p[0] not in FLUENTS and p not in problem.init for p in pre):
                continue
            ga = GroundAction(schema.name, tuple(combo), pre,
                              frozenset(_subst(a, b) for a in schema.add),
                              frozenset(_subst(d, b) for d in schema.delete))
            if (ga.name, ga.args) in disabled:
                continue
            out.append(ga)
    return out


def astar(problem: Problem, actions: list[GroundAction], max_expansions: int = 200_000) -> list[GroundAction] | None:
    """Optimal (fewest actions) plan; h = ceil(unsatisfied goals / most goal literals one action adds)."""
    goal = problem.goal
    per_action = max((len(a.add & goal) for a in actions), default=0)
    if goal <= problem.init:
        return []
    if per_action == 0:
        return None

    def h(s):
        return math.ceil(len(goal - s) / per_action)

    start = problem.init
    tie = itertools.count()
    frontier = [(h(start), 0, next(tie), start)]
    parent: dict = {start: None}
    cost = {start: 0}
    expanded = 0
    while frontier:
        _, g, _, s = heapq.heappop(frontier)
        if g > cost[s]:
            continue
        if goal <= s:
            plan = []
            while parent[s] is not None:
                s, a = parent[s]
                plan.append(a)
            return plan[::-1]
        expanded += 1
        if expanded > max_expansions:
            return None
        for a in actions:
            if a.pre <= s:
                t = a.apply(s)
                if t not in cost or g + 1 < cost[t]:
                    cost[t] = g + 1
                    parent[t] = (s, a)
                    heapq.heappush(frontier, (g + 1 + h(t), g + 1, next(tie), t))
    return None


def bfs_plan_length(problem: Problem, actions: list[GroundAction], max_states: int = 500_000) -> int | None:
    """Minimum number of actions by exhaustive breadth-first search."""
    if problem.goal <= problem.init:
        return 0
    seen = {problem.init}
    queue = deque([(problem.init, 0)])
    while queue:
        s, d = queue.popleft()
        for a in actions:
            if a.pre <= s:
                t = a.apply(s)
                if t in seen:
                    continue
                if problem.goal <= t:
                    return d + 1
                seen.add(t)
                if len(seen) > max_states:
                    return None
                queue.append((t, d + 1))
    return None


# -- problem construction ----------------------------------------------------------


def loc_name(kind: str, target: str, k: int) -> str:
    return f"{kind}:{target}:{k}"


def parse_loc(name: str) -> tuple[str, str, int]:
    kind, target, k = name.split(":")
    return kind, target, int(k)


def _vessel_tag_goal(goal: Goal, tag) -> Literal:
    return ("measured", goal.vessel, goal.quantity or "turbidity", tag)


def goal_literals(goal: Goal, tag=0) -> frozenset:
    """Symbolic goal for one Goal; "contains" values are absolute masses."""
    if goal.kind == "contains":
        return frozenset({("contains", goal.vessel, goal.species, round(float(goal.value), 9)), ("hand-empty",)})
    if goal.kind == "holding":
        return frozenset({("holding", goal.vessel)})
    if goal.kind == "stirred":
        return frozenset({("stirred", goal.vessel)})
    if goal.kind == "at-temperature":
        return frozenset({("at-temperature", goal.vessel, float(goal.value))})
    if goal.kind == "measured":
        return frozenset({_vessel_tag_goal(goal, tag)})
    raise ValueError(f"unsupported goal kind {goal.kind!r}")


def build_problem(w: Workspace, goal: frozenset, level: int = 1, disabled_locs: frozenset = frozenset(),
                  t_max: float = T_MAX) -> Problem:
    """Objects and initial literals for ``goal`` in workspace ``w``.

    Each stream class contributes ``level`` optimistic location instances per
    target, minus the instances disabled by earlier failed evaluations.
    """
    vessels = tuple(sorted(w.vessels))
    devices = tuple(sorted(w.devices))
    locs = [HOME]
    for k in range(level):
        for v in vessels:
            for kind in ("grasp", "place", "pour", "observe"):
                name = loc_name(kind, v, k)
                if name not in disabled_locs:
                    locs.append(name)
    species = sorted({c.species for v in w.vessels.values() for c in v.contents}
                     | {g[2] for g in goal if g[0] == "contains"})
    amounts = sorted({g[3] for g in goal if g[0] == "contains"})
    temps = sorted({g[2] for g in goal if g[0] == "at-temperature"})
    quantities = sorted({g[2] for g in goal if g[0] == "measured"})
    tags = sorted({g[3] for g in goal if g[0] == "measured"}, key=str)

    init = {("arm-at", HOME)}
    init.add(("holding", w.held) if w.held else ("hand-empty",))
    for v in vessels:
        vs = w.vessels[v]
        if v != w.held:
            init.add(("at-rest", v))
        if vs.graspable:
            init.add(("graspable", v))
        did = w.device_under(v)
        if did is not None:
            init.add(("on-device", v, did))
            dev = w.devices[did]
            if dev.kind == DeviceKind.HOTPLATE_STIRRER:
                if dev.stirring:
                    init.add(("stirred", v))
                for t in temps:
                    if abs(w.temperature_of(v) - t) < 1e-9:
                        init.add(("at-temperature", v, t))
    for d in devices:
        if w.devices[d].kind == DeviceKind.HOTPLATE_STIRRER:
            init |= {("stirrer", d), ("heater", d)}
    for g in goal:
        if g[0] != "contains":
            continue
        _, dst, sp, amt = g
        have = w.vessel(dst).mass(sp)
        if have >= amt - 1e-9:
            init.add(g)
            continue
        init.add(("wants", dst, sp, amt))
        need = amt - have
        for v in vessels:
            if v != dst and w.vessels[v].mass(sp) >= need - 1e-9:
                init.add(("has", v, sp))
    for name in locs[1:]:
        kind, target, _ = parse_loc(name)
        init.add((f"{kind}-loc", name, target))
    objects = {
        "vessel": vessels, "device": devices, "loc": tuple(locs), "species": tuple(species),
        "amount": tuple(amounts), "temp": tuple(temps), "quantity": tuple(quantities), "tag": tuple(tags),
    }
    return Problem(objects, frozenset(init), frozenset(goal), t_max)


# -- streams ---------------------------------------------------------------------


def _yaw_towards(base: Transform, p) -> float:
    rel = base.inverse().apply(np.asarray(p, dtype=float))
    return math.atan2(rel[1], rel[0])


def _yaw_offset(k: int) -> float:
    return YAW_OFFSETS[k] if k < len(YAW_OFFSETS) else 0.35 * (k // 2 + 1) * (1 if k % 2 else -1)


def _level_pose(w: Workspace, position, k: int) -> Transform:
    base_yaw = w.robot_base.rpy()[2]
    yaw = base_yaw + _yaw_towards(w.robot_base, position) + _yaw_offset(k)
    return Transform.from_xyz_rpy(position, (0.0, 0.0, yaw))


def sample_grasp(w: Workspace, v: str, k: int) -> Transform:
    """Side grasp at mid-height, approach direction (tool x) pointing away from the robot."""
    vs = w.vessel(v)
    return _level_pose(w, vs.pose.apply([0.0, 0.0, vs.height_m / 2]), k)


def sample_place_pose(w: Workspace, v: str, k: int) -> tuple[Transform, Transform]:
    """(vessel pose, tool pose) returning ``v`` to its last resting pose."""
    vs = w.vessel(v)
    return vs.pose, _level_pose(w, vs.pose.apply([0.0, 0.0, vs.height_m / 2]), k)


def sample_pour_pose(w: Workspace, src: str, dst: str, k: int) -> Transform:
    """Upright pre-pour pose: held vessel just clear of the receiver, offset towards the robot."""
    s, d = w.vessel(src), w.vessel(dst)
    top = d.pose.apply([0.0, 0.0, d.height_m])
    z = top[2] + s.height_m / 2 + s.radius_m + POUR_CLEARANCE
    pose = _level_pose(w, top, k)
    xy = top - pose.rotation[:, 0] * s.radius_m
    return Transform(pose.rotation, np.array([xy[0], xy[1], z]))


def observe_pose(w: Workspace, v: str, k: int) -> Transform:
    vs = w.vessel(v)
    return _level_pose(w, vs.pose.apply([0.0, 0.0, OBSERVE_HEIGHT]), k)


class StreamFailure(RuntimeError):
    def __init__(self, stream: str, instance):
        super().__init__(f"stream {stream} failed for {instance}")
        self.stream = stream
        self.instance = instance


@dataclass
class StreamEnv:
    model: RobotModel
    q0: np.ndarray | None = None
    budget: Budget = field(default_factory=lambda: Budget(samples=600))
    restarts: int = 16
    motion_retries: int = 2

    def start(self) -> np.ndarray:
        if self.q0 is not None:
            return np.asarray(self.q0, dtype=float)
        return ready_config(self.model)


def ready_config(model: RobotModel) -> np.ndarray:
    q = np.zeros(model.dof)
    q[: min(7, model.dof)] = READY[: model.dof]
    return model.clip(q)


def motion_spec(w: Workspace) -> ConstraintSpec:
    """Upright whenever a filled vessel is held."""
    return UPRIGHT if w.held is not None and w.vessel(w.held).is_filled else UNCONSTRAINED


def solve_ik_stream(env: StreamEnv, w: Workspace, pose: Transform, q_near, spec: ConstraintSpec, seed,
                    ignore=()) -> np.ndarray:
    sols = goal_configurations(env.model, w, pose, spec, q_near, seed, restarts=env.restarts,
                               attached=w.held, ignore=ignore)
    if len(sols) == 0:
        raise StreamFailure("solve_ik", pose)
    return sols


def plan_motion_stream(env: StreamEnv, w: Workspace, q0, goals, spec: ConstraintSpec, seed, ignore=()) -> Path:
    ss = as_seed_sequence(seed).spawn(env.motion_retries)
    for s in ss:
        try:
            return plan_between(env.model, w, q0, goals[:3], spec, env.budget, seed=s,
                                attached=w.held, ignore=ignore)
        except PlanningFailure:
            continue
    raise StreamFailure("plan_motion", None)


# -- plans ----------------------------------------------------------------------


@dataclass
class PlanStep:
    action: str
    args: tuple
    goal_index: int = 0
    path: Path | None = None
    constraint: str = "none"
    attached: str | None = None
    ignore: tuple = ()
    tool_pose: Transform | None = None
    vessel_pose: Transform | None = None
    loc: str | None = None
    transfer_g: float | None = None
    species: str | None = None
    device: str | None = None
    value: float | None = None

    def effect(self):
        if self.action == "pick":
            return PickEffect(self.args[0])
        if self.action == "place":
            return PlaceEffect(self.args[0], self.vessel_pose)
        if self.action == "pour":
            return PourEffect(self.args[0], self.args[1], self.transfer_g, self.species)
        if self.action == "stir":
            return StirEffect(self.device, True)
        if self.action == "heatchill":
            return TemperatureEffect(self.device, self.value)
        return None

    def __str__(self) -> str:
        s = f"{self.action}({', '.join(str(a) for a in self.args)})"
        if self.path is not None:
            s += f" [{len(self.path)} waypoints, {self.constraint}]"
        if self.transfer_g is not None:
            s += f" [{self.transfer_g:g} g]"
        return s


@dataclass
class Plan:
    steps: list[PlanStep] = field(default_factory=list)
    goals: list[Goal] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.steps)

    def actions(self) -> list[str]:
        return [s.action for s in self.steps]

    def final_config(self, default=None):
        for s in reversed(self.steps):
            if s.path is not None:
                return s.path.end
        return default

    def segment(self, goal_indices) -> list[PlanStep]:
        idx = set(goal_indices)
        return [s for s in self.steps if s.goal_index in idx]

    def describe(self) -> str:
        return "\n".join(f"{i:3d}  [goal {s.goal_index}] {s}" for i, s in enumerate(self.steps))

    def replay(self, w: Workspace) -> Workspace:
        for s in self.steps:
            e = s.effect()
            if e is not None:
                w = apply_effect(w, e)
        return w

    def to_json(self, out_dir, model: RobotModel) -> dict:
        """Write plan.json plus one path CSV per motion into ``out_dir``."""
        out = FsPath(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for i, s in enumerate(self.steps):
            row = {"index": i, "action": s.action, "args": [str(a) for a in s.args], "goal_index": s.goal_index}
            if s.path is not None:
                name = f"path_{i:03d}.csv"
                write_path_csv(s.path, model, out / name,
                               UPRIGHT if s.constraint == "upright" else UNCONSTRAINED)
                row.update(path_csv=name, constraint=s.constraint, attached=s.attached, ignore=list(s.ignore),
                           waypoints=len(s.path))
            if s.loc is not None:
                row["loc"] = s.loc
            if s.tool_pose is not None:
                row["tool_pose"] = s.tool_pose.to_dict()
            if s.vessel_pose is not None:
                row["vessel_pose"] = s.vessel_pose.to_dict()
            for key in ("transfer_g", "species", "device", "value"):
                if getattr(s, key) is not None:
                    row[key] = getattr(s, key)
            rows.append(row)
        doc = {"robot": model.name, "dof": model.dof, "actions": rows,
               "goals": [g.__dict__ for g in self.goals]}
        (out / "plan.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        return doc

    @classmethod
    def from_json(cls, path) -> Plan:
        """Read a plan written by :meth:`to_json` (``path`` is plan.json or its directory)."""
        p = FsPath(path)
        if p.is_dir():
            p = p / "plan.json"
        doc = json.loads(p.read_text(encoding="utf-8"))

        def pose(d):
            return None if d is None else Transform.from_xyz_rpy(d["xyz"], d["rpy"])

        steps = []
        for row in doc["actions"]:
            path_ = None
            if "path_csv" in row:
                data = np.loadtxt(p.parent / row["path_csv"], delimiter=",", skiprows=1, ndmin=2)
                path_ = Path(data[:, 1 : 1 + int(doc["dof"])])
            steps.append(PlanStep(
                row["action"], tuple(row["args"]), int(row["goal_index"]), path=path_,
                constraint=row.get("constraint", "none"), attached=row.get("attached"),
                ignore=tuple(row.get("ignore", ())), tool_pose=pose(row.get("tool_pose")),
                vessel_pose=pose(row.get("vessel_pose")), loc=row.get("loc"),
                transfer_g=row.get("transfer_g"), species=row.get("species"), device=row.get("device"),
                value=row.get("value"),
            ))
        return cls(steps, [Goal(**g) for g in doc["goals"]])


def resting_contacts(model: RobotModel, w: Workspace, q) -> tuple[str, ...]:
    """Vessels the configuration ``q`` touches (e.g. the one just released)."""
    if collision_free(model, w, q):
        return ()
    return tuple(v for v in sorted(w.vessels)
                 if v != w.held and not collision_free(model, w, q) and collision_free(model, w, q, ignore=(v,)))


def _evaluate(env: StreamEnv, w: Workspace, q, actions: list[GroundAction], goal_index: int,
              seed: np.random.SeedSequence) -> tuple[list[PlanStep], Workspace, np.ndarray]:
    """Bind continuous artifacts to a symbolic plan; raises StreamFailure."""
    steps = []
    seeds = as_seed_sequence(seed).spawn(2 * len(actions) + 1)
    loc_of = HOME
    home_contacts = set(resting_contacts(env.model, w, q))
    for i, a in enumerate(actions):
        if a.name == "move":
            src_loc, dst_loc = a.args
            kind, target, k = parse_loc(dst_loc)
            touching = {parse_loc(x)[1] for x in (src_loc, dst_loc)
                        if x != HOME and parse_loc(x)[0] in ("grasp", "place")}
            if src_loc == HOME:
                touching |= home_contacts
            ignore = tuple(sorted(touching - {w.held}))
            vessel_pose = None
            if kind == "grasp":
                pose = sample_grasp(w, target, k)
            elif kind == "place":
                vessel_pose, pose = sample_place_pose(w, target, k)
            elif kind == "pour":
                if w.held is None:
                    raise StreamFailure("sample_pour_pose", dst_loc)
                pose = sample_pour_pose(w, w.held, target, k)
            else:
                pose = observe_pose(w, target, k)
            spec = motion_spec(w)
            try:
                goals = solve_ik_stream(env, w, pose, q, spec, seeds[2 * i], ignore)
            except StreamFailure:
                raise StreamFailure("solve_ik", dst_loc) from None
            try:
                path = plan_motion_stream(env, w, q, goals, spec, seeds[2 * i + 1], ignore)
            except StreamFailure:
                raise StreamFailure("plan_motion", (a.name, a.args)) from None
            steps.append(PlanStep("move", a.args, goal_index, path=path, constraint=spec.kind.value,
                                  attached=w.held, ignore=ignore, tool_pose=pose, vessel_pose=vessel_pose,
                                  loc=dst_loc))
            q = path.end
            loc_of = dst_loc
            continue
        if a.name == "pick":
            step = PlanStep("pick", a.args, goal_index, loc=loc_of)
        elif a.name == "place":
            v = a.args[0]
            step = PlanStep("place", a.args, goal_index, loc=loc_of, vessel_pose=w.vessel(v).pose)
        elif a.name == "pour":
            src, dst, sp, amt, _ = a.args
            step = PlanStep("pour", a.args, goal_index, loc=loc_of, species=sp,
                            transfer_g=float(amt - w.vessel(dst).mass(sp)))
        elif a.name == "stir":
            step = PlanStep("stir", a.args, goal_index, device=a.args[1])
        elif a.name == "heatchill":
            step = PlanStep("heatchill", a.args, goal_index, device=a.args[1], value=float(a.args[2]))
        elif a.name == "observe":
            step = PlanStep("observe", a.args, goal_index, loc=loc_of)
        else:  # pragma: no cover - domain is closed
            raise ValueError(a.name)
        e = step.effect()
        if e is not None:
            w = apply_effect(w, e)
        steps.append(step)
    return steps, w, q


def plan_goal(w: Workspace, goal: frozenset, env: StreamEnv, seed=0, q0=None, goal_index: int = 0,
              max_rounds: int = MAX_ROUNDS, t_max: float = T_MAX) -> tuple[list[PlanStep], Workspace, np.ndarray]:
    """Optimistic symbolic plan, then stream evaluation; retries with more optimism.

    Returns (steps, workspace after the steps, final configuration).
    """
    q = env.start() if q0 is None else np.asarray(q0, dtype=float)
    disabled_locs: set = set()
    disabled_actions: set = set()
    failures: Counter = Counter()
    round_seeds = as_seed_sequence(seed).spawn(max_rounds)
    t0 = time.monotonic()
    for level in range(1, max_rounds + 1):
        problem = build_problem(w, goal, level, frozenset(disabled_locs), t_max)
        actions = ground(problem, disabled=frozenset(disabled_actions))
        sym = astar(problem, actions)
        if sym is None:
            # more optimism only helps once some instance has been disabled
            if not disabled_locs and not disabled_actions:
                raise GoalPlanningError("goal unreachable in the symbolic domain", goal_index, failures)
            failures["symbolic"] += 1
            continue
        try:
            steps, w_out, q_out = _evaluate(env, w, q, sym, goal_index, round_seeds[level - 1])
            return steps, w_out, q_out
        except StreamFailure as exc:
            failures[exc.stream] += 1
            if exc.stream == "plan_motion":
                disabled_actions.add(exc.instance)
            else:
                disabled_locs.add(exc.instance)
        if time.monotonic() - t0 > t_max:
            raise GoalPlanningError(f"time budget of {t_max:g} s exhausted", goal_index, failures)
    raise GoalPlanningError(f"no feasible plan after {max_rounds} rounds", goal_index, failures)


def pass_conditions(prog: XdlProgram, w: Workspace) -> None:
    """Abort early when the experiment needs hardware or reagents the scene lacks."""
    for c in prog.hardware:
        if c.id not in w.vessels and c.id not in w.devices:
            raise PreconditionError(c.id, "hardware")
    present = {c.species for v in w.vessels.values() for c in v.contents}
    for r in prog.reagents:
        if r.name not in present:
            raise PreconditionError(r.name, "reagent")


def absolute_goal(goal: Goal, w: Workspace) -> Goal:
    """Turn an Add goal ("add N g") into a threshold on the current contents."""
    if goal.kind != "contains":
        return goal
    base = w.vessel(goal.vessel).mass(goal.species)
    return Goal("contains", goal.vessel, goal.species, base + goal.value, step=goal.step)


def run_alg1(prog: XdlProgram, w: Workspace, env: StreamEnv, seed=0, t_max: float = T_MAX) -> Plan:
    """Plan every procedure goal in order, advancing the scene after each one."""
    pass_conditions(prog, w)
    _, goals = to_goals(prog, w.densities)
    plan = Plan(goals=list(goals))
    q = env.start()
    seeds = as_seed_sequence(seed).spawn(max(1, len(goals)))
    for i, g in enumerate(goals):
        lits = goal_literals(absolute_goal(g, w), tag=i)
        try:
            steps, w, q = plan_goal(w, lits, env, seeds[i], q0=q, goal_index=i, t_max=t_max)
        except GoalPlanningError as exc:
            raise GoalPlanningError(str(exc).split(": ", 1)[-1], i, exc.stream_failures) from None
        plan.steps.extend(steps)
    return plan


def refine_task(condition: Callable[[], bool], run_body: Callable[[int], None], max_reps: int) -> int:
    """Re-run the body while ``condition`` is false; returns the number of expansions."""
    if max_reps < 1:
        raise ValueError("max_reps must be >= 1")
    reps = 0
    while not condition():
        if reps >= max_reps:
            raise ExperimentAborted(reps)
        run_body(reps)
        reps += 1
    return reps
