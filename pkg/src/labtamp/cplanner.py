"""Constrained motion planning on the level-tool manifold.

Samples are projected onto ``{q : F(q) = 0}`` (F = tool roll/pitch offset
from nominal) by damped Newton steps, then connected into a PRM* roadmap.
Edges are validated lazily: the roadmap search proposes a path, its edges
are swept (interpolate, project, collision-check) and invalid ones pruned
until a fully valid path exists or the sample budget runs out.
"""

from __future__ import annotations

import csv
import heapq
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from labtamp.collision import collision_free_batch
from labtamp.kinematics import (
    POS_TOL,
    ROT_TOL,
    IkObjective,
    RobotModel,
    as_seed_sequence,
    fk,
    ik_solutions,
)
from labtamp.scene import Workspace
from labtamp.transforms import Transform, pose_error, wrap_angle

STEP = 0.05  # rad, joint-space interpolation resolution
PROJECTION_DAMPING = 1e-6


class ConstraintKind(str, Enum):
    NONE = "none"
    UPRIGHT = "upright"


@dataclass(frozen=True)
class ConstraintSpec:
    kind: ConstraintKind = ConstraintKind.UPRIGHT
    nominal_roll: float = 0.0
    nominal_pitch: float = 0.0
    tol_valid: float = 0.1  # eps_c [rad]
    tol_project: float = 1e-4  # eps
    max_iter: int = 50

    def __post_init__(self):
        if self.tol_valid <= 0 or self.tol_project <= 0:
            raise ValueError("constraint tolerances must be positive")

    @property
    def active(self) -> bool:
        return self.kind == ConstraintKind.UPRIGHT

    @property
    def dim(self) -> int:
        return 2 if self.active else 0


UPRIGHT = ConstraintSpec()
UNCONSTRAINED = ConstraintSpec(kind=ConstraintKind.NONE)


class ProjectionFailure(RuntimeError):
    pass


class PlanningFailure(RuntimeError):
    """``reason`` is ``"ik"`` (no goal configuration) or ``"motion"`` (budget exhausted)."""

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or f"planning failed: {reason}")
        self.reason = reason


@dataclass(frozen=True)
class Budget:
    samples: int = 1500
    time_s: float | None = None
    samples_per_trial: int = 100


@dataclass
class Path:
    waypoints: np.ndarray
    cost: float = 0.0

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))
        if self.cost == 0.0 and len(self.waypoints) > 1:
            self.cost = float(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1).sum())

    def __len__(self) -> int:
        return len(self.waypoints)

    @property
    def start(self) -> np.ndarray:
        return self.waypoints[0]

    @property
    def end(self) -> np.ndarray:
        return self.waypoints[-1]

    def reversed(self) -> Path:
        return Path(self.waypoints[::-1].copy(), self.cost)


# -- constraint function --------------------------------------------------------


def residual_from_rotation(R: np.ndarray, spec: ConstraintSpec) -> np.ndarray:
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    pitch = np.arcsin(np.clip(-R[..., 2, 0], -1.0, 1.0))
    return np.stack([wrap_angle(roll - spec.nominal_roll), wrap_angle(pitch - spec.nominal_pitch)], axis=-1)


def constraint_residual(model: RobotModel, q, spec: ConstraintSpec = UPRIGHT) -> np.ndarray:
    """[roll - nominal, pitch - nominal] of the tool, wrapped to (-pi, pi]."""
    if not spec.active:
        raise ValueError("constraint_residual needs an upright constraint")
    return residual_from_rotation(fk(model, q).rotation, spec)


def constraint_jacobian_batch(frames: np.ndarray, J: np.ndarray) -> np.ndarray:
    """d[roll, pitch]/dq, (N, 2, dof), through the angular Jacobian block.

    Roll and pitch depend only on the bottom row of the tool rotation, whose
    derivative along joint i is (w_x R[1] - w_y R[0]) with w the joint's
    angular velocity column.
    """
    R = frames[:, -1, :3, :3]
    wx = J[:, 3, :]
    wy = J[:, 4, :]
    dR2 = wx[:, :, None] * R[:, None, 1, :] - wy[:, :, None] * R[:, None, 0, :]  # (N, dof, 3)
    r20, r21, r22 = R[:, 2, 0], R[:, 2, 1], R[:, 2, 2]
    den = np.maximum(r21**2 + r22**2, 1e-12)
    droll = (r22[:, None] * dR2[:, :, 1] - r21[:, None] * dR2[:, :, 2]) / den[:, None]
    dpitch = -dR2[:, :, 0] / np.sqrt(np.maximum(1.0 - r20**2, 1e-12))[:, None]
    return np.stack([droll, dpitch], axis=1)


def project_batch(model: RobotModel, Q, spec: ConstraintSpec = UPRIGHT):
    """Newton projection of each row; returns (Q', success mask, iterations)."""
    Q = np.array(Q, dtype=float).reshape(-1, model.dof)
    n = len(Q)
    ok = np.zeros(n, dtype=bool)
    failed = ~model.within_limits(Q)
    iters = np.zeros(n, dtype=int)
    if not spec.active:
        return Q, ~failed, iters
    eye = PROJECTION_DAMPING * np.eye(2)
    for it in range(spec.max_iter + 1):
        idx = np.nonzero(~ok & ~failed)[0]
        if idx.size == 0:
            break
        F = model.frames(Q[idx])
        r = residual_from_rotation(F[:, -1, :3, :3], spec)
        bad = ~np.all(np.isfinite(r), axis=1)
        failed[idx[bad]] = True
        done = ~bad & (np.linalg.norm(r, axis=1) <= spec.tol_project)
        ok[idx[done]] = True
        go = ~bad & ~done
        if it == spec.max_iter or not np.any(go):
            break
        idx, F, r = idx[go], F[go], r[go]
        Jc = constraint_jacobian_batch(F, model.jacobian_batch(None, frames=F))
        JJt = Jc @ Jc.transpose(0, 2, 1) + eye
        dq = (Jc.transpose(0, 2, 1) @ np.linalg.solve(JJt, r[:, :, None]))[:, :, 0]
        Qn = Q[idx] - dq
        fin = np.all(np.isfinite(Qn), axis=1) & model.within_limits(Qn)
        failed[idx[~fin]] = True
        Q[idx[fin]] = Qn[fin]
        iters[idx[fin]] += 1
    failed |= ~ok
    return Q, ok & ~failed, iters


def project(model: RobotModel, q, spec: ConstraintSpec = UPRIGHT) -> np.ndarray:
    """Project one configuration onto the constraint manifold.

    Returns ``q`` unchanged if it already satisfies the tolerance; raises
    :class:`ProjectionFailure` otherwise when Newton does not converge inside
    the joint limits.
    """
    q = np.asarray(q, dtype=float)
    if spec.active:
        r = constraint_residual(model, q, spec)
        if np.linalg.norm(r) <= spec.tol_project and model.within_limits(q):
            return q.copy()
    Q, ok, _ = project_batch(model, q[None], spec)
    if not ok[0]:
        raise ProjectionFailure("projection did not converge within joint limits")
    return Q[0]


def valid_states(model: RobotModel, w: Workspace, Q, spec: ConstraintSpec, attached=None, ignore=()):
    Q = np.atleast_2d(Q)
    F = model.frames(Q)
    ok = model.within_limits(Q, tol=1e-9)
    if spec.active:
        r = residual_from_rotation(F[:, -1, :3, :3], spec)
        ok &= np.linalg.norm(r, axis=1) <= spec.tol_valid
    if np.any(ok):
        ok[ok] = collision_free_batch(model, w, Q[ok], attached, ignore, frames=F[ok])
    return ok


def interpolate(qa, qb, step: float = STEP) -> np.ndarray:
    """States from qa to qb inclusive with spacing <= step."""
    d = float(np.linalg.norm(qb - qa))
    n = max(1, math.ceil(d / step))
    t = np.linspace(0.0, 1.0, n + 1)[:, None]
    return qa + t * (qb - qa)


def path_is_valid(model: RobotModel, w: Workspace, path: Path, spec: ConstraintSpec,
                  attached=None, ignore=(), step: float = STEP) -> bool:
    """Sweep every segment at <= step and check constraint + collisions."""
    pts = [path.waypoints[:1]]
    for a, b in zip(path.waypoints[:-1], path.waypoints[1:]):
        pts.append(interpolate(a, b, step)[1:])
    Q = np.vstack(pts)
    return bool(np.all(valid_states(model, w, Q, spec, attached, ignore)))


def max_path_residual(model: RobotModel, path: Path, spec: ConstraintSpec = UPRIGHT, step: float = STEP) -> float:
    pts = [path.waypoints[:1]] + [interpolate(a, b, step)[1:] for a, b in zip(path.waypoints[:-1], path.waypoints[1:])]
    Q = np.vstack(pts)
    r = residual_from_rotation(model.fk_batch(Q)[:, :3, :3], spec)
    return float(np.linalg.norm(r, axis=1).max())


# -- roadmap ---------------------------------------------------------------------------


@dataclass
class Roadmap:
    """PRM* over projected samples with lazily validated edges."""

    model: RobotModel
    w: Workspace
    spec: ConstraintSpec
    attached: str | None = None
    ignore: tuple = ()
    step: float = STEP
    nodes: list = field(default_factory=list)
    edges: dict = field(default_factory=dict)  # validated: (i, j) -> waypoints
    candidates: dict = field(default_factory=dict)  # i -> {j: cost}
    rejected: set = field(default_factory=set)
    goals: list = field(default_factory=list)

    @property
    def k_prm(self) -> float:
        return math.e * (1.0 + 1.0 / self.model.dof)

    def k_neighbors(self, n: int) -> int:
        return max(1, math.ceil(self.k_prm * math.log(max(n, 2))))

    def add_node(self, q) -> int:
        i = len(self.nodes)
        self.nodes.append(np.asarray(q, dtype=float))
        self.candidates[i] = {}
        if i == 0:
            return i
        X = np.array(self.nodes[:-1])
        d = np.linalg.norm(X - q, axis=1)
        k = min(self.k_neighbors(len(self.nodes)), len(d))
        for j in np.argpartition(d, k - 1)[:k]:
            j = int(j)
            self.candidates[i][j] = float(d[j])
            self.candidates[j][i] = float(d[j])
        return i

    def add_goal(self, q) -> int:
        i = self.add_node(q)
        self.goals.append(i)
        return i

    def check_edge(self, i: int, j: int):
        key = (min(i, j), max(i, j))
        if key in self.edges:
            wp = self.edges[key]
            return wp if key[0] == i else wp[::-1]
        if key in self.rejected:
            return None
        wp = self._sweep(self.nodes[key[0]], self.nodes[key[1]])
        if wp is None:
            self.rejected.add(key)
            self.candidates[i].pop(j, None)
            self.candidates[j].pop(i, None)
            return None
        self.edges[key] = wp
        return wp if key[0] == i else wp[::-1]

    def _sweep(self, qa, qb):
        for density in (2, 8):
            raw = interpolate(qa, qb, self.step / density)
            if self.spec.active and len(raw) > 2:
                inner, ok, _ = project_batch(self.model, raw[1:-1], self.spec)
                if not np.all(ok):
                    return None
                pts = np.vstack([qa, inner, qb])
            else:
                pts = raw
            gaps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            if np.all(gaps <= self.step + 1e-12):
                break
        else:
            return None
        if not self.spec.active:
            # thin to the sweep resolution; interpolation stays on the segment
            pts = interpolate(qa, qb, self.step)
        ok = valid_states(self.model, self.w, pts, self.spec, self.attached, self.ignore)
        if not np.all(ok):
            return None
        return pts

    def shortest(self, start: int = 0):
        """A* on candidate edges (cost = joint distance) to the nearest goal."""
        if not self.goals:
            return None
        G = np.array([self.nodes[g] for g in self.goals])

        def h(i):
            return float(np.min(np.linalg.norm(G - self.nodes[i], axis=1)))

        goals = set(self.goals)
        best = {start: 0.0}
        parent = {start: None}
        heap = [(h(start), 0.0, start)]
        closed = set()
        while heap:
            _, g, i = heapq.heappop(heap)
            if i in closed:
                continue
            closed.add(i)
            if i in goals:
                out = []
                while i is not None:
                    out.append(i)
                    i = parent[i]
                return out[::-1]
            for j, c in sorted(self.candidates[i].items()):
                ng = g + c
                if ng < best.get(j, math.inf) - 1e-15:
                    best[j] = ng
                    parent[j] = i
                    heapq.heappush(heap, (ng + h(j), ng, j))
        return None

    def solve(self, start: int = 0):
        """Repeated lazy search; returns a validated Path or None."""
        while True:
            nodes = self.shortest(start)
            if nodes is None:
                return None
            pieces = [self.nodes[nodes[0]][None]]
            for a, b in zip(nodes[:-1], nodes[1:]):
                wp = self.check_edge(a, b)
                if wp is None:
                    break
                pieces.append(wp[1:])
            else:
                return Path(np.vstack(pieces))

    def grow(self, n: int, rng: np.random.Generator, batch: int = 32) -> int:
        """Draw ``n`` raw samples, project and add the valid ones. Returns nodes added."""
        added = 0
        drawn = 0
        while drawn < n:
            m = min(batch, n - drawn)
            drawn += m
            S = self.model.random_config(rng, m)
            S, ok, _ = project_batch(self.model, S, self.spec)
            S = S[ok]
            if len(S) == 0:
                continue
            free = valid_states(self.model, self.w, S, self.spec, self.attached, self.ignore)
            for q in S[free]:
                self.add_node(q)
                added += 1
        return added


def plan_between(model: RobotModel, w: Workspace, q0, goals, spec: ConstraintSpec = UPRIGHT,
                 budget: Budget = Budget(), seed=0, attached=None, ignore=()) -> Path:
    """Roadmap path from ``q0`` to any of the goal configurations."""
    goals = np.atleast_2d(goals)
    rm = Roadmap(model, w, spec, attached, tuple(ignore))
    rm.add_node(np.asarray(q0, dtype=float))
    for g in goals:
        if np.linalg.norm(g - q0) < 1e-12:
            return Path(np.asarray(q0, dtype=float)[None])
        rm.add_goal(g)
    rng = np.random.default_rng(seed)
    t0 = time.monotonic()
    drawn = 0
    while True:
        path = rm.solve()
        if path is not None:
            return path
        if drawn >= budget.samples or (budget.time_s is not None and time.monotonic() - t0 > budget.time_s):
            raise PlanningFailure("motion", "roadmap exhausted its sample budget")
        n = min(budget.samples_per_trial, budget.samples - drawn)
        rm.grow(n, rng)
        drawn += n


def _check_start(model, w, q0, spec, attached, ignore):
    if not valid_states(model, w, q0, spec, attached, ignore)[0]:
        raise ValueError("start configuration is in collision or off the constraint manifold")


def goal_configurations(model: RobotModel, w: Workspace, goal: Transform, spec: ConstraintSpec, q0,
                        seed, objective: IkObjective = IkObjective(), restarts: int = 16,
                        attached=None, ignore=()) -> np.ndarray:
    """Valid IK solutions for ``goal`` sorted by joint distance from ``q0``."""
    sols, _, _ = ik_solutions(model, goal, objective, restarts, seed)
    if len(sols) == 0:
        return sols
    sols = sols[valid_states(model, w, sols, spec, attached, ignore)]
    order = np.argsort(np.linalg.norm(sols - q0, axis=1), kind="stable")
    return sols[order]


def plan_constrained(model: RobotModel, w: Workspace, q0, goal: Transform,
                     spec: ConstraintSpec = UPRIGHT, budget: Budget = Budget(), seed=0,
                     attached=None, ignore=(), objective: IkObjective = IkObjective(),
                     trials: int = 10, restarts: int = 16) -> Path:
    """IK goal sampling plus roadmap growth, retried over ``trials`` goal draws.

    The event sequence (sample batches, goal insertions) does not depend on
    the budget, which only decides when to stop; a larger budget therefore
    never turns a success into a failure.
    """
    q0 = np.asarray(q0, dtype=float)
    _check_start(model, w, q0, spec, attached, ignore)
    dp, dr = pose_error(fk(model, q0), goal)
    if dp <= POS_TOL and dr <= ROT_TOL:
        return Path(q0[None])
    seeds = as_seed_sequence(seed).spawn(trials + 1)
    rng = np.random.default_rng(seeds[-1])
    rm = Roadmap(model, w, spec, attached, tuple(ignore))
    rm.add_node(q0)
    tried: list[np.ndarray] = []
    found_ik = False
    t0 = time.monotonic()
    drawn = 0

    def out_of_budget():
        return drawn >= budget.samples or (
            budget.time_s is not None and time.monotonic() - t0 > budget.time_s
        )

    for trial in range(trials):
        cands = goal_configurations(model, w, goal, spec, q0, seeds[trial], objective, restarts,
                                    attached, ignore)
        fresh = [c for c in cands if all(np.linalg.norm(c - t) > 1e-3 for t in tried)]
        if fresh:
            found_ik = True
            tried.append(fresh[0])
            rm.add_goal(fresh[0])
        if not found_ik:
            continue
        path = rm.solve()
        if path is not None:
            return path
        if out_of_budget():
            break
        n = min(budget.samples_per_trial, budget.samples - drawn)
        rm.grow(n, rng)
        drawn += n
        path = rm.solve()
        if path is not None:
            return path
    if not found_ik:
        raise PlanningFailure("ik", "no valid inverse-kinematics goal configuration")
    while not out_of_budget():
        n = min(budget.samples_per_trial, budget.samples - drawn)
        rm.grow(n, rng)
        drawn += n
        path = rm.solve()
        if path is not None:
            return path
    raise PlanningFailure("motion", "roadmap exhausted its sample budget")


def write_path_csv(path: Path, model: RobotModel, out, spec: ConstraintSpec = UPRIGHT) -> None:
    """One row per waypoint: index, q1..qN, roll and pitch residuals."""
    R = model.fk_batch(path.waypoints)[:, :3, :3]
    res = residual_from_rotation(R, spec)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t"] + [f"q{i + 1}" for i in range(model.dof)] + ["roll", "pitch"])
        for k, (q, r) in enumerate(zip(path.waypoints, res)):
            wr.writerow([k] + [f"{v:.9f}" for v in q] + [f"{r[0]:.9f}", f"{r[1]:.9f}"])
