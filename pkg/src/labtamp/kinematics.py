"""Serial-manipulator kinematics for the 7- and 8-DoF arm models.

Joints follow the modified (Craig) DH convention::

    T_i = RotX(alpha) @ TransX(a) @ RotZ(q_i + theta_offset) @ TransZ(d)

All heavy routines are vectorized over a leading batch axis so that IK
restarts and roadmap edge checks can be evaluated together.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from labtamp.transforms import Transform, pose_error

POS_TOL = 1e-4
ROT_TOL = 1e-3
IK_DAMPING = 1e-3
IK_MAX_ITER = 200
IK_MAX_STEP = 0.5
STALL_ITERS = 25

_DATA = Path(__file__).parent / "data"


class DimensionError(ValueError):
    pass


class IkFailure(RuntimeError):
    """No restart converged; ``residual`` is the best (pos, rot) error seen."""

    def __init__(self, residual: tuple[float, float]):
        super().__init__(f"IK failed; best residual pos={residual[0]:.3g} m rot={residual[1]:.3g} rad")
        self.residual = residual


@dataclass(frozen=True)
class DHJoint:
    a: float
    d: float
    alpha: float
    theta_offset: float = 0.0
    limits: tuple[float, float] = (-np.pi, np.pi)


@dataclass(frozen=True, eq=False)
class RobotModel:
    joints: tuple[DHJoint, ...]
    tool: Transform = field(default_factory=Transform.identity)
    base: Transform = field(default_factory=Transform.identity)
    link_radius: float = 0.05
    name: str = "robot"

    def __post_init__(self):
        for j in self.joints:
            if not j.limits[0] < j.limits[1]:
                raise ValueError(f"joint limits must satisfy lower < upper, got {j.limits}")
        consts = []
        for j in self.joints:
            ca, sa = np.cos(j.alpha), np.sin(j.alpha)
            C = np.array(
                [[1.0, 0.0, 0.0, j.a], [0.0, ca, -sa, 0.0], [0.0, sa, ca, 0.0], [0.0, 0.0, 0.0, 1.0]]
            )
            consts.append(C)
        object.__setattr__(self, "_consts", np.array(consts))
        object.__setattr__(self, "_d", np.array([j.d for j in self.joints]))
        object.__setattr__(self, "_offset", np.array([j.theta_offset for j in self.joints]))
        lims = np.array([j.limits for j in self.joints], dtype=float).reshape(-1, 2)
        object.__setattr__(self, "lower", lims[:, 0])
        object.__setattr__(self, "upper", lims[:, 1])

    @property
    def dof(self) -> int:
        return len(self.joints)

    def within_limits(self, q, tol: float = 0.0):
        q = np.asarray(q)
        return np.all((q >= self.lower - tol) & (q <= self.upper + tol), axis=-1)

    def clip(self, q):
        return np.clip(q, self.lower, self.upper)

    def random_config(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        shape = (self.dof,) if n is None else (n, self.dof)
        return rng.uniform(self.lower, self.upper, size=shape)

    def with_base(self, base: Transform) -> RobotModel:
        return RobotModel(self.joints, self.tool, base, self.link_radius, self.name)

    # -- batched primitives -------------------------------------------------

    def _check(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if q.shape[-1] != self.dof:
            raise DimensionError(f"expected {self.dof} joint values, got {q.shape[-1]}")
        return q

    def frames(self, Q) -> np.ndarray:
        """Joint frames for a batch: (N, dof + 2, 4, 4).

        Index 0 is the base, 1..dof the joint frames, dof + 1 the tool.
        """
        Q = self._check(Q)
        Q = Q.reshape(-1, self.dof)
        n = Q.shape[0]
        out = np.empty((n, self.dof + 2, 4, 4))
        T = np.broadcast_to(self.base.matrix(), (n, 4, 4)).copy()
        out[:, 0] = T
        theta = Q + self._offset
        c, s = np.cos(theta), np.sin(theta)
        for i in range(self.dof):
            C = self._consts[i]
            L = np.empty((n, 4, 4))
            L[:, :, 0] = c[:, i, None] * C[:, 0] + s[:, i, None] * C[:, 1]
            L[:, :, 1] = -s[:, i, None] * C[:, 0] + c[:, i, None] * C[:, 1]
            L[:, :, 2] = C[:, 2]
            L[:, :, 3] = self._d[i] * C[:, 2] + C[:, 3]
            T = T @ L
            out[:, i + 1] = T
        out[:, -1] = T @ self.tool.matrix()
        return out

    def fk_batch(self, Q) -> np.ndarray:
        return self.frames(Q)[:, -1]

    def jacobian_batch(self, Q, frames: np.ndarray | None = None) -> np.ndarray:
        """Geometric Jacobian at the tool point, (N, 6, dof): rows [v; w]."""
        F = self.frames(Q) if frames is None else frames
        z = F[:, 1:-1, :3, 2]
        p = F[:, 1:-1, :3, 3]
        pe = F[:, -1, None, :3, 3]
        Jv = np.cross(z, pe - p)
        return np.concatenate([Jv, z], axis=2).transpose(0, 2, 1)


def fk(model: RobotModel, q) -> Transform:
    q = np.asarray(q, dtype=float)
    if q.ndim != 1:
        raise DimensionError("fk expects a single configuration")
    return Transform.from_matrix(model.fk_batch(q)[0])


def jacobian(model: RobotModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim != 1:
        raise DimensionError("jacobian expects a single configuration")
    return model.jacobian_batch(q)[0]


def manipulability_batch(J: np.ndarray) -> np.ndarray:
    """sqrt(det(J J^T)) as a product of singular values.

    Singular values at round-off level are zeroed, so singular
    configurations give exactly 0 rather than sqrt of a tiny determinant.
    """
    J = np.asarray(J, dtype=float)
    rows, cols = J.shape[-2:]
    if rows > cols:
        return np.zeros(J.shape[:-2])
    s = np.linalg.svd(J, compute_uv=False)
    tiny = s[..., :1] * max(rows, cols) * np.finfo(float).eps
    return np.prod(np.where(s > tiny, s, 0.0), axis=-1)


def manipulability(model: RobotModel, q) -> float:
    """Yoshikawa measure sqrt(det(J J^T))."""
    return float(manipulability_batch(jacobian(model, q)[None])[0])


# -- inverse kinematics -------------------------------------------------------


class IkMode(str, Enum):
    POSE_ERROR_ONLY = "pose_error_only"
    POSE_ERROR_PLUS_MANIPULABILITY = "pose_error_plus_manipulability"


@dataclass(frozen=True)
class IkObjective:
    mode: IkMode = IkMode.POSE_ERROR_ONLY
    weight: float = 0.0

    def __post_init__(self):
        if self.weight < 0:
            raise ValueError("manipulability weight must be >= 0")
        if self.mode == IkMode.POSE_ERROR_ONLY and self.weight != 0.0:
            raise ValueError("weight must be 0 in pose_error_only mode")

    @classmethod
    def manipulability(cls, weight: float = 1.0) -> IkObjective:
        return cls(IkMode.POSE_ERROR_PLUS_MANIPULABILITY, weight)


def _rotvec_batch(R: np.ndarray) -> np.ndarray:
    """Batched rotation log; the near-pi branch falls back to the scalar routine."""
    from labtamp.transforms import rotation_log

    cos = np.clip((np.trace(R, axis1=1, axis2=2) - 1.0) / 2.0, -1.0, 1.0)
    ang = np.arccos(cos)
    w = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    sin = np.sin(ang)
    scale = np.where(ang < 1e-9, 0.5, ang / (2.0 * np.where(sin == 0, 1.0, sin)))
    out = w * scale[:, None]
    for i in np.nonzero(np.pi - ang < 1e-6)[0]:
        out[i] = rotation_log(R[i])
    return out


def pose_residual_batch(model: RobotModel, Q, target: Transform):
    """Returns (error 6-vectors, frames) for a batch of configurations."""
    F = model.frames(Q)
    T = F[:, -1]
    ep = target.translation[None] - T[:, :3, 3]
    er = _rotvec_batch(target.rotation[None] @ np.swapaxes(T[:, :3, :3], 1, 2))
    return np.concatenate([ep, er], axis=1), F


def ik_batch(model: RobotModel, target: Transform, Q0: np.ndarray, max_iter: int = IK_MAX_ITER,
             damping: float = IK_DAMPING):
    """Damped least-squares Newton from each row of ``Q0``.

    Returns (Q, converged mask, pos err, rot err).
    """
    Q = model.clip(np.array(Q0, dtype=float).reshape(-1, model.dof))
    n = Q.shape[0]
    active = np.ones(n, dtype=bool)
    conv = np.zeros(n, dtype=bool)
    lam2 = damping**2
    eye = np.eye(6)
    best = np.full(n, np.inf)
    stale = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        e, F = pose_residual_batch(model, Q[idx], target)
        ok = (np.linalg.norm(e[:, :3], axis=1) <= POS_TOL) & (np.linalg.norm(e[:, 3:], axis=1) <= ROT_TOL)
        conv[idx[ok]] = True
        active[idx[ok]] = False
        # restarts stuck against joint limits are dropped early
        err = np.linalg.norm(e, axis=1)
        improved = err < 0.99 * best[idx]
        best[idx] = np.minimum(best[idx], err)
        stale[idx] = np.where(improved, 0, stale[idx] + 1)
        dead = stale[idx] > STALL_ITERS
        active[idx[dead]] = False
        keep = ~ok & ~dead
        if not np.any(keep):
            break
        idx, e, F = idx[keep], e[keep], F[keep]
        J = model.jacobian_batch(None, frames=F)
        JJt = J @ J.transpose(0, 2, 1) + lam2 * eye
        dq = (J.transpose(0, 2, 1) @ np.linalg.solve(JJt, e[:, :, None]))[:, :, 0]
        norm = np.linalg.norm(dq, axis=1, keepdims=True)
        dq *= np.minimum(1.0, IK_MAX_STEP / np.maximum(norm, 1e-12))
        Q[idx] = model.clip(Q[idx] + dq)
    e, _ = pose_residual_batch(model, Q, target)
    pe = np.linalg.norm(e[:, :3], axis=1)
    re = np.linalg.norm(e[:, 3:], axis=1)
    conv = (pe <= POS_TOL) & (re <= ROT_TOL)
    return Q, conv, pe, re


def as_seed_sequence(seed) -> np.random.SeedSequence:
    """Fresh SeedSequence for an int, int list, or SeedSequence.

    A SeedSequence is copied so spawning from it never depends on earlier spawns.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def _restart_seeds(model: RobotModel, restarts: int, seed) -> np.ndarray:
    children = as_seed_sequence(seed).spawn(restarts)
    return np.array([model.random_config(np.random.default_rng(c)) for c in children])


def objective_values(model: RobotModel, Q, pe, re, objective: IkObjective) -> np.ndarray:
    phi = pe**2 + re**2
    if objective.mode == IkMode.POSE_ERROR_PLUS_MANIPULABILITY:
        phi = phi - objective.weight * manipulability_batch(model.jacobian_batch(Q))
    return phi


def ik_solutions(model: RobotModel, target: Transform, objective: IkObjective = IkObjective(),
                 restarts: int = 16, seed=0, initial=None):
    """All converged restarts, ordered by (objective, restart index).

    ``initial`` optionally prepends warm-start configurations before the random
    restarts. Returns (solutions (M, dof), objective values, best residual).
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    Q0 = _restart_seeds(model, restarts, seed)
    if initial is not None:
        Q0 = np.vstack([np.atleast_2d(initial), Q0])
    Q, conv, pe, re = ik_batch(model, target, Q0)
    conv &= model.within_limits(Q)
    best = int(np.argmin(pe + re))
    residual = (float(pe[best]), float(re[best]))
    if not np.any(conv):
        return np.empty((0, model.dof)), np.empty(0), residual
    idx = np.nonzero(conv)[0]
    phi = objective_values(model, Q[idx], pe[idx], re[idx], objective)
    order = np.lexsort((idx, phi))
    return Q[idx[order]], phi[order], residual


def solve_ik(model: RobotModel, target: Transform, objective: IkObjective = IkObjective(),
             restarts: int = 16, seed=0) -> np.ndarray:
    """Multi-restart IK; returns the converged solution minimizing the objective.

    Raises :class:`IkFailure` when no restart converges.
    """
    sols, _, residual = ik_solutions(model, target, objective, restarts, seed)
    if len(sols) == 0:
        raise IkFailure(residual)
    return sols[0]


def pose_error_of(model: RobotModel, q, target: Transform) -> tuple[float, float]:
    return pose_error(fk(model, q), target)


# -- model files --------------------------------------------------------------


def model_from_dict(doc: dict) -> RobotModel:
    allowed = {"name", "dh", "tool", "base", "link_radius"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown robot model keys: {sorted(unknown)}")
    joints = []
    for i, row in enumerate(doc["dh"]):
        extra = set(row) - {"a", "d", "alpha", "theta_offset", "limits"}
        if extra:
            raise ValueError(f"dh[{i}]: unknown keys {sorted(extra)}")
        joints.append(
            DHJoint(
                a=float(row["a"]),
                d=float(row["d"]),
                alpha=float(row["alpha"]),
                theta_offset=float(row.get("theta_offset", 0.0)),
                limits=tuple(float(v) for v in row["limits"]),
            )
        )

    def pose(key):
        p = doc.get(key)
        if p is None:
            return Transform.identity()
        return Transform.from_xyz_rpy(p["xyz"], p.get("rpy", (0.0, 0.0, 0.0)))

    return RobotModel(
        tuple(joints),
        tool=pose("tool"),
        base=pose("base"),
        link_radius=float(doc.get("link_radius", 0.05)),
        name=str(doc.get("name", "robot")),
    )


def load_model(path) -> RobotModel:
    """Load a robot model JSON file; bare names resolve to the shipped fixtures."""
    p = Path(path)
    if not p.exists() and (_DATA / "robots" / p.name).exists():
        p = _DATA / "robots" / p.name
    if not p.exists() and (_DATA / "robots" / f"{p.name}.json").exists():
        p = _DATA / "robots" / f"{p.name}.json"
    with open(p, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))


def panda7() -> RobotModel:
    return load_model(_DATA / "robots" / "panda7.json")


def panda8() -> RobotModel:
    return load_model(_DATA / "robots" / "panda8.json")
