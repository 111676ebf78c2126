"""Capsule-vs-primitive collision tests for the arm and a held vessel.

Every query reduces to the distance between a segment and a convex set.
That distance is convex along the segment, so a golden-section search over
the segment parameter converges to the exact minimum (to ~1e-11 m).
"""

from __future__ import annotations

import numpy as np

from labtamp.kinematics import RobotModel
from labtamp.scene import Box, Sphere, VesselState, Workspace

TOOL_RADIUS = 0.025
_GOLDEN_ITERS = 50
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def point_box_distance(P: np.ndarray, lo, hi) -> np.ndarray:
    d = np.maximum(np.maximum(np.asarray(lo) - P, 0.0), P - np.asarray(hi))
    return np.linalg.norm(d, axis=-1)


def point_cylinder_distance(P: np.ndarray, center, axis, radius: float, half_height: float) -> np.ndarray:
    """Distance to a solid finite cylinder (zero inside)."""
    rel = P - np.asarray(center)
    ax = rel @ np.asarray(axis)
    radial = np.linalg.norm(rel - ax[..., None] * np.asarray(axis), axis=-1)
    dr = np.maximum(radial - radius, 0.0)
    dz = np.maximum(np.abs(ax) - half_height, 0.0)
    return np.hypot(dr, dz)


def segment_point_distance(A: np.ndarray, B: np.ndarray, c) -> np.ndarray:
    AB = B - A
    denom = np.einsum("ij,ij->i", AB, AB)
    t = np.einsum("ij,ij->i", np.asarray(c) - A, AB) / np.where(denom > 0, denom, 1.0)
    t = np.clip(np.where(denom > 0, t, 0.0), 0.0, 1.0)
    return np.linalg.norm(A + t[:, None] * AB - np.asarray(c), axis=1)


def segment_convex_distance(A: np.ndarray, B: np.ndarray, point_distance) -> np.ndarray:
    """min over t in [0, 1] of point_distance(A + t (B - A)), row-wise."""
    AB = B - A

    def f(t):
        return point_distance(A + t[:, None] * AB)

    a = np.zeros(len(A))
    b = np.ones(len(A))
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(_GOLDEN_ITERS):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new = np.where(left, b - _INVPHI * (b - a), a + _INVPHI * (b - a))
        fnew = f(new)
        c, d = np.where(left, new, d), np.where(left, c, new)
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
    ends = np.minimum(point_distance(A), point_distance(B))
    return np.minimum(np.minimum(fc, fd), ends)


class _Shape:
    """A convex obstacle with a bounding sphere for cheap rejection."""

    def __init__(self, ident, point_distance, center, bound):
        self.id = ident
        self.point_distance = point_distance
        self.center = np.asarray(center, dtype=float)
        self.bound = float(bound)

    def segment_distance(self, A, B) -> np.ndarray:
        out = segment_point_distance(A, B, self.center) - self.bound
        near = out <= 0.2
        if np.any(near):
            out = out.copy()
            out[near] = segment_convex_distance(A[near], B[near], self.point_distance)
        return out


def _box_shape(b: Box) -> _Shape:
    lo, hi = np.array(b.lo), np.array(b.hi)
    return _Shape(b.id, lambda P: point_box_distance(P, lo, hi), (lo + hi) / 2, np.linalg.norm(hi - lo) / 2)


def _sphere_shape(s: Sphere) -> _Shape:
    c = np.array(s.center)
    return _Shape(s.id, lambda P: np.maximum(np.linalg.norm(P - c, axis=-1) - s.radius, 0.0), c, s.radius)


def _vessel_shape(v: VesselState) -> _Shape:
    axis = v.pose.rotation[:, 2]
    center = v.pose.translation + axis * v.height_m / 2
    hh = v.height_m / 2
    return _Shape(
        v.id,
        lambda P: point_cylinder_distance(P, center, axis, v.radius_m, hh),
        center,
        np.hypot(v.radius_m, hh),
    )


def workspace_shapes(w: Workspace, exclude=()) -> list[_Shape]:
    shapes = []
    for o in w.obstacles:
        if o.id in exclude:
            continue
        shapes.append(_box_shape(o) if isinstance(o, Box) else _sphere_shape(o))
    for v in w.vessels.values():
        if v.id in exclude or v.id == w.held:
            continue
        shapes.append(_vessel_shape(v))
    return shapes


def link_segments(model: RobotModel, frames: np.ndarray):
    """Capsule segments (A, B, radius) per configuration.

    The base column (frame 0 -> 1) is fixed and never checked.
    """
    origins = frames[:, 1:, :3, 3]
    A = origins[:, :-1]
    B = origins[:, 1:]
    radii = np.full(A.shape[1], model.link_radius)
    radii[-1] = TOOL_RADIUS
    return A, B, radii


def collision_free_batch(model: RobotModel, w: Workspace, Q, attached: str | None = None,
                         ignore=(), frames: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of collision-free configurations.

    ``attached`` names a held vessel: it moves with the tool (axis along tool
    z, centred on the tool point) and is bounded by its enclosing capsule.
    ``ignore`` lists ids excluded from the check (e.g. the vessel about to be
    grasped).
    """
    if attached is not None and attached not in w.vessels:
        raise KeyError(f"unknown attached vessel {attached!r}")
    F = model.frames(Q) if frames is None else frames
    n = F.shape[0]
    exclude = set(ignore) | ({attached} if attached else set())
    shapes = workspace_shapes(w, exclude)
    free = np.ones(n, dtype=bool)
    if not shapes:
        return free
    A, B, radii = link_segments(model, F)
    nseg = A.shape[1]
    Af = A.reshape(-1, 3)
    Bf = B.reshape(-1, 3)
    rf = np.tile(radii, n)
    if attached is not None:
        v = w.vessels[attached]
        tz = F[:, -1, :3, 2]
        tp = F[:, -1, :3, 3]
        half = v.height_m / 2
        Af = np.vstack([Af, tp - half * tz])
        Bf = np.vstack([Bf, tp + half * tz])
        rf = np.concatenate([rf, np.full(n, v.radius_m)])
        owner = np.concatenate([np.repeat(np.arange(n), nseg), np.arange(n)])
    else:
        owner = np.repeat(np.arange(n), nseg)
    for s in shapes:
        hit = s.segment_distance(Af, Bf) < rf
        if np.any(hit):
            free[owner[hit]] = False
    return free


def collision_free(model: RobotModel, w: Workspace, q, attached: str | None = None, ignore=()) -> bool:
    return bool(collision_free_batch(model, w, np.asarray(q)[None], attached, ignore)[0])
