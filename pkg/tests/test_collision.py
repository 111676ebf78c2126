import numpy as np
import pytest

from labtamp.collision import collision_free, collision_free_batch, segment_point_distance
from labtamp.cplanner import UNCONSTRAINED, Path, interpolate, path_is_valid
from labtamp.kinematics import fk
from labtamp.scene import Workspace, load_scene, scene_from_dict


def test_empty_workspace_is_free(arm8, rng):
    Q = arm8.random_config(rng, 200)
    assert np.all(collision_free_batch(arm8, Workspace(), Q))


def test_sphere_at_tool_collides(arm8, rng):
    q = arm8.random_config(rng)
    p = fk(arm8, q).translation
    w = scene_from_dict({"obstacles": [{"id": "ball", "type": "sphere", "center": list(p), "radius": 0.02}]})
    assert not collision_free(arm8, w, q)


def test_segment_point_distance_oracle(rng):
    A = rng.normal(size=(100, 3))
    B = rng.normal(size=(100, 3))
    c = rng.normal(size=3)
    t = np.linspace(0.0, 1.0, 20001)
    brute = [np.min(np.linalg.norm(a + t[:, None] * (b - a) - c, axis=1)) for a, b in zip(A, B)]
    assert np.allclose(segment_point_distance(A, B, c), brute, atol=1e-7)


def test_thin_box_between_free_endpoints(arm7):
    # a joint-1 sweep carries the tool through a thin wall that neither endpoint touches
    qa = np.array([-0.6, 0.3, 0.0, -1.8, 0.0, 2.1, 0.8])
    qb = qa.copy()
    qb[0] = 0.6
    pa, pb = fk(arm7, qa).translation, fk(arm7, qb).translation
    assert pa[1] < 0 < pb[1]
    z = 0.5 * (pa[2] + pb[2])
    w = scene_from_dict({"obstacles": [{"id": "wall", "type": "box",
                                        "min": [0.3, -0.005, z - 0.1], "max": [1.0, 0.005, z + 0.1]}]})
    assert collision_free(arm7, w, qa) and collision_free(arm7, w, qb)
    assert not path_is_valid(arm7, w, Path(np.array([qa, qb])), UNCONSTRAINED)
    assert not np.all(collision_free_batch(arm7, w, interpolate(qa, qb)))


def test_unknown_attached_vessel(arm8):
    with pytest.raises(KeyError):
        collision_free(arm8, load_scene("solubility"), np.zeros(8), attached="nope")


def test_attached_vessel_is_checked(arm8):
    q = np.array([0.0, 0.2, 0.0, -2.0, 0.0, 2.2, 0.8, 0.0])
    T = fk(arm8, q)
    # a small ball beside the tool, inside the footprint of a tall held beaker
    c = T.translation + 0.08 * T.rotation[:, 2]
    w = scene_from_dict({
        "vessels": [{"id": "tall", "kind": "beaker", "pose": {"xyz": [-0.5, -0.5, 0.0]},
                     "capacity_ml": 100.0, "height_m": 0.2, "radius_m": 0.03}],
        "obstacles": [{"id": "ball", "type": "sphere", "center": list(c), "radius": 0.01}],
    })
    assert collision_free(arm8, w, q)
    assert not collision_free(arm8, w, q, attached="tall")
    assert collision_free(arm8, w, q, attached="tall", ignore=("ball",))
