import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from labtamp.transforms import (
    Transform,
    matrix_to_rpy,
    pose_error,
    rotation_exp,
    rotation_log,
    rpy_to_matrix,
)

angle = st.floats(-3.0, 3.0)
coord = st.floats(-2.0, 2.0)


@given(st.tuples(coord, coord, coord), st.tuples(angle, st.floats(-1.5, 1.5), angle))
def test_compose_with_inverse_is_identity(xyz, rpy):
    T = Transform.from_xyz_rpy(xyz, rpy)
    assert T.compose(T.inverse()).allclose(Transform.identity(), atol=1e-9)
    assert T.inverse().compose(T).allclose(Transform.identity(), atol=1e-9)


@given(st.floats(-3.1, 3.1), st.floats(-1.5, 1.5), st.floats(-3.1, 3.1))
def test_rpy_round_trip(r, p, y):
    R = rpy_to_matrix(r, p, y)
    assert np.allclose(rpy_to_matrix(*matrix_to_rpy(R)), R, atol=1e-9)


@settings(max_examples=50)
@given(st.tuples(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3)))
def test_log_exp_round_trip(w):
    w = np.array(w)
    if np.linalg.norm(w) >= np.pi - 1e-3:
        w = w / np.linalg.norm(w) * (np.pi - 1e-3)
    assert np.allclose(rotation_log(rotation_exp(w)), w, atol=1e-7)


def test_apply_and_matrix_agree():
    T = Transform.from_xyz_rpy((0.1, -0.2, 0.3), (0.3, -0.2, 1.0))
    p = np.array([0.5, 0.4, -0.1])
    assert np.allclose(T.apply(p), (T.matrix() @ np.append(p, 1.0))[:3])


def test_pose_error_of_pure_offsets():
    a = Transform.identity()
    b = Transform.from_xyz_rpy((0.3, 0.4, 0.0), (0.0, 0.0, 0.25))
    dp, dr = pose_error(a, b)
    assert np.isclose(dp, 0.5) and np.isclose(dr, 0.25)


def test_invalid_rotation_detected():
    T = Transform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    assert not T.is_valid()
