import numpy as np
import pytest

from labtamp.cplanner import (
    UNCONSTRAINED,
    UPRIGHT,
    Budget,
    ConstraintSpec,
    Path,
    PlanningFailure,
    ProjectionFailure,
    Roadmap,
    constraint_jacobian_batch,
    constraint_residual,
    goal_configurations,
    interpolate,
    max_path_residual,
    path_is_valid,
    plan_constrained,
    project,
    write_path_csv,
)
from labtamp.kinematics import POS_TOL, ROT_TOL, fk, solve_ik
from labtamp.scene import Workspace, scene_from_dict
from labtamp.transforms import Transform, pose_error


def ik(model, xyz, rpy=(0.0, 0.0, 0.0), seed=0):
    return solve_ik(model, Transform.from_xyz_rpy(xyz, rpy), seed=seed)


@pytest.fixture(scope="module")
def level_q8(arm8):
    return ik(arm8, (0.45, -0.1, 0.3))


def test_spec_invariants():
    assert UPRIGHT.dim == 2 and UNCONSTRAINED.dim == 0
    with pytest.raises(ValueError):
        ConstraintSpec(tol_project=0.0)
    with pytest.raises(ValueError):
        ConstraintSpec(tol_valid=-0.1)


def test_residual_level_and_rolled(arm8, level_q8):
    assert np.linalg.norm(constraint_residual(arm8, level_q8)) <= 2e-3
    q = ik(arm8, (0.45, -0.1, 0.3), (0.2, 0.0, 0.4))
    assert np.allclose(constraint_residual(arm8, q), [0.2, 0.0], atol=2e-3)
    shifted = ConstraintSpec(nominal_roll=0.2)
    assert np.allclose(constraint_residual(arm8, q, shifted), [0.0, 0.0], atol=2e-3)


def test_residual_wraps_angle():
    from labtamp.cplanner import residual_from_rotation
    from labtamp.transforms import rpy_to_matrix

    r = residual_from_rotation(rpy_to_matrix(-3.0, 0.0, 0.0), ConstraintSpec(nominal_roll=3.0))
    assert r[0] == pytest.approx(2 * np.pi - 6.0)


def test_constraint_jacobian_matches_finite_differences(arm8, rng):
    h = 1e-6
    for _ in range(20):
        q = arm8.random_config(rng)
        F = arm8.frames(q)
        Jc = constraint_jacobian_batch(F, arm8.jacobian_batch(None, frames=F))[0]
        fd = np.zeros_like(Jc)
        for i in range(arm8.dof):
            dq = np.zeros(arm8.dof)
            dq[i] = h
            fd[:, i] = (constraint_residual(arm8, q + dq) - constraint_residual(arm8, q - dq)) / (2 * h)
        assert np.max(np.abs(Jc - fd)) <= 1e-5


def test_project_on_manifold_is_identity(arm8, level_q8):
    q = project(arm8, level_q8)
    q2 = project(arm8, q)
    assert np.array_equal(q2, q)


def test_project_pitch_violation(arm8):
    q = ik(arm8, (0.5, 0.0, 0.35), (0.0, 0.3, 0.0))
    r0 = float(np.linalg.norm(constraint_residual(arm8, q)))
    qp = project(arm8, q)
    assert np.linalg.norm(constraint_residual(arm8, qp)) <= 1e-4
    assert np.linalg.norm(qp - q) <= 10 * r0
    assert arm8.within_limits(qp)


def test_project_near_singularity_never_nan(arm8):
    q = ik(arm8, (0.5, 0.0, 0.4), (0.0, np.pi / 2 - 1e-9, 0.0))
    try:
        qp = project(arm8, q)
    except ProjectionFailure:
        return
    assert np.all(np.isfinite(qp))


def test_goal_at_start_gives_single_waypoint(arm8, level_q8):
    path = plan_constrained(arm8, Workspace(), level_q8, fk(arm8, level_q8))
    assert len(path) == 1 and path.cost == 0.0


def test_lateral_move_stays_upright(arm8, level_q8):
    start = fk(arm8, level_q8)
    goal = Transform(start.rotation, start.translation + np.array([0.0, 0.3, 0.0]))
    path = plan_constrained(arm8, Workspace(), level_q8, goal, seed=1)
    dp, dr = pose_error(fk(arm8, path.end), goal)
    assert dp <= POS_TOL and dr <= ROT_TOL
    assert max_path_residual(arm8, path) <= 0.1
    assert path_is_valid(arm8, Workspace(), path, UPRIGHT)
    steps = np.linalg.norm(np.diff(path.waypoints, axis=0), axis=1)
    assert np.all(steps <= 0.05 + 1e-12)


def test_planner_is_deterministic(arm8, level_q8):
    goal = Transform.from_xyz_rpy((0.4, 0.2, 0.25))
    a = plan_constrained(arm8, Workspace(), level_q8, goal, seed=5)
    b = plan_constrained(arm8, Workspace(), level_q8, goal, seed=5)
    assert np.array_equal(a.waypoints, b.waypoints)


def test_inverted_goal_fails(arm8, level_q8):
    goal = Transform.from_xyz_rpy((0.45, 0.1, 0.3), (np.pi, 0.0, 0.0))
    with pytest.raises(PlanningFailure):
        plan_constrained(arm8, Workspace(), level_q8, goal, budget=Budget(samples=200), trials=2)


def test_unreachable_goal_reports_ik(arm8, level_q8):
    with pytest.raises(PlanningFailure) as info:
        plan_constrained(arm8, Workspace(), level_q8, Transform.from_xyz_rpy((3.0, 0, 0)),
                         trials=2, restarts=4)
    assert info.value.reason == "ik"


def test_start_off_manifold_rejected(arm8):
    q = ik(arm8, (0.5, 0.0, 0.35), (0.0, 0.5, 0.0))
    with pytest.raises(ValueError):
        plan_constrained(arm8, Workspace(), q, Transform.from_xyz_rpy((0.4, 0.0, 0.3)))


def test_success_monotone_in_budget(arm7):
    w = scene_from_dict({"obstacles": [{"id": "wall", "type": "box",
                                        "min": [0.25, -0.02, 0.0], "max": [0.8, 0.02, 0.45]}]})
    q0 = goal_configurations(arm7, w, Transform.from_xyz_rpy((0.45, -0.25, 0.3)), UPRIGHT,
                             np.zeros(7), seed=0)[0]
    goals = [Transform.from_xyz_rpy((0.45, 0.25, z)) for z in (0.2, 0.3)]
    prev = None
    for samples in (0, 25, 100, 400):
        ok = set()
        for gi, g in enumerate(goals):
            for seed in range(2):
                try:
                    plan_constrained(arm7, w, q0, g, budget=Budget(samples=samples), seed=seed, trials=3)
                    ok.add((gi, seed))
                except PlanningFailure:
                    pass
        if prev is not None:
            assert prev <= ok
        prev = ok


def test_roadmap_nodes_and_edges_are_valid(arm8, level_q8, rng):
    rm = Roadmap(arm8, Workspace(), UPRIGHT)
    rm.add_node(level_q8)
    rm.grow(40, rng)
    for q in rm.nodes:
        assert np.linalg.norm(constraint_residual(arm8, q)) <= 1e-4 + 1e-12
    rm.add_goal(rm.nodes[-1])
    rm.solve()
    for wp in rm.edges.values():
        assert max_path_residual(arm8, Path(wp)) <= 0.1


def test_k_nearest_schedule(arm8):
    rm = Roadmap(arm8, Workspace(), UPRIGHT)
    assert rm.k_prm == pytest.approx(np.e * (1 + 1 / 8))
    assert rm.k_neighbors(100) == int(np.ceil(rm.k_prm * np.log(100)))


def test_interpolate_step_bound(rng):
    a, b = rng.normal(size=7), rng.normal(size=7)
    pts = interpolate(a, b)
    assert np.array_equal(pts[0], a) and np.allclose(pts[-1], b)
    assert np.all(np.linalg.norm(np.diff(pts, axis=0), axis=1) <= 0.05 + 1e-12)


def test_path_csv(arm8, level_q8, tmp_path):
    out = tmp_path / "p.csv"
    write_path_csv(Path(np.array([level_q8, level_q8])), arm8, out)
    lines = out.read_text().splitlines()
    assert lines[0] == "t,q1,q2,q3,q4,q5,q6,q7,q8,roll,pitch"
    assert len(lines) == 3 and lines[1].startswith("0,")
