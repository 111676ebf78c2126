import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labtamp.execute import (
    POSE_NOISE_RAD,
    ExecutionConfig,
    ExecutionResult,
    RefinementFailure,
    execute_plan,
    perturb_pose,
)
from labtamp.scene import load_scene
from labtamp.taskplan import ExperimentAborted, StreamEnv, run_alg1
from labtamp.transforms import Transform
from labtamp.xdl import load_xdl


@pytest.fixture(scope="module")
def minimal_plan(arm8):
    w = load_scene("minimal")
    return run_alg1(load_xdl("minimal"), w, StreamEnv(arm8), seed=0), w


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.05), st.floats(0.0, 0.2))
def test_perturbation_is_bounded(seed, bound_m, bound_rad):
    pose = Transform.from_xyz_rpy((0.5, 0.1, 0.0), (0.0, 0.0, 0.3))
    p = perturb_pose(pose, np.random.default_rng(seed), bound_m, bound_rad)
    d = p.translation - pose.translation
    assert np.hypot(d[0], d[1]) <= bound_m + 1e-12 and d[2] == 0.0
    rel = p.rotation @ pose.rotation.T
    assert abs(math.atan2(rel[1, 0], rel[0, 0])) <= bound_rad + 1e-12
    assert np.allclose(rel[2], [0.0, 0.0, 1.0])


def test_yaw_bound_scales_with_noise():
    assert ExecutionConfig(noise_m=0.01).yaw_bound == pytest.approx(POSE_NOISE_RAD)
    assert ExecutionConfig(noise_m=0.0).yaw_bound == 0.0
    assert ExecutionConfig(noise_m=0.01, noise_rad=0.0).yaw_bound == 0.0


def test_zero_noise_follows_the_plan(arm8, minimal_plan):
    plan, w = minimal_plan
    res = execute_plan(plan, w, StreamEnv(arm8))
    assert [s.action for s in res.executed] == plan.actions()
    assert res.refinements == 0
    assert np.array_equal(res.q, plan.final_config())
    expect = plan.replay(w)
    for vid, v in expect.vessels.items():
        assert res.workspace.vessel(vid).pose.allclose(v.pose, atol=0.0)
    assert res.workspace.held is None
    # the pour is closed loop: at least the planned amount arrives
    assert res.workspace.vessel("dish").mass("water") >= 10.0 - 0.1
    assert res.goals_satisfied


def test_execution_is_deterministic(arm8, minimal_plan, tmp_path):
    plan, w = minimal_plan
    cfg = ExecutionConfig(noise_m=0.01)
    for d in ("a", "b"):
        execute_plan(plan, w, StreamEnv(arm8), cfg, seed=3).write(tmp_path / d)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_noise_campaign(arm8, solubility_plan):
    plan, w = solubility_plan
    ok = 0
    for seed in range(20):
        try:
            res = execute_plan(plan, w, StreamEnv(arm8), ExecutionConfig(noise_m=0.01), seed=seed)
        except RefinementFailure:
            continue
        ok += res.goals_satisfied
    assert ok >= 16


def test_large_noise_is_reported(arm8, minimal_plan, tmp_path):
    plan, w = minimal_plan
    failures = 0
    for seed in range(3):
        try:
            execute_plan(plan, w, StreamEnv(arm8), ExecutionConfig(noise_m=0.05), seed=seed)
        except RefinementFailure as exc:
            failures += 1
            assert isinstance(exc.partial, ExecutionResult)
            assert not exc.partial.goals_satisfied
            exc.partial.write(tmp_path / str(seed))
            assert "goals completed: 0/1" in (tmp_path / str(seed) / "summary.txt").read_text()
    assert failures > 0


def test_solubility_loop_records_series(arm8, solubility_plan, tmp_path):
    plan, w = solubility_plan
    res = execute_plan(plan, w, StreamEnv(arm8), seed=0)
    s = res.series["dish"]
    assert len(s) == res.repetitions[2] + 1
    assert s.pour_index == list(range(1, len(s) + 1))
    assert all(b > a for a, b in zip(s.water_g, s.water_g[1:]))
    res.write(tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "experiment_log_dish.csv" in names and "summary.txt" in names
    assert sum(n.startswith("pour_") for n in names) == len(s)


def test_abort_keeps_partial_data(arm8, solubility_plan):
    plan, w = solubility_plan
    g = plan.goals[2]
    plan.goals[2] = type(g)(**{**g.__dict__, "max_repeats": 1})
    try:
        with pytest.raises(ExperimentAborted) as info:
            execute_plan(plan, w, StreamEnv(arm8), seed=0)
    finally:
        plan.goals[2] = g
    partial = info.value.partial
    assert info.value.repetitions == 1
    assert len(partial.series["dish"]) == 2 and not partial.goals_satisfied
