import numpy as np
import pytest

from labtamp.cplanner import UNCONSTRAINED, UPRIGHT, max_path_residual, path_is_valid
from labtamp.perception import BASE_CLEAR, load_solubility_models, turbidity_observe
from labtamp.scene import PourEffect, apply_effect, load_scene, scene_from_dict
from labtamp.taskplan import (
    DOMAIN,
    ActionSchema,
    ExperimentAborted,
    GoalPlanningError,
    Plan,
    PreconditionError,
    Problem,
    StreamEnv,
    absolute_goal,
    astar,
    bfs_plan_length,
    build_problem,
    goal_literals,
    ground,
    plan_goal,
    refine_task,
    run_alg1,
)
from labtamp.xdl import Goal, load_xdl, parse_xdl, to_goals

FIXTURES = [("minimal", "minimal"), ("solubility", "solubility"), ("recrystallization", "recrystallization")]


@pytest.fixture(scope="module")
def env8(arm8):
    return StreamEnv(arm8)


def test_schema_rejects_undeclared_parameter():
    with pytest.raises(ValueError):
        ActionSchema("bad", (("?v", "vessel"),), pre=(("holding", "?w"),), add=())


def test_problem_goal_must_be_fluent():
    with pytest.raises(ValueError):
        Problem({}, frozenset(), frozenset({("graspable", "x")}))


def test_goal_already_satisfied_gives_empty_plan(env8):
    w = load_scene("minimal")
    steps, w2, _ = plan_goal(w, frozenset({("hand-empty",)}), env8)
    assert steps == [] and w2 is w


def test_holding_goal_is_move_then_pick(env8):
    w = load_scene("minimal")
    goal = goal_literals(Goal("holding", "beaker1"))
    steps, w2, _ = plan_goal(w, goal, env8)
    assert [s.action for s in steps] == ["move", "pick"]
    assert w2.held == "beaker1"
    problem = build_problem(w, goal)
    assert bfs_plan_length(problem, ground(problem)) == 2


def test_pour_goal_plan(env8):
    w = load_scene("minimal")
    plan = run_alg1(load_xdl("minimal"), w, env8)
    assert plan.actions() == ["move", "pick", "move", "pour", "move", "place"]
    pour = plan.steps[3]
    assert pour.args[:2] == ("beaker1", "dish") and pour.transfer_g == 10.0
    assert plan.steps[2].constraint == "upright" and plan.steps[4].constraint == "upright"
    assert plan.steps[0].constraint == "none"


@pytest.mark.parametrize("scene,xdl", FIXTURES)
def test_astar_matches_bfs_oracle(scene, xdl):
    w = load_scene(scene)
    _, goals = to_goals(load_xdl(xdl), w.densities)
    extra = [Goal("holding", v) for v in sorted(w.vessels) if w.vessels[v].graspable]
    for i, g in enumerate(goals + extra):
        problem = build_problem(w, goal_literals(absolute_goal(g, w), tag=i))
        actions = ground(problem)
        plan = astar(problem, actions)
        assert plan is not None
        assert len(plan) == bfs_plan_length(problem, actions)


def test_plan_goal_action_count_matches_bfs(env8):
    w = load_scene("solubility")
    for g in to_goals(load_xdl("solubility"), w.densities)[1]:
        lits = goal_literals(absolute_goal(g, w), tag=g.step)
        steps, _, _ = plan_goal(w, lits, env8, seed=g.step)
        problem = build_problem(w, lits)
        assert len(steps) == bfs_plan_length(problem, ground(problem))


def test_unreachable_symbolic_goal(env8):
    w = load_scene("minimal")
    with pytest.raises(GoalPlanningError):
        plan_goal(w, frozenset({("contains", "dish", "salt", 5.0), ("hand-empty",)}), env8)


def test_missing_hardware_named(env8):
    prog = parse_xdl(
        '<Synthesis><Hardware><Component id="dish" type="dish"/><Component id="filter_flask" type="flask"/>'
        '</Hardware><Reagents><Reagent name="water"/></Reagents><Procedure>'
        '<Add vessel="dish" reagent="water" amount="10 g"/></Procedure></Synthesis>'
    )
    with pytest.raises(PreconditionError, match="filter_flask"):
        run_alg1(prog, load_scene("minimal"), env8)


def test_empty_procedure_gives_empty_plan(env8):
    prog = parse_xdl('<Synthesis><Hardware><Component id="dish" type="dish"/></Hardware>'
                     '<Reagents><Reagent name="water"/></Reagents><Procedure/></Synthesis>')
    plan = run_alg1(prog, load_scene("minimal"), env8)
    assert len(plan) == 0 and plan.goals == []


def test_solubility_plan_fills_dish(solubility_plan):
    plan, w = solubility_plan
    assert len(plan) >= 5
    final = plan.replay(w)
    assert final.vessel("dish").mass("water") >= 10.0
    assert final.device("stirrer1").stirring
    assert final.held is None


def test_plan_soundness_by_replay(arm8, solubility_plan):
    plan, w = solubility_plan
    q = None
    for s in plan.steps:
        if s.action == "pour":
            assert w.held == s.args[0]
        if s.action == "pick":
            assert w.held is None
        if s.path is not None:
            spec = UPRIGHT if s.constraint == "upright" else UNCONSTRAINED
            assert s.attached == w.held
            assert path_is_valid(arm8, w, s.path, spec, s.attached, s.ignore)
            if spec is UPRIGHT:
                assert max_path_residual(arm8, s.path) <= 0.1
            if q is not None:
                assert np.allclose(s.path.start, q)
            q = s.path.end
        e = s.effect()
        if e is not None:
            w = apply_effect(w, e)


def test_motion_certification_holds_in_filled_state(solubility_plan):
    plan, w = solubility_plan
    for s in plan.steps:
        if s.path is not None and s.attached is not None and w.vessel(s.attached).is_filled:
            assert s.constraint == "upright"
        e = s.effect()
        if e is not None:
            w = apply_effect(w, e)


def test_plan_json_round_trip(arm8, solubility_plan, tmp_path):
    plan, _ = solubility_plan
    plan.to_json(tmp_path, arm8)
    back = Plan.from_json(tmp_path)
    assert back.actions() == plan.actions()
    assert back.goals == plan.goals
    for a, b in zip(plan.steps, back.steps):
        assert (a.path is None) == (b.path is None)
        if a.path is not None:
            assert np.allclose(a.path.waypoints, b.path.waypoints, atol=1e-9)


def test_planning_is_deterministic(arm8):
    w = load_scene("minimal")
    a = run_alg1(load_xdl("minimal"), w, StreamEnv(arm8), seed=4)
    b = run_alg1(load_xdl("minimal"), w, StreamEnv(arm8), seed=4)
    for sa, sb in zip(a.steps, b.steps):
        if sa.path is not None:
            assert np.array_equal(sa.path.waypoints, sb.path.waypoints)


# -- execution-time refinement ---------------------------------------------------


def test_refine_zero_repetitions():
    calls = []
    assert refine_task(lambda: True, calls.append, 3) == 0 and calls == []


def test_refine_needs_positive_max():
    with pytest.raises(ValueError):
        refine_task(lambda: True, lambda i: None, 0)


def dish_world(salt_g):
    return scene_from_dict({"vessels": [
        {"id": "src", "kind": "beaker", "pose": {"xyz": [0.4, 0.2, 0.0]}, "capacity_ml": 500.0,
         "contents": [{"species": "water", "mass_g": 200.0, "phase": "liquid"}]},
        {"id": "dish", "kind": "dish", "pose": {"xyz": [0.5, 0.0, 0.0]}, "capacity_ml": 150.0,
         "contents": [{"species": "salt", "mass_g": salt_g, "phase": "granular"}]},
    ], "densities": {"salt": 2.16}})


def closed_loop(salt_g, max_reps):
    salt = load_solubility_models()["salt"]
    state = {"w": dish_world(salt_g)}

    def dissolved():
        w = state["w"]
        return w.vessel("dish").mass("water") > 0 and turbidity_observe(w, "dish", salt, noise=0.0) == BASE_CLEAR

    def body(_):
        state["w"] = apply_effect(state["w"], PourEffect("src", "dish", 10.0, "water"))

    return refine_task(dissolved, body, max_reps), state["w"]


def test_refine_expands_until_dissolved():
    # 10 g salt needs 27.9 g water at 25 C: three 10 g additions
    reps, w = closed_loop(10.0, 10)
    assert reps == 3 and w.vessel("dish").mass("water") == 30.0


def test_refine_aborts_after_max_reps():
    with pytest.raises(ExperimentAborted) as info:
        closed_loop(10.0, 2)
    assert info.value.repetitions == 2


def test_domain_is_closed():
    assert {s.name for s in DOMAIN} == {"move", "pick", "place", "pour", "stir", "heatchill", "observe"}
