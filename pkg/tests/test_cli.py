import json
from pathlib import Path

import pytest

from labtamp import cli
from labtamp.cplanner import PlanningFailure
from labtamp.execute import ExecutionError, RefinementFailure
from labtamp.experiments import AnalysisError
from labtamp.perception import PerceptionError
from labtamp.scene import SceneError
from labtamp.skills import PourError
from labtamp.taskplan import ExperimentAborted, GoalPlanningError, PreconditionError
from labtamp.xdl import XdlError

SOLUBILITY = ["--scene", "solubility", "--xdl", "solubility"]


def run(tmp_path, *argv, out="out"):
    d = tmp_path / out
    code = cli.main([*argv, "--out", str(d)])
    return code, d


def write_xdl(tmp_path, body, hardware='<Component id="dish" type="dish"/>'):
    p = tmp_path / "x.xdl"
    p.write_text(f"<Synthesis><Hardware>{hardware}</Hardware><Reagents><Reagent name=\"water\"/></Reagents>"
                 f"<Procedure>{body}</Procedure></Synthesis>")
    return str(p)


def test_plan_writes_files(tmp_path):
    code, d = run(tmp_path, "plan", *SOLUBILITY)
    assert code == cli.EXIT_OK
    doc = json.loads((d / "plan.json").read_text())
    assert len(doc["actions"]) >= 5 and doc["dof"] == 8
    for a in doc["actions"]:
        if "path_csv" in a:
            assert (d / a["path_csv"]).exists()
    assert (d / "plan.txt").exists()


def test_plan_then_execute(tmp_path):
    _, d = run(tmp_path, "plan", *SOLUBILITY, out="plan")
    code, e = run(tmp_path, "execute", "--scene", "solubility", "--plan", str(d), out="exec")
    assert code == cli.EXIT_OK
    assert "goals satisfied: yes" in (e / "summary.txt").read_text()
    assert (e / "experiment_log_dish.csv").exists()


def test_execute_rejects_wrong_robot(tmp_path):
    _, d = run(tmp_path, "plan", *SOLUBILITY, out="plan")
    code, _ = run(tmp_path, "execute", "--scene", "solubility", "--plan", str(d), "--robot", "panda7")
    assert code == cli.EXIT_PARSE


def test_malformed_xml(tmp_path):
    p = tmp_path / "bad.xdl"
    p.write_text("<Synthesis><Hardware>")
    assert run(tmp_path, "plan", "--scene", "minimal", "--xdl", str(p))[0] == cli.EXIT_PARSE


def test_bad_scene(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{"vessels": [}')
    assert run(tmp_path, "plan", "--scene", str(p), "--xdl", "minimal")[0] == cli.EXIT_PARSE


def test_missing_hardware(tmp_path, capsys):
    x = write_xdl(tmp_path, '<Add vessel="dish" reagent="water" amount="5 g"/>',
                  '<Component id="dish" type="dish"/><Component id="filter_flask" type="flask"/>')
    assert run(tmp_path, "plan", "--scene", "minimal", "--xdl", x)[0] == cli.EXIT_PRECONDITION
    assert "filter_flask" in capsys.readouterr().err


def test_planning_failure(tmp_path):
    scene = json.loads((Path(cli.__file__).parent / "data" / "scenes" / "minimal.json").read_text())
    scene["vessels"][1]["pose"]["xyz"] = [3.0, 0.0, 0.0]
    p = tmp_path / "far.json"
    p.write_text(json.dumps(scene))
    assert run(tmp_path, "plan", "--scene", str(p), "--xdl", "minimal")[0] == cli.EXIT_PLANNING


def test_refinement_failure_keeps_partial_data(tmp_path):
    code, d = run(tmp_path, "solubility", *SOLUBILITY, "--noise", "0.05")
    assert code == cli.EXIT_REFINEMENT
    assert "goals completed" in (d / "summary.txt").read_text()


def test_aborted_experiment(tmp_path):
    x = write_xdl(tmp_path, '<Add vessel="dish" reagent="water" amount="10 g"/><Stir vessel="dish" time="60 s"/>'
                            '<Observe vessel="dish" quantity="turbidity" repeat_until="dissolved" max_repeats="1"'
                            ' body="2"/>',
                  '<Component id="dish" type="dish"/><Component id="stirrer1" type="hotplate_stirrer"/>')
    code, d = run(tmp_path, "solubility", "--scene", "solubility", "--xdl", x)
    assert code == cli.EXIT_ABORTED
    assert (d / "experiment_log_dish.csv").exists()


def test_recrystallize_analysis_error(tmp_path):
    code, _ = run(tmp_path, "recrystallize", "--scene", "recrystallization", "--xdl", "recrystallization",
                  "--t-cool", "95")
    assert code == cli.EXIT_EXECUTION


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main(["plan", "--scene", "minimal"])
    assert info.value.code == cli.EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        cli.main(["bench-pour", "--trials", "0"])
    assert info.value.code == cli.EXIT_USAGE
    assert run(tmp_path, "plan", "--scene", "minimal", "--xdl", "minimal", "--robot", "nope.json")[0] \
        == cli.EXIT_PARSE


def test_every_failure_has_a_code():
    mapped = {cls for cls, _ in cli._ERROR_CODES}
    for exc in (XdlError, SceneError, PreconditionError, GoalPlanningError, PlanningFailure, RefinementFailure,
                ExperimentAborted, ExecutionError, PourError, PerceptionError, AnalysisError):
        assert any(issubclass(exc, m) for m in mapped), exc
    codes = [cli.EXIT_USAGE, cli.EXIT_PARSE, cli.EXIT_PRECONDITION, cli.EXIT_PLANNING, cli.EXIT_REFINEMENT,
             cli.EXIT_ABORTED, cli.EXIT_EXECUTION, cli.EXIT_UNSATISFIED]
    assert len(set(codes)) == len(codes) and cli.EXIT_OK not in codes


def test_env_overrides_out(tmp_path, monkeypatch):
    monkeypatch.setenv("LABTAMP_OUT", str(tmp_path / "env"))
    code, d = run(tmp_path, "plan", "--scene", "minimal", "--xdl", "minimal")
    assert code == 0 and (tmp_path / "env" / "plan.json").exists() and not d.exists()


@pytest.mark.parametrize("argv", [
    ["solubility", *SOLUBILITY, "--noise", "0.01"],
    ["recrystallize", "--scene", "recrystallization", "--xdl", "recrystallization"],
    ["bench-cplan", "--trials", "1"],
    ["bench-pour", "--trials", "2", "--targets", "10", "50"],
])
def test_reruns_are_byte_identical(tmp_path, argv):
    assert run(tmp_path, *argv, out="a")[0] == 0
    assert run(tmp_path, *argv, out="b")[0] == 0
    a = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert a == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_bench_cplan_row_format(tmp_path):
    _, d = run(tmp_path, "bench-cplan", "--trials", "1")
    lines = (d / "cplan.csv").read_text().splitlines()
    assert lines[0].startswith("dof,scenario,ik_pct,plan_pct")
    assert [tuple(x.split(",")[:2]) for x in lines[1:]] == [("7", "1"), ("7", "2"), ("8", "1"), ("8", "2")]
