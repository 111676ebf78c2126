import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labtamp.xdl import (
    Amount,
    Component,
    DanglingReferenceError,
    MissingSectionError,
    Reagent,
    UnknownStepError,
    XdlAttributeError,
    XdlError,
    XdlProgram,
    XdlStep,
    XdlSyntaxError,
    load_xdl,
    parse_amount,
    parse_xdl,
    to_goals,
    to_xml,
)

HEAD = '<Synthesis><Hardware><Component id="dish" type="dish"/></Hardware><Reagents><Reagent name="water"/></Reagents>'


def doc(procedure: str) -> str:
    return f"{HEAD}<Procedure>{procedure}</Procedure></Synthesis>"


def test_missing_procedure():
    with pytest.raises(MissingSectionError, match="missing mandatory section Procedure"):
        parse_xdl(HEAD + "</Synthesis>")


def test_minimal_fixture():
    p = load_xdl("minimal")
    assert len(p.procedure) == 1
    s = p.procedure[0]
    assert (s.kind, s.vessel, s.reagent, s.amount) == ("Add", "dish", "water", Amount(10.0, "g"))


def test_dangling_vessel_named():
    with pytest.raises(DanglingReferenceError, match="beaker9"):
        parse_xdl(doc('<Add vessel="beaker9" reagent="water" amount="5 g"/>'))
    with pytest.raises(DanglingReferenceError, match="acid"):
        parse_xdl(doc('<Add vessel="dish" reagent="acid" amount="5 g"/>'))


def test_unknown_step_kind():
    with pytest.raises(UnknownStepError, match="Filter"):
        parse_xdl(doc('<Filter vessel="dish"/>'))


def test_syntax_error_location():
    with pytest.raises(XdlSyntaxError, match="line 2"):
        parse_xdl("<Synthesis>\n<Hardware></Synthesis>")


def test_error_codes_are_distinct():
    codes = {cls.code for cls in (XdlSyntaxError, MissingSectionError, UnknownStepError,
                                  DanglingReferenceError, XdlAttributeError)}
    assert len(codes) == 5


@pytest.mark.parametrize("text,expect", [("10g", (10.0, "g")), ("10 g", (10.0, "g")),
                                         ("2.5mL", (2.5, "mL")), ("2.5 mL", (2.5, "mL"))])
def test_amount_formats(text, expect):
    a = parse_amount(text)
    assert (a.value, a.unit) == expect


@pytest.mark.parametrize("text", ["10", "ten g", "10 kg", "-1 g", "0 g"])
def test_bad_amounts(text):
    with pytest.raises(XdlAttributeError):
        parse_amount(text)


def test_goals_in_order():
    p = parse_xdl(doc('<Add vessel="dish" reagent="water" amount="10 g"/><Stir vessel="dish" time="60 s"/>'))
    _, goals = to_goals(p)
    assert [g.kind for g in goals] == ["contains", "stirred"]
    assert goals[0].value == 10.0 and goals[0].species == "water" and goals[1].value == 60.0


def test_empty_procedure():
    objs, goals = to_goals(parse_xdl(doc("")))
    assert goals == [] and objs.vessels == ("dish",) and objs.reagents == ("water",)


def test_millilitres_converted_by_density():
    _, goals = to_goals(parse_xdl(doc('<Add vessel="dish" reagent="water" amount="10 mL"/>')))
    assert goals[0].value == 10.0
    _, goals = to_goals(parse_xdl(doc('<Add vessel="dish" reagent="water" amount="10 mL"/>')), {"water": 0.5})
    assert goals[0].value == 5.0


def test_millilitres_without_density():
    text = doc('<Add vessel="dish" reagent="oil" amount="10 mL"/>').replace(
        '<Reagent name="water"/>', '<Reagent name="oil"/>')
    with pytest.raises(XdlAttributeError):
        to_goals(parse_xdl(text))


def test_repeat_attributes():
    p = load_xdl("solubility")
    obs = p.procedure[-1]
    assert (obs.repeat_until, obs.max_repeats, obs.body) == ("dissolved", 15, 2)
    with pytest.raises(XdlAttributeError):
        parse_xdl(doc('<Observe vessel="dish" repeat_until="dissolved" body="1"/>'))
    with pytest.raises(XdlAttributeError):
        parse_xdl(doc('<Stir vessel="dish" speed="fast"/>'))


@pytest.mark.parametrize("name", ["minimal", "solubility", "recrystallization"])
def test_shipped_fixture_round_trip(name):
    p = load_xdl(name)
    q = parse_xdl(to_xml(p))
    assert q == p
    assert to_xml(q) == to_xml(p)
    assert len(to_goals(p)[1]) == len(p.procedure)


def test_missing_file():
    with pytest.raises(XdlError):
        load_xdl("/nonexistent/x.xdl")


positive = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)


@st.composite
def programs(draw):
    vessels = draw(st.lists(st.sampled_from(["a", "b", "dish", "flask"]), min_size=1, max_size=3, unique=True))
    reagents = draw(st.lists(st.sampled_from(["water", "salt", "alum"]), min_size=1, max_size=3, unique=True))
    steps = []
    for i in range(draw(st.integers(0, 6))):
        kind = draw(st.sampled_from(["Add", "Stir", "HeatChill", "Observe"]))
        v = draw(st.sampled_from(vessels))
        if kind == "Add":
            steps.append(XdlStep("Add", v, draw(st.sampled_from(reagents)),
                                 Amount(draw(positive), draw(st.sampled_from(["g", "mL"])))))
        elif kind == "Stir":
            steps.append(XdlStep("Stir", v, time_s=draw(st.one_of(st.none(), positive))))
        elif kind == "HeatChill":
            steps.append(XdlStep("HeatChill", v, temp_c=draw(st.floats(-50, 400))))
        elif i > 0 and draw(st.booleans()):
            steps.append(XdlStep("Observe", v, quantity="turbidity", repeat_until="dissolved",
                                 max_repeats=draw(st.integers(1, 20)), body=draw(st.integers(1, i))))
        else:
            steps.append(XdlStep("Observe", v, quantity=draw(st.sampled_from(["turbidity", "crystals"]))))
    return XdlProgram(tuple(Component(v, "beaker") for v in vessels),
                      tuple(Reagent(r, (("density", "1.0"),)) for r in reagents), tuple(steps))


@settings(max_examples=200, deadline=None)
@given(programs())
def test_parse_print_parse(p):
    q = parse_xdl(to_xml(p))
    assert q == p
    assert len(to_goals(q)[1]) == len(q.procedure)
