"""Parser for a small subset of XDL and its translation into ordered goals.

Supported document shape::

    <Synthesis>
      <Hardware><Component id="dish" type="dish"/></Hardware>
      <Reagents><Reagent name="water"/></Reagents>
      <Procedure>
        <Add vessel="dish" reagent="water" amount="10 g"/>
        <Stir vessel="dish" time="60 s"/>
        <HeatChill vessel="dish" temp="80"/>
        <Observe vessel="dish" quantity="turbidity" repeat_until="dissolved" max_repeats="10" body="2"/>
      </Procedure>
    </Synthesis>

``repeat_until``/``max_repeats``/``body`` on Observe express conditional
repetition: while the condition is false, the ``body`` steps preceding the
Observe are appended again (at most ``max_repeats`` times).
"""

from __future__ import annotations

import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

SECTIONS = ("Hardware", "Reagents", "Procedure")
STEP_KINDS = ("Add", "Stir", "HeatChill", "Observe")
DEFAULT_DENSITIES = {"water": 1.0}

_DATA = Path(__file__).parent / "data" / "xdl"


class XdlError(ValueError):
    code = "xdl"


class XdlSyntaxError(XdlError):
    code = "syntax"


class MissingSectionError(XdlError):
    code = "missing-section"


class UnknownStepError(XdlError):
    code = "unknown-step"


class DanglingReferenceError(XdlError):
    code = "dangling-reference"


class XdlAttributeError(XdlError):
    code = "bad-attribute"


@dataclass(frozen=True)
class Amount:
    value: float
    unit: str  # "g" | "mL"

    def __post_init__(self):
        if self.unit not in ("g", "mL"):
            raise XdlAttributeError(f"unsupported amount unit {self.unit!r}")
        if not self.value > 0:
            raise XdlAttributeError("amounts must be > 0")

    def grams(self, density: float) -> float:
        return self.value if self.unit == "g" else self.value * density

    def __str__(self) -> str:
        return f"{_num(self.value)} {self.unit}"


def _num(v: float) -> str:
    """Shortest text that parses back to exactly ``v``."""
    short = f"{v:g}"
    return short if float(short) == v else repr(float(v))


_AMOUNT_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(g|mL)\s*$")
_QUANTITY_RE = re.compile(r"^\s*(-?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(%s)?\s*$")


def parse_amount(text: str) -> Amount:
    """Accepts "10g", "10 g", "5mL", "5 mL"."""
    m = _AMOUNT_RE.match(text)
    if not m:
        raise XdlAttributeError(f"cannot parse amount {text!r}; expected e.g. '10 g' or '5 mL'")
    return Amount(float(m.group(1)), m.group(2))


def _number(text: str, units: str, what: str) -> float:
    m = re.match(_QUANTITY_RE.pattern % units, text)
    if not m:
        raise XdlAttributeError(f"cannot parse {what} {text!r}")
    return float(m.group(1))


@dataclass(frozen=True)
class Component:
    id: str
    type: str


@dataclass(frozen=True)
class Reagent:
    name: str
    properties: tuple[tuple[str, str], ...] = ()

    def prop(self, key: str, default=None):
        return dict(self.properties).get(key, default)


@dataclass(frozen=True)
class XdlStep:
    kind: str
    vessel: str
    reagent: str | None = None
    amount: Amount | None = None
    time_s: float | None = None
    temp_c: float | None = None
    quantity: str | None = None
    repeat_until: str | None = None
    max_repeats: int | None = None
    body: int | None = None


@dataclass(frozen=True)
class XdlProgram:
    hardware: tuple[Component, ...] = ()
    reagents: tuple[Reagent, ...] = ()
    procedure: tuple[XdlStep, ...] = ()

    def component(self, cid: str) -> Component | None:
        return next((c for c in self.hardware if c.id == cid), None)

    def reagent(self, name: str) -> Reagent | None:
        return next((r for r in self.reagents if r.name == name), None)


_ALLOWED = {
    "Add": ({"vessel", "reagent", "amount"}, set()),
    "Stir": ({"vessel"}, {"time"}),
    "HeatChill": ({"vessel", "temp"}, {"time"}),
    "Observe": ({"vessel"}, {"quantity", "repeat_until", "max_repeats", "body"}),
}


def _step(el: ET.Element, index: int) -> XdlStep:
    if el.tag not in STEP_KINDS:
        raise UnknownStepError(f"Procedure step {index + 1}: unknown step kind <{el.tag}>")
    required, optional = _ALLOWED[el.tag]
    where = f"Procedure step {index + 1} <{el.tag}>"
    missing = sorted(required - set(el.attrib))
    if missing:
        raise XdlAttributeError(f"{where}: missing attribute(s) {missing}")
    extra = sorted(set(el.attrib) - required - optional)
    if extra:
        raise XdlAttributeError(f"{where}: unsupported attribute(s) {extra}")
    a = el.attrib
    kw: dict = {"kind": el.tag, "vessel": a["vessel"]}
    if el.tag == "Add":
        kw["reagent"] = a["reagent"]
        kw["amount"] = parse_amount(a["amount"])
    if "time" in a:
        kw["time_s"] = _number(a["time"], "s", "time")
        if kw["time_s"] < 0:
            raise XdlAttributeError(f"{where}: time must be >= 0")
    if "temp" in a:
        kw["temp_c"] = _number(a["temp"], "C|°C", "temperature")
    if el.tag == "Observe":
        kw["quantity"] = a.get("quantity", "turbidity")
        if "repeat_until" in a:
            kw["repeat_until"] = a["repeat_until"]
            try:
                kw["max_repeats"] = int(a.get("max_repeats", "10"))
                kw["body"] = int(a.get("body", "1"))
            except ValueError:
                raise XdlAttributeError(f"{where}: max_repeats and body must be integers") from None
            if kw["max_repeats"] < 1 or kw["body"] < 1 or kw["body"] > index:
                raise XdlAttributeError(f"{where}: need max_repeats >= 1 and 1 <= body <= preceding steps")
        elif "max_repeats" in a or "body" in a:
            raise XdlAttributeError(f"{where}: max_repeats/body require repeat_until")
    return XdlStep(**kw)


def parse_xdl(text: str) -> XdlProgram:
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        line, col = exc.position
        raise XdlSyntaxError(f"XML syntax error at line {line}, column {col + 1}: {exc}") from None
    if root.tag != "Synthesis":
        raise XdlError(f"root element must be <Synthesis>, got <{root.tag}>")
    sections = {}
    for child in root:
        if child.tag not in SECTIONS:
            raise XdlError(f"unexpected section <{child.tag}>")
        if child.tag in sections:
            raise XdlError(f"duplicate section <{child.tag}>")
        sections[child.tag] = child
    for name in SECTIONS:
        if name not in sections:
            raise MissingSectionError(f"missing mandatory section {name}")

    hardware = []
    for el in sections["Hardware"]:
        if el.tag != "Component" or "id" not in el.attrib or "type" not in el.attrib:
            raise XdlError("Hardware entries must be <Component id=... type=.../>")
        hardware.append(Component(el.attrib["id"], el.attrib["type"]))
    reagents = []
    for el in sections["Reagents"]:
        if el.tag != "Reagent" or "name" not in el.attrib:
            raise XdlError("Reagents entries must be <Reagent name=.../>")
        props = tuple(sorted((k, v) for k, v in el.attrib.items() if k != "name"))
        reagents.append(Reagent(el.attrib["name"], props))
    steps = [_step(el, i) for i, el in enumerate(sections["Procedure"])]

    prog = XdlProgram(tuple(hardware), tuple(reagents), tuple(steps))
    ids = [c.id for c in prog.hardware]
    if len(set(ids)) != len(ids):
        raise XdlError("duplicate Component ids")
    for i, s in enumerate(prog.procedure):
        if prog.component(s.vessel) is None:
            raise DanglingReferenceError(f"Procedure step {i + 1} <{s.kind}>: undeclared vessel {s.vessel!r}")
        if s.reagent is not None and prog.reagent(s.reagent) is None:
            raise DanglingReferenceError(f"Procedure step {i + 1} <{s.kind}>: undeclared reagent {s.reagent!r}")
    return prog


def load_xdl(path) -> XdlProgram:
    """Read and parse an XDL file; bare fixture names resolve to the shipped files."""
    p = Path(path)
    if not p.exists() and (_DATA / p.name).exists():
        p = _DATA / p.name
    if not p.exists() and (_DATA / f"{p.name}.xdl").exists():
        p = _DATA / f"{p.name}.xdl"
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise XdlError(f"{path}: {exc.strerror}") from None
    return parse_xdl(text)


def to_xml(prog: XdlProgram) -> str:
    root = ET.Element("Synthesis")
    hw = ET.SubElement(root, "Hardware")
    for c in prog.hardware:
        ET.SubElement(hw, "Component", {"id": c.id, "type": c.type})
    rg = ET.SubElement(root, "Reagents")
    for r in prog.reagents:
        ET.SubElement(rg, "Reagent", {"name": r.name, **dict(r.properties)})
    pr = ET.SubElement(root, "Procedure")
    for s in prog.procedure:
        a = {"vessel": s.vessel}
        if s.reagent is not None:
            a["reagent"] = s.reagent
        if s.amount is not None:
            a["amount"] = str(s.amount)
        if s.time_s is not None:
            a["time"] = f"{_num(s.time_s)} s"
        if s.temp_c is not None:
            a["temp"] = _num(s.temp_c)
        if s.quantity is not None:
            a["quantity"] = s.quantity
        if s.repeat_until is not None:
            a["repeat_until"] = s.repeat_until
            a["max_repeats"] = str(s.max_repeats)
            a["body"] = str(s.body)
        ET.SubElement(pr, s.kind, a)
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


# -- goals -------------------------------------------------------------------------


@dataclass(frozen=True)
class Goal:
    """One procedure step as a goal.

    kind: "contains" (species, value = minimum added mass [g]), "stirred"
    (value = duration [s]), "at-temperature" (value = [C]) or "measured"
    (quantity).
    """

    kind: str
    vessel: str
    species: str | None = None
    value: float | None = None
    quantity: str | None = None
    step: int = 0
    repeat_until: str | None = None
    max_repeats: int | None = None
    body: int | None = None


@dataclass(frozen=True)
class Objects:
    vessels: tuple[str, ...] = ()
    devices: tuple[str, ...] = ()
    reagents: tuple[str, ...] = ()
    types: dict = field(default_factory=dict, compare=False)


DEVICE_TYPES = {"scale", "hotplate_stirrer"}


def to_goals(prog: XdlProgram, densities: dict[str, float] | None = None) -> tuple[Objects, list[Goal]]:
    dens = dict(DEFAULT_DENSITIES)
    dens.update(densities or {})
    objects = Objects(
        vessels=tuple(c.id for c in prog.hardware if c.type not in DEVICE_TYPES),
        devices=tuple(c.id for c in prog.hardware if c.type in DEVICE_TYPES),
        reagents=tuple(r.name for r in prog.reagents),
        types={c.id: c.type for c in prog.hardware},
    )
    goals = []
    for i, s in enumerate(prog.procedure):
        if objects.types[s.vessel] in DEVICE_TYPES:
            raise XdlAttributeError(f"step {i + 1} <{s.kind}>: {s.vessel!r} is a device, not a vessel")
        if s.kind == "Add":
            density = prog.reagent(s.reagent).prop("density", dens.get(s.reagent))
            if s.amount.unit == "mL" and density is None:
                raise XdlAttributeError(f"step {i + 1}: no density known for {s.reagent!r} to convert mL")
            density = float(density) if density is not None else 1.0
            goals.append(Goal("contains", s.vessel, s.reagent, s.amount.grams(density), step=i))
        elif s.kind == "Stir":
            goals.append(Goal("stirred", s.vessel, value=s.time_s or 0.0, step=i))
        elif s.kind == "HeatChill":
            goals.append(Goal("at-temperature", s.vessel, value=s.temp_c, step=i))
        else:
            goals.append(Goal("measured", s.vessel, quantity=s.quantity, step=i,
                              repeat_until=s.repeat_until, max_repeats=s.max_repeats, body=s.body))
    return objects, goals
