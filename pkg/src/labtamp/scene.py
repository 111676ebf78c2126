"""World model of the lab bench: vessels, devices, obstacles.

Workspaces are treated as immutable values: :func:`apply_effect` returns a
new workspace and never touches its input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from labtamp.transforms import Transform

DEFAULT_DENSITY = 1.0  # g/mL
AMBIENT_C = 25.0
_DATA = Path(__file__).parent / "data"


class SceneError(ValueError):
    pass


class VesselKind(str, Enum):
    BEAKER = "beaker"
    DISH = "dish"
    VIAL = "vial"


class DeviceKind(str, Enum):
    SCALE = "scale"
    HOTPLATE_STIRRER = "hotplate_stirrer"


class Phase(str, Enum):
    LIQUID = "liquid"
    GRANULAR = "granular"
    DISSOLVED = "dissolved"


# default cylinder bounds (radius, height) per vessel kind [m]
_VESSEL_DIMS = {
    VesselKind.BEAKER: (0.035, 0.10),
    VesselKind.DISH: (0.05, 0.03),
    VesselKind.VIAL: (0.012, 0.06),
}


@dataclass(frozen=True)
class Content:
    species: str
    mass_g: float
    phase: Phase


@dataclass(frozen=True, eq=False)
class VesselState:
    id: str
    kind: VesselKind
    pose: Transform
    capacity_ml: float
    contents: tuple[Content, ...] = ()
    graspable: bool = True
    radius_m: float = 0.035
    height_m: float = 0.10

    def mass(self, species: str | None = None) -> float:
        return float(sum(c.mass_g for c in self.contents if species is None or c.species == species))

    def species(self) -> list[str]:
        return [c.species for c in self.contents]

    def phase_of(self, species: str) -> Phase | None:
        for c in self.contents:
            if c.species == species:
                return c.phase
        return None

    def volume_ml(self, densities: dict[str, float]) -> float:
        return float(sum(c.mass_g / densities.get(c.species, DEFAULT_DENSITY) for c in self.contents))

    @property
    def is_filled(self) -> bool:
        return any(c.mass_g > 0 for c in self.contents)


@dataclass(frozen=True, eq=False)
class DeviceState:
    id: str
    kind: DeviceKind
    pose: Transform
    reading_g: float = 0.0
    temperature_setpoint_c: float = AMBIENT_C
    temperature_c: float = AMBIENT_C
    stirring: bool = False
    footprint_m: float = 0.08


@dataclass(frozen=True)
class Box:
    id: str
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass(frozen=True)
class Sphere:
    id: str
    center: tuple[float, float, float]
    radius: float


@dataclass(frozen=True, eq=False)
class Workspace:
    vessels: dict[str, VesselState] = field(default_factory=dict)
    devices: dict[str, DeviceState] = field(default_factory=dict)
    obstacles: tuple[Box | Sphere, ...] = ()
    robot_base: Transform = field(default_factory=Transform.identity)
    densities: dict[str, float] = field(default_factory=dict)
    held: str | None = None

    def density(self, species: str) -> float:
        return self.densities.get(species, DEFAULT_DENSITY)

    def vessel(self, vid: str) -> VesselState:
        try:
            return self.vessels[vid]
        except KeyError:
            raise SceneError(f"unknown vessel id {vid!r}") from None

    def device(self, did: str) -> DeviceState:
        try:
            return self.devices[did]
        except KeyError:
            raise SceneError(f"unknown device id {did!r}") from None

    def device_under(self, vid: str) -> str | None:
        """Device whose footprint holds the vessel, if any."""
        if vid == self.held:
            return None
        p = self.vessel(vid).pose.translation
        for d in self.devices.values():
            if np.linalg.norm(p[:2] - d.pose.translation[:2]) <= d.footprint_m:
                return d.id
        return None

    def temperature_of(self, vid: str) -> float:
        did = self.device_under(vid)
        if did is None:
            return AMBIENT_C
        dev = self.devices[did]
        return dev.temperature_c if dev.kind == DeviceKind.HOTPLATE_STIRRER else AMBIENT_C

    def total_mass(self, species: str | None = None) -> float:
        return float(sum(v.mass(species) for v in self.vessels.values()))

    def all_ids(self) -> list[str]:
        return list(self.vessels) + list(self.devices) + [o.id for o in self.obstacles]


def _check_workspace(w: Workspace) -> None:
    ids = w.all_ids()
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise SceneError(f"duplicate ids: {dupes}")
    for v in w.vessels.values():
        for c in v.contents:
            if c.mass_g < 0:
                raise SceneError(f"vessel {v.id!r}: negative mass for {c.species!r}")
        vol = v.volume_ml(w.densities)
        if vol > v.capacity_ml + 1e-9:
            raise SceneError(f"vessel {v.id!r}: capacity exceeded ({vol:.3g} mL > {v.capacity_ml:.3g} mL)")
        if not v.pose.is_valid():
            raise SceneError(f"vessel {v.id!r}: invalid pose rotation")
    for d in w.devices.values():
        if d.reading_g < 0:
            raise SceneError(f"device {d.id!r}: negative reading")
        for t in (d.temperature_c, d.temperature_setpoint_c):
            if not 0.0 <= t <= 400.0:
                raise SceneError(f"device {d.id!r}: temperature {t} outside [0, 400] C")


def _refresh_readings(w: Workspace) -> Workspace:
    devices = {}
    for did, d in w.devices.items():
        if d.kind == DeviceKind.SCALE or d.kind == DeviceKind.HOTPLATE_STIRRER:
            load = sum(v.mass() for vid, v in w.vessels.items() if w.device_under(vid) == did)
            d = replace(d, reading_g=float(load))
        devices[did] = d
    return replace(w, devices=devices)


# -- scene files --------------------------------------------------------------

_TOP_KEYS = {"vessels", "devices", "obstacles", "robot_base", "densities"}
_VESSEL_KEYS = {"id", "kind", "pose", "capacity_ml", "contents", "graspable", "radius_m", "height_m"}
_DEVICE_KEYS = {"id", "kind", "pose", "temperature_c", "stirring", "footprint_m"}


def _pose(obj, where: str) -> Transform:
    if not isinstance(obj, dict) or "xyz" not in obj:
        raise SceneError(f"{where}: pose must be an object with 'xyz' (and optional 'rpy')")
    extra = set(obj) - {"xyz", "rpy"}
    if extra:
        raise SceneError(f"{where}: unknown keys {sorted(extra)}")
    xyz = obj["xyz"]
    rpy = obj.get("rpy", [0.0, 0.0, 0.0])
    if len(xyz) != 3 or len(rpy) != 3:
        raise SceneError(f"{where}: xyz and rpy need 3 components")
    return Transform.from_xyz_rpy([float(v) for v in xyz], [float(v) for v in rpy])


def _unknown(obj: dict, allowed: set, where: str) -> None:
    extra = set(obj) - allowed
    if extra:
        raise SceneError(f"{where}: unknown keys {sorted(extra)}")


def _enum(cls, value, where: str):
    try:
        return cls(value)
    except ValueError:
        choices = [e.value for e in cls]
        raise SceneError(f"{where}: {value!r} not one of {choices}") from None


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SceneError(f"{where}: missing required field {key!r}")
    return obj[key]


def scene_from_dict(doc: dict) -> Workspace:
    if not isinstance(doc, dict):
        raise SceneError("scene document must be a JSON object")
    _unknown(doc, _TOP_KEYS, "scene")
    densities = {str(k): float(v) for k, v in doc.get("densities", {}).items()}
    densities.setdefault("water", 1.0)

    vessels = {}
    for i, vd in enumerate(doc.get("vessels", [])):
        where = f"vessels[{i}]"
        _unknown(vd, _VESSEL_KEYS, where)
        kind = _enum(VesselKind, _require(vd, "kind", where), f"{where}.kind")
        r0, h0 = _VESSEL_DIMS[kind]
        contents = []
        for j, cd in enumerate(vd.get("contents", [])):
            cw = f"{where}.contents[{j}]"
            _unknown(cd, {"species", "mass_g", "phase"}, cw)
            contents.append(
                Content(
                    species=str(_require(cd, "species", cw)),
                    mass_g=float(_require(cd, "mass_g", cw)),
                    phase=_enum(Phase, _require(cd, "phase", cw), f"{cw}.phase"),
                )
            )
        v = VesselState(
            id=str(_require(vd, "id", where)),
            kind=kind,
            pose=_pose(_require(vd, "pose", where), f"{where}.pose"),
            capacity_ml=float(_require(vd, "capacity_ml", where)),
            contents=tuple(contents),
            graspable=bool(vd.get("graspable", kind != VesselKind.DISH)),
            radius_m=float(vd.get("radius_m", r0)),
            height_m=float(vd.get("height_m", h0)),
        )
        if v.id in vessels:
            raise SceneError(f"duplicate ids: [{v.id!r}]")
        vessels[v.id] = v

    devices = {}
    for i, dd in enumerate(doc.get("devices", [])):
        where = f"devices[{i}]"
        _unknown(dd, _DEVICE_KEYS, where)
        t = float(dd.get("temperature_c", AMBIENT_C))
        d = DeviceState(
            id=str(_require(dd, "id", where)),
            kind=_enum(DeviceKind, _require(dd, "kind", where), f"{where}.kind"),
            pose=_pose(_require(dd, "pose", where), f"{where}.pose"),
            temperature_setpoint_c=t,
            temperature_c=t,
            stirring=bool(dd.get("stirring", False)),
            footprint_m=float(dd.get("footprint_m", 0.08)),
        )
        devices[d.id] = d

    obstacles = []
    for i, od in enumerate(doc.get("obstacles", [])):
        where = f"obstacles[{i}]"
        kind = _require(od, "type", where)
        if kind == "box":
            _unknown(od, {"id", "type", "min", "max"}, where)
            lo = tuple(float(v) for v in _require(od, "min", where))
            hi = tuple(float(v) for v in _require(od, "max", where))
            if not all(a < b for a, b in zip(lo, hi)):
                raise SceneError(f"{where}: box min must be < max")
            obstacles.append(Box(str(_require(od, "id", where)), lo, hi))
        elif kind == "sphere":
            _unknown(od, {"id", "type", "center", "radius"}, where)
            obstacles.append(
                Sphere(
                    str(_require(od, "id", where)),
                    tuple(float(v) for v in _require(od, "center", where)),
                    float(_require(od, "radius", where)),
                )
            )
        else:
            raise SceneError(f"{where}.type: {kind!r} not one of ['box', 'sphere']")

    base = _pose(doc["robot_base"], "robot_base") if "robot_base" in doc else Transform.identity()
    w = Workspace(vessels, devices, tuple(obstacles), base, densities)
    _check_workspace(w)
    return _refresh_readings(w)


def load_scene(path) -> Workspace:
    """Parse a scene JSON file; bare fixture names resolve to the shipped scenes."""
    p = Path(path)
    if not p.exists() and (_DATA / "scenes" / p.name).exists():
        p = _DATA / "scenes" / p.name
    if not p.exists() and (_DATA / "scenes" / f"{p.name}.json").exists():
        p = _DATA / "scenes" / f"{p.name}.json"
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise SceneError(f"{path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return scene_from_dict(doc)
    except SceneError as exc:
        raise SceneError(f"{p}: {exc}") from None


def scene_to_dict(w: Workspace) -> dict:
    def obstacle(o):
        if isinstance(o, Box):
            return {"id": o.id, "type": "box", "min": list(o.lo), "max": list(o.hi)}
        return {"id": o.id, "type": "sphere", "center": list(o.center), "radius": o.radius}

    return {
        "vessels": [
            {
                "id": v.id,
                "kind": v.kind.value,
                "pose": v.pose.to_dict(),
                "capacity_ml": v.capacity_ml,
                "contents": [
                    {"species": c.species, "mass_g": c.mass_g, "phase": c.phase.value} for c in v.contents
                ],
                "graspable": v.graspable,
                "radius_m": v.radius_m,
                "height_m": v.height_m,
            }
            for v in w.vessels.values()
        ],
        "devices": [
            {
                "id": d.id,
                "kind": d.kind.value,
                "pose": d.pose.to_dict(),
                "temperature_c": d.temperature_c,
                "stirring": d.stirring,
                "footprint_m": d.footprint_m,
            }
            for d in w.devices.values()
        ],
        "obstacles": [obstacle(o) for o in w.obstacles],
        "robot_base": w.robot_base.to_dict(),
        "densities": dict(w.densities),
    }


# -- effects ------------------------------------------------------------------


@dataclass(frozen=True)
class PickEffect:
    vessel: str


@dataclass(frozen=True)
class PlaceEffect:
    vessel: str
    pose: Transform


@dataclass(frozen=True)
class PourEffect:
    src: str
    dst: str
    mass_g: float
    species: str | None = None


@dataclass(frozen=True)
class StirEffect:
    device: str
    on: bool = True


@dataclass(frozen=True)
class TemperatureEffect:
    device: str
    temperature_c: float


Effect = PickEffect | PlaceEffect | PourEffect | StirEffect | TemperatureEffect


def _transfer(src: VesselState, dst: VesselState, mass: float, species: str | None):
    if mass < 0:
        raise SceneError("pour mass must be >= 0")
    available = src.mass(species)
    if mass > available + 1e-12:
        raise SceneError(
            f"insufficient contents in {src.id!r}: requested {mass:g} g, available {available:g} g"
        )
    if available <= 0:
        raise SceneError(f"pour from empty vessel {src.id!r}")
    moved: dict[str, tuple[float, Phase]] = {}
    new_src = []
    for c in src.contents:
        if species is not None and c.species != species:
            new_src.append(c)
            continue
        # mixtures pour proportionally to their share of the poured species set
        take = mass if species is not None else mass * c.mass_g / available
        take = min(take, c.mass_g)
        moved[c.species] = (moved.get(c.species, (0.0, c.phase))[0] + take, c.phase)
        new_src.append(replace(c, mass_g=c.mass_g - take))
    new_dst = list(dst.contents)
    for sp, (m, phase) in moved.items():
        for k, c in enumerate(new_dst):
            if c.species == sp:
                new_dst[k] = replace(c, mass_g=c.mass_g + m)
                break
        else:
            new_dst.append(Content(sp, m, phase))
    return replace(src, contents=tuple(new_src)), replace(dst, contents=tuple(new_dst))


def apply_effect(w: Workspace, effect) -> Workspace:
    """Return a new workspace with ``effect`` applied."""
    vessels = dict(w.vessels)
    devices = dict(w.devices)
    held = w.held
    if isinstance(effect, PickEffect):
        v = w.vessel(effect.vessel)
        if held is not None:
            raise SceneError(f"cannot pick {v.id!r}: already holding {held!r}")
        if not v.graspable:
            raise SceneError(f"vessel {v.id!r} is not graspable")
        held = v.id
    elif isinstance(effect, PlaceEffect):
        v = w.vessel(effect.vessel)
        if held != v.id:
            raise SceneError(f"cannot place {v.id!r}: not held")
        vessels[v.id] = replace(v, pose=effect.pose)
        held = None
    elif isinstance(effect, PourEffect):
        src, dst = w.vessel(effect.src), w.vessel(effect.dst)
        if src.id == dst.id:
            raise SceneError("pour source and destination must differ")
        vessels[src.id], vessels[dst.id] = _transfer(src, dst, effect.mass_g, effect.species)
    elif isinstance(effect, StirEffect):
        d = w.device(effect.device)
        devices[d.id] = replace(d, stirring=effect.on)
    elif isinstance(effect, TemperatureEffect):
        d = w.device(effect.device)
        devices[d.id] = replace(
            d, temperature_setpoint_c=effect.temperature_c, temperature_c=effect.temperature_c
        )
    else:
        raise SceneError(f"unsupported effect {effect!r}")
    out = replace(w, vessels=vessels, devices=devices, held=held)
    _check_workspace(out)
    return _refresh_readings(out)


def with_vessel_pose(w: Workspace, vid: str, pose: Transform) -> Workspace:
    v = w.vessel(vid)
    vessels = dict(w.vessels)
    vessels[vid] = replace(v, pose=pose)
    return _refresh_readings(replace(w, vessels=vessels))
