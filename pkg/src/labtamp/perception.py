"""Simulated experiment perception.

A scalar turbidity signal stands in for the dish brightness seen by the
wrist camera; dissolution is detected from the change between consecutive
readings. Also: solubility arithmetic, temperature-dependent solubility
tables, and the hand-eye calibration error bound on observed positions.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from labtamp.scene import SceneError, Workspace
from labtamp.transforms import Transform

BASE_CLEAR = 0.55
TURBIDITY_GAIN = 0.35
TURBIDITY_NOISE = 0.01
DISSOLVE_THRESHOLD = 0.02
SOLVENT = "water"

_DATA = Path(__file__).parent / "data"


class PerceptionError(ValueError):
    pass


@dataclass(frozen=True)
class SolubilityModel:
    """Solubility in g per 100 g water, linear between table points and flat outside."""

    species: str
    table: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.table:
            raise ValueError("solubility table is empty")
        temps = [t for t, _ in self.table]
        if any(b <= a for a, b in zip(temps, temps[1:])):
            raise ValueError("table temperatures must be strictly increasing")
        if any(s <= 0 for _, s in self.table):
            raise ValueError("solubility values must be > 0")

    def at(self, temperature_c: float) -> float:
        t, s = zip(*self.table)
        return float(np.interp(temperature_c, t, s))

    def dissolvable(self, water_g: float, temperature_c: float) -> float:
        return self.at(temperature_c) / 100.0 * water_g


def load_solubility_models(path=None) -> dict[str, SolubilityModel]:
    p = Path(path) if path is not None else _DATA / "solubility.json"
    doc = json.loads(p.read_text(encoding="utf-8"))
    return {
        name: SolubilityModel(name, tuple((float(t), float(s)) for t, s in rows))
        for name, rows in doc.items()
    }


# -- turbidity -------------------------------------------------------------------


def undissolved_fraction(solute_g: float, water_g: float, solubility: float) -> float:
    if solute_g <= 0:
        return 0.0
    return max(0.0, solute_g - solubility / 100.0 * water_g) / solute_g


def turbidity_observe(w: Workspace, dish: str, model: SolubilityModel, seed=None, *,
                      base: float = BASE_CLEAR, gain: float = TURBIDITY_GAIN,
                      noise: float = TURBIDITY_NOISE) -> float:
    """Brightness proxy of the solution in ``dish``, in [0, 1]."""
    v = w.vessel(dish)
    if not v.is_filled:
        raise SceneError(f"cannot observe turbidity: dish {dish!r} is empty")
    frac = undissolved_fraction(v.mass(model.species), v.mass(SOLVENT), model.at(w.temperature_of(dish)))
    value = base + gain * frac
    if noise > 0:
        value += np.random.default_rng(seed).normal(0.0, noise)
    return float(np.clip(value, 0.0, 1.0))


@dataclass
class TurbiditySeries:
    pour_index: list[int] = field(default_factory=list)
    water_g: list[float] = field(default_factory=list)
    turbidity: list[float] = field(default_factory=list)

    def append(self, pour_index: int, water_g: float, turbidity: float) -> None:
        if self.pour_index and pour_index <= self.pour_index[-1]:
            raise PerceptionError("pour indices must be strictly increasing")
        if not 0.0 <= turbidity <= 1.0:
            raise PerceptionError(f"turbidity {turbidity} outside [0, 1]")
        self.pour_index.append(int(pour_index))
        self.water_g.append(float(water_g))
        self.turbidity.append(float(turbidity))

    def __len__(self) -> int:
        return len(self.turbidity)

    def water_at(self, pour_index: int) -> float:
        return self.water_g[self.pour_index.index(pour_index)]


def detect_dissolved(series, threshold: float = DISSOLVE_THRESHOLD) -> int | None:
    """Smallest 1-based i with |T(i+1) - T(i)| < threshold, or None.

    ``series`` is a TurbiditySeries or a plain sequence of readings.
    """
    values = series.turbidity if isinstance(series, TurbiditySeries) else list(series)
    if len(values) < 2:
        return None
    diffs = np.abs(np.diff(values))
    hits = np.flatnonzero(diffs < threshold)
    return int(hits[0]) + 1 if len(hits) else None


# -- solubility arithmetic -------------------------------------------------------


def compute_solubility(solute_g: float, water_insufficient_g: float, water_sufficient_g: float) -> float:
    """g solute per 100 g water, using the mean of the bracketing water amounts."""
    if solute_g <= 0:
        raise ValueError("solute mass must be > 0")
    if water_insufficient_g < 0 or water_sufficient_g <= 0:
        raise ValueError("zero water: solubility undefined")
    if water_insufficient_g > water_sufficient_g:
        raise ValueError("insufficient water amount exceeds the sufficient one")
    return solute_g / ((water_insufficient_g + water_sufficient_g) / 2.0) * 100.0


def percent_error(measured: float, reference: float) -> float:
    return abs(measured - reference) / reference * 100.0


@dataclass(frozen=True)
class SolubilityResult:
    solute: str
    solute_g: float
    water_g: float
    solubility: float
    lit_value: float

    @property
    def reported(self) -> float:
        """Solubility as printed, to one decimal."""
        return round(self.solubility, 1)

    @property
    def pct_error(self) -> float:
        # the error column is derived from the printed solubility
        return percent_error(self.reported, self.lit_value)

    HEADER = ("solute", "solute_g", "water_g", "solubility", "lit_value", "pct_error")

    def row(self) -> list[str]:
        return [self.solute, f"{self.solute_g:.2f}", f"{self.water_g:.2f}", f"{self.reported:.1f}",
                f"{self.lit_value:.1f}", f"{self.pct_error:.1f}"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.HEADER)
        wr.writerow(self.row())
        return buf.getvalue()


def solubility_from_series(series: TurbiditySeries, solute: str, solute_g: float, lit_value: float,
                           threshold: float = DISSOLVE_THRESHOLD) -> SolubilityResult | None:
    i = detect_dissolved(series, threshold)
    if i is None:
        return None
    sufficient = series.water_g[i - 1]
    insufficient = series.water_g[i - 2] if i >= 2 else 0.0
    s = compute_solubility(solute_g, insufficient, sufficient)
    return SolubilityResult(solute, solute_g, (insufficient + sufficient) / 2.0, s, lit_value)


def experiment_log_csv(series: TurbiditySeries, threshold: float = DISSOLVE_THRESHOLD) -> str:
    """pour_index, water_g_cum, turbidity, dissolved_flag (1 from the first sufficient pour on)."""
    i = detect_dissolved(series, threshold)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["pour_index", "water_g_cum", "turbidity", "dissolved_flag"])
    for k, (idx, water, t) in enumerate(zip(series.pour_index, series.water_g, series.turbidity), start=1):
        wr.writerow([idx, f"{water:.3f}", f"{t:.6f}", int(i is not None and k >= i)])
    return buf.getvalue()


# -- recrystallization -----------------------------------------------------------


def recrystallization_yield(model: SolubilityModel, solute_g: float, water_g: float,
                            t_hot: float, t_cool: float) -> float:
    """Crystal mass precipitated when cooling a hot solution from t_hot to t_cool."""
    if t_cool > t_hot:
        raise ValueError("cooling temperature must not exceed the hot temperature")
    if solute_g > model.dissolvable(water_g, t_hot) + 1e-12:
        raise PerceptionError(
            f"{solute_g:g} g {model.species} is not fully dissolved in {water_g:g} g water at {t_hot:g} C"
        )
    return max(0.0, solute_g - model.dissolvable(water_g, t_cool))


# -- hand-eye calibration error --------------------------------------------------


@dataclass(frozen=True)
class CalibrationError:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("calibration rotation error must be a proper rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> CalibrationError:
        return cls(np.eye(3), np.zeros(3))


def position_error_and_bound(base_T_tool: Transform, tool_T_cam: Transform, p_obj_cam,
                             err: CalibrationError) -> tuple[np.ndarray, float]:
    """Object position error caused by a hand-eye calibration error, and its upper bound.

    With the true camera mount ``tool_T_cam`` and the calibrated one perturbed
    by (R_err, p_err), the base-frame position of an object seen at
    ``p_obj_cam`` shifts by R_bt R_tc (R_err - I) p + R_bt p_err. Its norm is
    at most ||R_err - I||_2 ||p|| + ||p_err||, with equality for pure
    translation errors.
    """
    p = np.asarray(p_obj_cam, dtype=float).reshape(3)
    D = err.rotation - np.eye(3)
    dp = base_T_tool.rotation @ (tool_T_cam.rotation @ (D @ p)) + base_T_tool.rotation @ err.translation
    bound = float(np.linalg.norm(D, 2) * np.linalg.norm(p) + np.linalg.norm(err.translation))
    return dp, bound
