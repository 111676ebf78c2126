"""End-to-end experiments: plan an XDL program, execute it, analyze the data."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

from labtamp.execute import ExecutionConfig, ExecutionResult, execute_plan
from labtamp.perception import (
    SOLVENT,
    SolubilityModel,
    SolubilityResult,
    load_solubility_models,
    recrystallization_yield,
    solubility_from_series,
)
from labtamp.scene import Workspace
from labtamp.taskplan import ExperimentAborted, Plan, StreamEnv, run_alg1
from labtamp.xdl import XdlProgram, to_goals


class AnalysisError(RuntimeError):
    pass


def _solute_in(w: Workspace, vessel: str) -> str:
    for c in w.vessel(vessel).contents:
        if c.species != SOLVENT and c.mass_g > 0:
            return c.species
    raise AnalysisError(f"no solute in {vessel!r}")


def _model(models: dict[str, SolubilityModel], species: str) -> SolubilityModel:
    if species not in models:
        raise AnalysisError(f"no solubility table for {species!r}")
    return models[species]


@dataclass
class SolubilityRun:
    plan: Plan
    execution: ExecutionResult
    result: SolubilityResult


def run_solubility(prog: XdlProgram, w: Workspace, env: StreamEnv, seed=0, pour_g: float | None = None,
                   cfg: ExecutionConfig = ExecutionConfig(),
                   models: dict[str, SolubilityModel] | None = None) -> SolubilityRun:
    """Pour water into a fixed solute charge until the turbidity settles.

    The reference value is the configured table at the dish temperature.
    ``pour_g`` overrides the Add amount of every pour.
    """
    models = models or load_solubility_models()
    repeat = [g for g in to_goals(prog, w.densities)[1] if g.repeat_until == "dissolved"]
    if not repeat:
        raise AnalysisError("the program has no Observe step repeated until 'dissolved'")
    dish = repeat[0].vessel
    solute = _solute_in(w, dish)
    solute_g = w.vessel(dish).mass(solute)
    model = _model(models, solute)

    plan = run_alg1(prog, w, env, seed=seed)
    if pour_g is not None:
        cfg = replace(cfg, pour_size_g=float(pour_g))
    execution = execute_plan(plan, w, env, cfg, seed=seed, models=models)
    series = execution.series.get(dish)
    lit = model.at(execution.workspace.temperature_of(dish))
    result = solubility_from_series(series, solute, solute_g, lit) if series is not None else None
    if result is None:
        raise ExperimentAborted(execution.repetitions.get(repeat[0].step, 0))
    return SolubilityRun(plan, execution, result)


@dataclass
class RecrystallizationRun:
    plan: Plan
    execution: ExecutionResult
    vessel: str
    solute: str
    solute_g: float
    water_g: float
    t_hot: float
    t_cool: float
    yield_g: float

    HEADER = ("vessel", "solute", "solute_g", "water_g", "t_hot_c", "t_cool_c", "yield_g")

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.HEADER)
        wr.writerow([self.vessel, self.solute, f"{self.solute_g:.4f}", f"{self.water_g:.4f}",
                     f"{self.t_hot:g}", f"{self.t_cool:g}", f"{self.yield_g:.4f}"])
        return buf.getvalue()


def with_cooling_temperature(prog: XdlProgram, t_cool: float) -> XdlProgram:
    """Replace the temperature of the last HeatChill step."""
    steps = list(prog.procedure)
    idx = [i for i, s in enumerate(steps) if s.kind == "HeatChill"]
    if not idx:
        raise AnalysisError("the program has no HeatChill step")
    steps[idx[-1]] = replace(steps[idx[-1]], temp_c=float(t_cool))
    return replace(prog, procedure=tuple(steps))


def run_recrystallization(prog: XdlProgram, w: Workspace, env: StreamEnv, seed=0, t_cool: float | None = None,
                          cfg: ExecutionConfig = ExecutionConfig(),
                          models: dict[str, SolubilityModel] | None = None) -> RecrystallizationRun:
    """Dissolve hot, cool, and compare the crystal mass with the solubility table.

    The hot temperature is the one at which dissolution was observed, the
    cool one the final temperature of the same vessel.
    """
    models = models or load_solubility_models()
    if t_cool is not None:
        prog = with_cooling_temperature(prog, t_cool)
    plan = run_alg1(prog, w, env, seed=seed)
    execution = execute_plan(plan, w, env, cfg, seed=seed, models=models)
    dissolved = [o for o in execution.observations if o.quantity == "dissolved"]
    if not dissolved:
        raise AnalysisError("the program never observes dissolution")
    vessel = dissolved[0].vessel
    wf = execution.workspace
    solute = _solute_in(wf, vessel)
    solute_g, water_g = wf.vessel(vessel).mass(solute), wf.vessel(vessel).mass(SOLVENT)
    t_hot, t_cool_ = dissolved[0].temperature_c, wf.temperature_of(vessel)
    try:
        y = recrystallization_yield(_model(models, solute), solute_g, water_g, t_hot, t_cool_)
    except ValueError as exc:
        raise AnalysisError(str(exc)) from None
    return RecrystallizationRun(plan, execution, vessel, solute, solute_g, water_g, t_hot, t_cool_, y)
