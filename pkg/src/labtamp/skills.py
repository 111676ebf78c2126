"""Pouring skill: shaping-gated PD controller, PD baseline, and a simulated plant.

The plant tilts a source vessel at a commanded rate. Liquid leaves once the
tilt passes a lip angle that rises as the vessel empties; granular material
avalanches with hysteresis (starts above ``theta_start``, keeps flowing until
the tilt drops below ``theta_stop``). The receiving scale reports quantized
mass with a pure dead time.

Both controllers share the same prior knowledge of the source vessel (its
initial contents and flow-onset geometry) to pre-tilt to just short of the
onset angle. The shaping controller gates the PD command with a pulse train
``s(t)``; in the gaps it retreats below the stop angle and waits for the
delayed scale to catch up.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

DT = 0.01


class PourError(RuntimeError):
    def __init__(self, message: str, trace: PourTrace | None = None):
        super().__init__(message)
        self.trace = trace


class PourTimeout(PourError):
    pass


class SourceExhausted(PourError):
    pass


@dataclass(frozen=True)
class ScaleParams:
    dead_time: float = 3.0
    sample_period: float = 0.1
    resolution: float = 0.1

    def __post_init__(self):
        if self.dead_time < 0:
            raise ValueError("dead time must be >= 0")


@dataclass(frozen=True)
class PlantParams:
    """Flow model for one source vessel and material."""

    material: str = "liquid"  # "liquid" | "granular"
    capacity_ml: float = 250.0
    density: float = 1.0  # g/mL
    initial_mass: float = 150.0
    flow_gain: float = 40.0  # g/s per rad past the onset angle
    # onset angle = onset_empty - onset_slope * fill, fill = volume / capacity
    onset_empty: float = 1.6
    onset_slope: float = 1.0
    hysteresis: float = 0.1  # theta_start - theta_stop (granular only)
    chunk_sigma: float = 0.3
    scale: ScaleParams = field(default_factory=ScaleParams)
    dt: float = DT

    def __post_init__(self):
        if self.material not in ("liquid", "granular"):
            raise ValueError(f"unknown material {self.material!r}")
        if self.hysteresis < 0:
            raise ValueError("theta_stop must not exceed theta_start")

    def fill(self, remaining: float) -> float:
        return max(0.0, remaining) / self.density / self.capacity_ml

    def onset_angle(self, remaining: float) -> float:
        """theta_lip for liquids, theta_start for granular."""
        return self.onset_empty - self.onset_slope * self.fill(remaining)

    def stop_angle(self, remaining: float) -> float:
        h = self.hysteresis if self.material == "granular" else 0.0
        return self.onset_angle(remaining) - h


@dataclass(frozen=True)
class PlantState:
    theta: float = 0.0
    source_mass: float = 0.0
    transferred: float = 0.0
    flowing: bool = False  # granular avalanche latch


def make_plant(material: str = "liquid", rng: np.random.Generator | None = None, **overrides) -> PlantParams:
    """Default plant for ``material``; ``rng`` jitters the flow gain by +-20 %."""
    if material == "liquid":
        p = PlantParams(material="liquid", capacity_ml=500.0, density=1.0, initial_mass=300.0,
                        flow_gain=25.0, onset_empty=1.6, onset_slope=1.0, hysteresis=0.0)
    elif material == "granular":
        p = PlantParams(material="granular", capacity_ml=500.0, density=1.2, initial_mass=300.0,
                        flow_gain=15.0, onset_empty=1.7, onset_slope=1.0, hysteresis=0.1)
    else:
        raise ValueError(f"unknown material {material!r}")
    if rng is not None:
        p = replace(p, flow_gain=p.flow_gain * rng.uniform(0.8, 1.2))
    return replace(p, **overrides) if overrides else p


def outflow_rate(params: PlantParams, state: PlantState) -> tuple[float, bool]:
    """Nominal (noise-free) outflow [g/s] and updated avalanche latch."""
    if state.source_mass <= 0:
        return 0.0, False
    onset = params.onset_angle(state.source_mass)
    if params.material == "liquid":
        return params.flow_gain * max(0.0, state.theta - onset), False
    stop = onset - params.hysteresis
    flowing = state.flowing
    if state.theta > onset:
        flowing = True
    elif state.theta < stop:
        flowing = False
    if not flowing:
        return 0.0, False
    return params.flow_gain * max(0.0, state.theta - stop), True


def plant_step(params: PlantParams, state: PlantState, rate: float, dt: float,
               rng: np.random.Generator | None = None) -> PlantState:
    """Advance tilt and mass transfer by one step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    theta = max(0.0, state.theta + rate * dt)
    s = replace(state, theta=theta)
    flow, flowing = outflow_rate(params, s)
    if flow > 0 and params.material == "granular" and rng is not None and params.chunk_sigma > 0:
        flow *= float(rng.lognormal(0.0, params.chunk_sigma))
    moved = min(flow * dt, s.source_mass)
    return PlantState(theta, s.source_mass - moved, s.transferred + moved, flowing)


class DelayedScale:
    """Quantized reading of the true mass ``dead_time`` seconds ago, sampled periodically."""

    def __init__(self, p: ScaleParams, dt: float):
        self.p = p
        self.delay_steps = int(round(p.dead_time / dt))
        self.sample_steps = max(1, int(round(p.sample_period / dt)))
        self.history: list[float] = []
        self.reading = 0.0
        self.previous = 0.0

    def quantize(self, m: float) -> float:
        r = self.p.resolution
        return round(m / r) * r if r > 0 else m

    def update(self, step: int, true_mass: float) -> float:
        self.history.append(true_mass)
        if step % self.sample_steps == 0:
            k = step - self.delay_steps
            self.previous = self.reading
            self.reading = self.quantize(self.history[k] if k >= 0 else 0.0)
        return self.reading


@dataclass(frozen=True)
class PourControllerConfig:
    kp: float = 0.02  # rad s^-1 g^-1
    kd: float = 0.0  # rad g^-1
    t_on: float = 1.0
    t_off: float = 4.0
    max_rate: float = 0.3  # rad/s
    target: float = 50.0  # g
    stop_band: float = 0.5  # g
    home_margin: float = 0.002  # rad short of the onset angle
    timeout: float = 300.0
    max_edot: float = 50.0  # g/s clamp on the error derivative

    def __post_init__(self):
        if self.t_on <= 0 or self.t_off <= 0:
            raise ValueError("shaping windows must be positive")
        if self.kp < 0 or self.kd < 0:
            raise ValueError("gains must be >= 0")

    def with_target(self, target: float) -> PourControllerConfig:
        return replace(self, target=float(target))

    def shaping(self, t: float) -> float:
        """Binary pulse train: 1 for t_on seconds, then 0 for t_off."""
        return 1.0 if math.fmod(t, self.t_on + self.t_off) < self.t_on else 0.0


@dataclass
class PourTrace:
    t: np.ndarray
    command: np.ndarray
    theta: np.ndarray
    true_mass: np.ndarray
    scale_reading: np.ndarray
    target: float = 0.0

    @property
    def final_mass(self) -> float:
        return float(self.true_mass[-1]) if len(self.true_mass) else 0.0

    @property
    def error(self) -> float:
        return self.final_mass - self.target

    @property
    def duration(self) -> float:
        return float(self.t[-1]) if len(self.t) else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t", "command", "theta", "true_mass", "scale_reading"])
            for row in zip(self.t, self.command, self.theta, self.true_mass, self.scale_reading):
                wr.writerow([f"{row[0]:.2f}"] + [f"{v:.6f}" for v in row[1:]])


def _run(params: PlantParams, cfg: PourControllerConfig, seed, gated: bool) -> PourTrace:
    if cfg.target > params.initial_mass:
        raise ValueError(f"target {cfg.target} g exceeds source mass {params.initial_mass} g")
    rng = np.random.default_rng(seed)
    dt = params.dt
    scale = DelayedScale(params.scale, dt)
    state = PlantState(0.0, params.initial_mass, 0.0, False)
    T, U, TH, M, Y = [], [], [], [], []

    def record(t, u):
        T.append(t)
        U.append(u)
        TH.append(state.theta)
        M.append(state.transferred)
        Y.append(scale.reading)

    def trace():
        return PourTrace(np.array(T), np.array(U), np.array(TH), np.array(M), np.array(Y), cfg.target)

    step = 0
    scale.update(step, 0.0)
    record(0.0, 0.0)
    if cfg.target - scale.reading <= cfg.stop_band:
        return trace()

    phase = "approach"
    cycle_start = 0.0
    idle_since = None
    edot = 0.0
    n_max = int(round(cfg.timeout / dt))
    while step < n_max:
        t = step * dt
        y = scale.reading
        e = cfg.target - y
        if step % scale.sample_steps == 0:
            edot = float(np.clip(-(scale.reading - scale.previous) / params.scale.sample_period,
                                 -cfg.max_edot, cfg.max_edot))
        remaining_est = params.initial_mass - y
        ready = params.onset_angle(remaining_est) - cfg.home_margin
        home = params.stop_angle(remaining_est) - cfg.home_margin
        done = e <= cfg.stop_band
        if done:
            # retreat, then settle for one off-window before declaring the pour finished
            u = -max(0.0, state.theta - home) / dt
            if state.theta <= home + 1e-9:
                idle_since = t if idle_since is None else idle_since
                if t - idle_since >= cfg.t_off - 1e-9:
                    break
            else:
                idle_since = None
        elif phase == "approach":
            # transit at full rate to just short of the onset angle
            u = (ready - state.theta) / dt
            if state.theta >= ready - 1e-9:
                phase = "pour"
                cycle_start = t
                u = 0.0
        else:
            idle_since = None
            s = cfg.shaping(t - cycle_start) if gated else 1.0
            if s > 0:
                u = s * (cfg.kp * e + cfg.kd * edot)
            else:
                # retreat below the stop angle, then hold
                u = -max(0.0, state.theta - home) / dt
                if cfg.shaping(t + dt - cycle_start) > 0:
                    phase = "approach"
        u = float(np.clip(u, -cfg.max_rate, cfg.max_rate))
        state = plant_step(params, state, u, dt, rng)
        step += 1
        scale.update(step, state.transferred)
        record(step * dt, u)
        if state.source_mass <= 0 and not done:
            raise SourceExhausted("source exhausted before reaching the target", trace())
    else:
        raise PourTimeout(f"pour did not settle within {cfg.timeout} s", trace())
    return trace()


def pour_shaping(plant: PlantParams, cfg: PourControllerConfig, seed=0) -> PourTrace:
    """Closed-loop pour with the PD command gated by the shaping pulse train."""
    return _run(plant, cfg, seed, gated=True)


def pour_pd_baseline(plant: PlantParams, cfg: PourControllerConfig, seed=0) -> PourTrace:
    """Same loop with s(t) = 1: a plain PD on the delayed scale reading."""
    return _run(plant, cfg, seed, gated=False)
