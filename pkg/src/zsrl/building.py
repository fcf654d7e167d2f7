"""Resistance-capacitance thermal building simulator with a daily grid-carbon profile.

Each zone follows a first-order RC update driven by the exterior temperature,
neighbouring zones and an HVAC heat flow.  The controller chooses per-zone
setpoints; a proportional controller inside the simulator turns them into
electrical power ``u`` (positive heats, negative cools) and delivered heat
``cop * u``.  Energy is reported in kWh and carbon intensity in g/kWh.

Exterior temperature and carbon intensity are deterministic functions of time
(plus a per-day exterior offset drawn from the episode seed) and are exposed
to controllers as forecasts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

STEP_MINUTES = 10
STEPS_PER_DAY = 24 * 60 // STEP_MINUTES
SECONDS_PER_STEP = STEP_MINUTES * 60.0
J_PER_KWH = 3.6e6


@dataclass(frozen=True)
class CarbonProfile:
    """``c(h) = mean + a12 cos(4 pi (h - h12) / 24) + a24 cos(2 pi (h - h24) / 24)``.

    The half-day harmonic peaks at 08:00 and 20:00; the daily harmonic lifts
    the evening peak.  Both harmonics integrate to zero over a day, so the
    daily mean is ``mean`` exactly.
    """

    mean: float = 250.0
    a12: float = 60.0
    h12: float = 8.0
    a24: float = 20.0
    h24: float = 19.0

    def __call__(self, hour):
        hour = np.asarray(hour, dtype=np.float64)
        return (
            self.mean
            + self.a12 * np.cos(4 * np.pi * (hour - self.h12) / 24)
            + self.a24 * np.cos(2 * np.pi * (hour - self.h24) / 24)
        )


@dataclass(frozen=True)
class ExteriorProfile:
    mean: float = 10.0
    amplitude: float = 5.0
    peak_hour: float = 15.0
    daily_offset: float = 2.0

    def __call__(self, hour, day_offsets: Optional[np.ndarray] = None):
        hour = np.asarray(hour, dtype=np.float64)
        base = self.mean + self.amplitude * np.cos(2 * np.pi * (hour - self.peak_hour) / 24)
        if day_offsets is None:
            return base
        day = np.clip((hour // 24).astype(int), 0, len(day_offsets) - 1)
        return base + day_offsets[day]


@dataclass(frozen=True)
class BuildingConfig:
    """Frozen simulator constants (SI units unless noted)."""

    name: str
    capacitance: Tuple[float, ...]  # J/K per zone
    loss: Tuple[float, ...]  # W/K to exterior per zone
    coupling: float = 0.0  # W/K between consecutive zones
    cop: float = 3.0
    gain: float = 300.0  # proportional controller, W per K of setpoint error
    max_power: float = 1500.0  # electrical W per zone
    noise_std: float = 0.02  # K per step
    setpoint_bounds: Tuple[float, float] = (16.0, 26.0)
    initial_temp: float = 21.0
    carbon: CarbonProfile = field(default_factory=CarbonProfile)
    exterior: ExteriorProfile = field(default_factory=ExteriorProfile)

    @property
    def n_zones(self) -> int:
        return len(self.capacitance)


SIMS = {
    "rc1zone": BuildingConfig("rc1zone", capacitance=(3.0e6,), loss=(150.0,)),
    "rc3zone": BuildingConfig(
        "rc3zone", capacitance=(2.5e6, 3.0e6, 3.5e6), loss=(120.0, 150.0, 180.0), coupling=60.0
    ),
}


@dataclass(frozen=True)
class BuildingState:
    zone_temps: np.ndarray
    exterior_temp: float
    step: int
    carbon: float
    power: np.ndarray

    @property
    def hour(self) -> float:
        return hour_of_step(self.step)

    def __post_init__(self):
        if not np.all(np.isfinite(self.zone_temps)):
            raise ValueError("zone temperatures must be finite")
        if self.carbon < 0:
            raise ValueError("carbon intensity must be non-negative")


def hour_of_step(step) -> np.ndarray:
    return np.asarray(step, dtype=np.float64) * STEP_MINUTES / 60.0


def hvac_power(cfg: BuildingConfig, temps: np.ndarray, setpoints: np.ndarray) -> np.ndarray:
    """Electrical power per zone from the proportional setpoint controller."""
    return np.clip(cfg.gain * (setpoints - temps), -cfg.max_power, cfg.max_power)


def zone_update(cfg: BuildingConfig, temps: np.ndarray, exterior: float, power: np.ndarray, dt: float) -> np.ndarray:
    """Noiseless explicit-Euler RC step ``T + dt / C (K (T_ext - T) + coupling + cop u)``."""
    c = np.asarray(cfg.capacitance)
    k = np.asarray(cfg.loss)
    flow = k * (exterior - temps) + cfg.cop * power
    if cfg.n_zones > 1 and cfg.coupling:
        diff = np.zeros_like(temps)
        diff[:-1] += temps[1:] - temps[:-1]
        diff[1:] += temps[:-1] - temps[1:]
        flow = flow + cfg.coupling * diff
    return temps + dt / c * flow


class ThermalSim:
    """Stateful wrapper: owns the day offsets and the noise stream of one episode."""

    def __init__(self, cfg: BuildingConfig, days: int, seed: int, noise: bool = True):
        self.cfg = cfg
        self.days = days
        self.rng = np.random.default_rng(seed)
        self.day_offsets = self.rng.uniform(-cfg.exterior.daily_offset, cfg.exterior.daily_offset, days + 2)
        self.noise = noise

    def exterior(self, step) -> np.ndarray:
        return self.cfg.exterior(hour_of_step(step), self.day_offsets)

    def carbon(self, step) -> np.ndarray:
        return self.cfg.carbon(hour_of_step(step))

    def reset(self) -> BuildingState:
        n = self.cfg.n_zones
        return BuildingState(
            np.full(n, self.cfg.initial_temp), float(self.exterior(0)), 0, float(self.carbon(0)), np.zeros(n)
        )

    def step(self, state: BuildingState, setpoints: np.ndarray) -> Tuple[BuildingState, float]:
        """Advance one control interval; returns the new state and the energy used (kWh)."""
        new, energy = thermal_sim_step(self.cfg, state, setpoints, SECONDS_PER_STEP, self.rng if self.noise else None)
        t = new.step
        return replace(new, exterior_temp=float(self.exterior(t)), carbon=float(self.carbon(t))), energy


def thermal_sim_step(
    cfg: BuildingConfig,
    state: BuildingState,
    setpoints: np.ndarray,
    dt: float = SECONDS_PER_STEP,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[BuildingState, float]:
    """One RC step under setpoint control; ``energy = sum |u| dt`` in kWh."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    lo, hi = cfg.setpoint_bounds
    setpoints = np.clip(np.asarray(setpoints, dtype=np.float64), lo, hi)
    power = hvac_power(cfg, state.zone_temps, setpoints)
    temps = zone_update(cfg, state.zone_temps, state.exterior_temp, power, dt)
    if rng is not None and cfg.noise_std > 0:
        temps = temps + rng.normal(0.0, cfg.noise_std, temps.shape)
    energy = float(np.abs(power).sum() * dt / J_PER_KWH)
    steps = int(round(dt / SECONDS_PER_STEP))
    new = BuildingState(temps, state.exterior_temp, state.step + steps, state.carbon, power)
    return new, energy


# ---------------------------------------------------------------------------
# reward and baseline controllers


@dataclass(frozen=True)
class ComfortRewardConfig:
    phi_emissions_weight: float = 0.001
    T_low: float = 19.0
    T_high: float = 24.0

    def __post_init__(self):
        if not self.T_low < self.T_high:
            raise ValueError("T_low must be below T_high")


def temperature_term(temps, cfg: ComfortRewardConfig):
    """Per-zone ``0`` inside the comfort band, else ``-min((T_low - T)^2, (T_high - T)^2)``."""
    temps = np.asarray(temps, dtype=np.float64)
    outside = (temps < cfg.T_low) | (temps > cfg.T_high)
    pen = np.minimum((cfg.T_low - temps) ** 2, (cfg.T_high - temps) ** 2)
    return np.where(outside, -pen, 0.0)


def building_reward(temps, energy, carbon, cfg: ComfortRewardConfig = ComfortRewardConfig()):
    """Returns ``(reward, emissions term, temperature term)``; the temperature term sums over zones."""
    emissions = -cfg.phi_emissions_weight * np.asarray(energy) * np.asarray(carbon)
    temp = temperature_term(temps, cfg).sum(-1)
    return emissions + temp, emissions, temp


RBC_LOW, RBC_HIGH, RBC_STEP = 21.2, 22.8, 0.5


def rbc_action(temps, setpoints, bounds=(16.0, 26.0)) -> np.ndarray:
    """Raise a zone's setpoint by 0.5 at or below 21.2 C, lower it at or above 22.8 C, else hold."""
    temps = np.asarray(temps, dtype=np.float64)
    sp = np.asarray(setpoints, dtype=np.float64).copy()
    sp = np.where(temps <= RBC_LOW, sp + RBC_STEP, sp)
    sp = np.where(temps >= RBC_HIGH, sp - RBC_STEP, sp)
    return np.clip(sp, *bounds)


def random_walk_action(prev, bounds, delta: float, rng: np.random.Generator) -> np.ndarray:
    """``clip(a + U(-delta, delta))`` per coordinate."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    prev = np.asarray(prev, dtype=np.float64)
    step = rng.uniform(-delta, delta, prev.shape) if delta > 0 else np.zeros_like(prev)
    return np.clip(prev + step, *bounds)
