"""Analytical RC temperature model, power curve, fan estimator, energy accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .regress import LinearModel, fit_ols
from .telemetry import FEATURE_NAMES, Dataset

KELVIN = 273.15

FAN_COLUMNS = ("fs_1", "fs_2", "fs_3", "fs_4")
NON_FAN_FEATURES = tuple(n for n in FEATURE_NAMES if n not in FAN_COLUMNS)


def kelvin_to_celsius(t: float) -> float:
    return t - KELVIN


@dataclass(frozen=True)
class RcParams:
    R: float = 0.34  # K/W
    C: float = 340.0  # J/K
    t_initial: float = 318.0  # K

    def validate(self) -> None:
        if not (self.R > 0 and self.C > 0):
            raise ValueError("R and C must be positive")
        if not self.t_initial > 0:
            raise ValueError("t_initial must be a positive absolute temperature")

    @property
    def tau(self) -> float:
        return self.R * self.C


def rc_temperature(p: float, t_in: float, t: float, params: RcParams = RcParams()) -> float:
    """CPU temperature (°C) after ``t`` seconds at power ``p`` with inlet ``t_in`` (°C)."""
    params.validate()
    if t < 0:
        raise ValueError("t must be >= 0")
    steady = p * params.R + t_in
    t0 = kelvin_to_celsius(params.t_initial)
    return steady + (t0 - steady) * math.exp(-t / params.tau)


@dataclass(frozen=True)
class PowerCurve:
    """Utilization (%) -> watts, piecewise linear between knots."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(u), float(w)) for u, w in self.points)
        if len(pts) < 2:
            raise ValueError("a power curve needs at least two points")
        us = [u for u, _ in pts]
        ws = [w for _, w in pts]
        if us[0] != 0.0 or us[-1] != 100.0:
            raise ValueError("power curve must cover 0 and 100 percent")
        if any(b <= a for a, b in zip(us, us[1:])):
            raise ValueError("utilization knots must be strictly increasing")
        if any(b < a for a, b in zip(ws, ws[1:])):
            raise ValueError("watts must be nondecreasing in utilization")
        object.__setattr__(self, "points", pts)

    @property
    def idle(self) -> float:
        return self.points[0][1]

    @property
    def peak(self) -> float:
        return self.points[-1][1]

    def to_list(self) -> list[list[float]]:
        return [list(p) for p in self.points]


# Stand-in for a vendor SPECpower table: concave shape spanning the observed
# idle/peak draw of the modelled hosts (56 W .. 380 W). Not measured data.
_SHAPE = (0.0, 0.17, 0.30, 0.41, 0.51, 0.60, 0.69, 0.77, 0.85, 0.93, 1.0)
DEFAULT_POWER_CURVE = PowerCurve(tuple((10.0 * i, 56.0 + 324.0 * f) for i, f in enumerate(_SHAPE)))


def power_at(curve: PowerCurve, utilization: float) -> float:
    if not 0.0 <= utilization <= 100.0:
        raise ValueError(f"utilization {utilization} outside [0, 100]")
    pts = curve.points
    for (u0, w0), (u1, w1) in zip(pts, pts[1:]):
        if utilization <= u1:
            if utilization == u1:
                return w1
            return w0 + (w1 - w0) * (utilization - u0) / (u1 - u0)
    return pts[-1][1]


def cop(t_supply: float) -> float:
    """Chiller coefficient of performance at supply air temperature (°C)."""
    return 0.0068 * t_supply ** 2 + 0.0008 * t_supply + 0.458


def cooling_energy(computing_kwh: float, t_supply: float = 25.0) -> float:
    if computing_kwh < 0:
        raise ValueError("computing energy must be >= 0")
    return computing_kwh / cop(t_supply)


@dataclass(frozen=True)
class EnergyLedger:
    computing_kwh: float = 0.0
    cooling_kwh: float = 0.0

    def __post_init__(self):
        if self.computing_kwh < 0 or self.cooling_kwh < 0:
            raise ValueError("energy must be >= 0")

    @property
    def total_kwh(self) -> float:
        return self.computing_kwh + self.cooling_kwh

    @classmethod
    def from_computing(cls, computing_kwh: float, t_supply: float = 25.0) -> "EnergyLedger":
        return cls(computing_kwh, cooling_energy(computing_kwh, t_supply))


class UnfittedModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class FanModel:
    """Four per-fan linear regressions on the non-fan features, with clamps."""

    models: tuple[LinearModel, ...]
    bounds: tuple[tuple[float, float], ...]
    input_names: tuple[str, ...] = NON_FAN_FEATURES


def fit_fan_model(d: Dataset) -> FanModel:
    cols = [d.feature_names.index(n) for n in NON_FAN_FEATURES]
    X = d.rows[:, cols]
    models, bounds = [], []
    for name in FAN_COLUMNS:
        y = d.rows[:, d.feature_names.index(name)]
        sub = Dataset(d.host_id, X, y, NON_FAN_FEATURES)
        models.append(fit_ols(sub))
        bounds.append((float(y.min()), float(y.max())))
    return FanModel(tuple(models), tuple(bounds))


def estimate_fan_speeds(model: FanModel | None, features_without_fans: Sequence[float]) -> tuple[float, ...]:
    if model is None or len(model.models) != len(FAN_COLUMNS):
        raise UnfittedModelError("fan model is not fitted")
    x = np.asarray(features_without_fans, dtype=float)
    out = []
    for m, (lo, hi) in zip(model.models, model.bounds):
        out.append(min(max(float(m.predict(x)), lo), hi))
    return tuple(out)
