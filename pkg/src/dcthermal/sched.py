"""Placement policies: thermal-aware (TAS), round-robin, and a GRANITE-style baseline.

All three place VMs one at a time against a :class:`~dcthermal.sim.PlacementContext`,
committing each placement before evaluating the next so that a pass never
stacks every VM onto the single coolest or emptiest host.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .sim import PlacementContext, PlacementExhausted
from .thermal import FanModel, cop, power_at

GUARD_MARGIN = 10.0  # °C beyond the training target range


@dataclass(frozen=True)
class PredictionGuard:
    lower: float
    upper: float
    enabled: bool = True

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"guard lower {self.lower} must be below upper {self.upper}")

    @classmethod
    def from_bounds(cls, target_bounds: tuple[float, float], margin: float = GUARD_MARGIN) -> "PredictionGuard":
        lo, hi = target_bounds
        return cls(lo - margin, hi + margin)

    def admits(self, value: float) -> bool:
        return math.isfinite(value) and self.lower <= value <= self.upper


@dataclass(frozen=True)
class GuardedPrediction:
    value: float
    flag: str  # "ok", "fallback" (peer average) or "critical" (clamped own)
    raw: float

    @property
    def flagged(self) -> bool:
        return self.flag != "ok"


def guarded_predict(predictors: Mapping, guards: Mapping, host_id: str, x) -> GuardedPrediction:
    """Own-model prediction if inside the host's guard bounds, else the peer average.

    Peers whose own predictions fall outside their own bounds are left out
    of the average. If no peer qualifies, the own prediction is clamped into
    bounds and flagged critical.
    """
    if host_id not in predictors:
        raise KeyError(host_id)
    raw = float(predictors[host_id].predict(x))
    guard = guards.get(host_id)
    if guard is None or not guard.enabled:
        if not math.isfinite(raw):
            raise ValueError(f"host {host_id}: non-finite prediction with guard disabled")
        return GuardedPrediction(raw, "ok", raw)
    if guard.admits(raw):
        return GuardedPrediction(raw, "ok", raw)
    peers = []
    for h in sorted(predictors):
        if h == host_id:
            continue
        v = float(predictors[h].predict(x))
        g = guards.get(h)
        if (g.admits(v) if g is not None else math.isfinite(v)):
            peers.append(v)
    if peers:
        return GuardedPrediction(math.fsum(peers) / len(peers), "fallback", raw)
    clamped = guard.lower if not math.isfinite(raw) or raw < guard.lower else guard.upper
    return GuardedPrediction(clamped, "critical", raw)


@dataclass
class HostModels:
    """Per-host temperature predictors, guards and fan estimators."""

    predictors: dict
    fans: dict[str, FanModel]
    guards: dict[str, PredictionGuard] = field(default_factory=dict)

    @classmethod
    def build(cls, predictors: Mapping, fans: Mapping[str, FanModel], margin: float = GUARD_MARGIN,
              guard: bool = True) -> "HostModels":
        guards = {}
        if guard:
            guards = {h: PredictionGuard.from_bounds(m.target_bounds, margin) for h, m in predictors.items()}
        return cls(dict(predictors), dict(fans), guards)

    def predict(self, host_id: str, x) -> GuardedPrediction:
        return guarded_predict(self.predictors, self.guards, host_id, x)


@dataclass
class ScheduleMap:
    assignments: dict[str, str] = field(default_factory=dict)
    new_activations: list[str] = field(default_factory=list)


def build_feature_vector(ctx: PlacementContext, host_id: str, pending_vm: str | None = None) -> np.ndarray:
    """Features of ``host_id`` as it would be with ``pending_vm`` added."""
    load = ctx.load_with(host_id, add=[pending_vm] if pending_vm else [])
    return ctx.feature_vector(host_id, load)


def _candidates(ctx: PlacementContext, targets, exclude, active: bool) -> list[str]:
    if targets is not None:
        pool = set(targets) if active else set()
    else:
        pool = set(ctx.active) if active else set(ctx.cluster.hosts) - set(ctx.active)
    return sorted(pool - set(exclude))


class Policy:
    name = "base"
    consolidates = True

    def overload_threshold(self, ctx: PlacementContext) -> float:
        """CPU percent above which a host counts as overloaded this interval."""
        self.cap = ctx.params.u_max_pct
        return self.cap

    def place(self, vms: Sequence[str], ctx: PlacementContext, targets: Iterable[str] | None = None,
              exclude: Iterable[str] = (), allow_activation: bool = True,
              u_cap_pct: float | None = None) -> ScheduleMap:
        raise NotImplementedError

    def _cap(self, ctx, u_cap_pct):
        if u_cap_pct is not None:
            return u_cap_pct
        return getattr(self, "cap", ctx.params.u_max_pct)


class ThermalAware(Policy):
    """Coolest feasible active host; activate the coolest inactive one if none fits."""

    name = "tas"

    def __init__(self, record: bool = True):
        self.record = record

    def _evaluate(self, ctx, hosts, vm, cap):
        out = []
        for h in hosts:
            load = ctx.load_with(h, add=[vm])
            spec = ctx.cluster.hosts[h]
            temp = ctx.predict(h, load).value
            util = 100.0 * load.demand / spec.cores
            ram_ok = load.ram <= spec.ram
            ok = temp < ctx.params.t_red and util <= cap and ram_ok
            out.append((h, temp, util, ram_ok, ok, load))
        return out

    def place(self, vms, ctx, targets=None, exclude=(), allow_activation=True, u_cap_pct=None):
        cap = self._cap(ctx, u_cap_pct)
        result = ScheduleMap()
        for vm in vms:
            evals = self._evaluate(ctx, _candidates(ctx, targets, exclude, True), vm, cap)
            feasible = [(t, h) for h, t, _, _, ok, _ in evals if ok]
            activated = False
            if not feasible and allow_activation and targets is None:
                more = self._evaluate(ctx, _candidates(ctx, None, exclude, False), vm, cap)
                feasible = [(t, h) for h, t, _, _, ok, _ in more if ok]
                evals += more
                activated = bool(feasible)
            if self.record:
                ctx.decisions.append({
                    "interval": ctx.i, "vm": vm, "activation": activated, "cap": cap,
                    "chosen": min(feasible)[1] if feasible else None,
                    "candidates": [
                        {"host": h, "temp": t, "util": u, "ram_ok": r, "feasible": ok,
                         "x": ctx.recorded_vector(h, load).tolist()}
                        for h, t, u, r, ok, load in evals
                    ],
                })
            if not feasible:
                raise PlacementExhausted(vm, "no feasible active or inactive host")
            _, host = min(feasible)
            if activated:
                result.new_activations.append(host)
            ctx.add(vm, host)
            result.assignments[vm] = host
        return result


class RoundRobin(Policy):
    """Circular walk over every host, skipping infeasible ones; never consolidates."""

    name = "rr"
    consolidates = False

    def __init__(self):
        self.cursor = 0

    def place(self, vms, ctx, targets=None, exclude=(), allow_activation=True, u_cap_pct=None):
        cap = self._cap(ctx, u_cap_pct)
        hosts = ctx.cluster.host_ids
        allowed = set(targets) if targets is not None else set(hosts)
        allowed -= set(exclude)
        result = ScheduleMap()
        for vm in vms:
            n = len(hosts)
            for k in range(n):
                idx = (self.cursor + k) % n
                h = hosts[idx]
                if h not in allowed or (not allow_activation and h not in ctx.active):
                    continue
                if ctx.fits(h, vm, cap)[0]:
                    if h not in ctx.active:
                        result.new_activations.append(h)
                    ctx.add(vm, h)
                    result.assignments[vm] = h
                    self.cursor = (idx + 1) % n
                    break
            else:
                raise PlacementExhausted(vm, "full cycle without a feasible host")
        return result


def dynamic_threshold(utilizations: Sequence[float], s: float = 1.0, ceiling: float = 90.0) -> float:
    """min(ceiling, mean + s * population std) of host utilizations (percent)."""
    u = np.asarray(utilizations, dtype=float)
    if u.size < 2:
        return ceiling
    return float(min(ceiling, u.mean() + s * u.std()))


class Granite(Policy):
    """Consolidating baseline with a load-adaptive overload threshold.

    Placement picks the host whose computing plus cooling power rises least,
    breaking ties by predicted temperature and then host id.
    """

    name = "granite"

    def __init__(self, s: float = 1.0):
        self.s = s

    def overload_threshold(self, ctx):
        utils = [ctx.utilization(h) for h in sorted(ctx.active) if ctx.loads[h].n_vm]
        self.cap = dynamic_threshold(utils, self.s, ctx.params.u_max_pct)
        return self.cap

    def _cost(self, ctx, h, vm, cap, activating):
        spec = ctx.cluster.hosts[h]
        load = ctx.load_with(h, add=[vm])
        util = 100.0 * load.demand / spec.cores
        # an empty host always takes one VM, whatever the dynamic threshold says
        limit = ctx.params.u_max_pct if activating else cap
        temp = ctx.predict(h, load).value
        if util > limit or load.ram > spec.ram or temp >= ctx.params.t_red:
            return None
        before = 0.0 if activating else power_at(spec.power_curve, ctx.utilization(h))
        delta = power_at(spec.power_curve, min(util, 100.0)) - before
        return (delta * (1.0 + 1.0 / cop(ctx.params.t_supply)), temp, h)

    def place(self, vms, ctx, targets=None, exclude=(), allow_activation=True, u_cap_pct=None):
        cap = self._cap(ctx, u_cap_pct)
        result = ScheduleMap()
        for vm in vms:
            costs = [c for h in _candidates(ctx, targets, exclude, True)
                     if (c := self._cost(ctx, h, vm, cap, False)) is not None]
            if not costs and allow_activation and targets is None:
                costs = [c for h in _candidates(ctx, None, exclude, False)
                         if (c := self._cost(ctx, h, vm, cap, True)) is not None]
                if costs:
                    result.new_activations.append(min(costs)[2])
            if not costs and allow_activation and targets is None:
                # nothing left to switch on: the static ceiling is the hard limit
                hard = ctx.params.u_max_pct
                costs = [c for h in _candidates(ctx, None, exclude, True)
                         if (c := self._cost(ctx, h, vm, hard, False)) is not None]
            if not costs:
                raise PlacementExhausted(vm, "no host within the utilization thresholds")
            host = min(costs)[2]
            ctx.add(vm, host)
            result.assignments[vm] = host
        return result


POLICIES = {"tas": ThermalAware, "rr": RoundRobin, "granite": Granite}


def make_policy(name: str, **params) -> Policy:
    try:
        cls = POLICIES[name]
    except KeyError:
        raise ValueError(f"unknown policy {name!r}; choose from {sorted(POLICIES)}") from None
    return cls(**params)


def tas_place(vms, ctx, **kw) -> ScheduleMap:
    return ThermalAware().place(vms, ctx, **kw)


def rr_place(vms, ctx, policy: RoundRobin | None = None, **kw) -> ScheduleMap:
    return (policy or RoundRobin()).place(vms, ctx, **kw)


def granite_place(vms, ctx, s: float = 1.0, **kw) -> ScheduleMap:
    g = Granite(s)
    g.overload_threshold(ctx)
    return g.place(vms, ctx, **kw)
