"""Simulator configuration: one JSON file, two presets.

Keys (all optional, defaults shown by ``SimConfig().to_dict()``):

    n_hosts, n_vms        cluster size for generated inputs
    n_intervals           scheduling intervals to play (144 = 24 h at 10 min)
    interval_s            scheduling interval, seconds
    u_max                 CPU overload threshold, fraction
    t_red_c               ambient temperature threshold, °C
    degradation           CPU share withheld from a migrating VM
    bandwidth_mbps        per-host migration bandwidth
    t_supply_c            cooling supply air temperature, °C
    host_cores, host_ram_mb
    flavor_mix            weights for 1c4g, 2c8g, 4c16g, 8c32g
    power_curve           [[utilization %, watts], ...]
    rc                    {"R": K/W, "C": J/K, "t_initial_k": K}
    guard_margin_c        slack around each host's training target range
    guard                 enable the out-of-range prediction guard
    hist_bin_c            temperature histogram bin width
    policy                {"granite": {"s": 1.0}}
    seed                  seeds generated traces
    trace_dir             trace directory; generated from ``seed`` when null
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .sim import HostSpec, SimParams
from .thermal import DEFAULT_POWER_CURVE, PowerCurve, RcParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_hosts: int = 20
    n_vms: int = 100
    n_intervals: int = 144
    interval_s: float = 600.0
    u_max: float = 0.9
    t_red_c: float = 105.0
    degradation: float = 0.1
    bandwidth_mbps: float = 1000.0
    t_supply_c: float = 25.0
    host_cores: int = 64
    host_ram_mb: float = 524288.0
    flavor_mix: tuple[float, ...] = (0.3, 0.3, 0.25, 0.15)
    power_curve: tuple[tuple[float, float], ...] = DEFAULT_POWER_CURVE.points
    rc: dict = field(default_factory=lambda: {"R": 0.34, "C": 340.0, "t_initial_k": 318.0})
    guard_margin_c: float = 10.0
    guard: bool = True
    hist_bin_c: float = 2.0
    policy: dict = field(default_factory=lambda: {"granite": {"s": 1.0}})
    seed: int = 0
    trace_dir: str | None = None

    def __post_init__(self):
        if self.n_hosts < 1 or self.n_vms < 0 or self.n_intervals < 1 or self.interval_s <= 0:
            raise ConfigError("counts and interval must be positive")
        if not 0 < self.u_max <= 1:
            raise ConfigError("u_max must be in (0, 1]")
        if not 0 <= self.degradation <= 1:
            raise ConfigError("degradation must be in [0, 1]")
        if len(self.flavor_mix) != 4 or min(self.flavor_mix) < 0 or sum(self.flavor_mix) <= 0:
            raise ConfigError("flavor_mix needs four nonnegative weights")
        object.__setattr__(self, "flavor_mix", tuple(float(w) for w in self.flavor_mix))
        object.__setattr__(self, "power_curve", PowerCurve(tuple(map(tuple, self.power_curve))).points)
        self.rc_params().validate()

    @classmethod
    def desk(cls, **overrides) -> "SimConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "SimConfig":
        return cls(**{"n_hosts": 75, "n_vms": 750, **overrides})

    def params(self) -> SimParams:
        return SimParams(self.interval_s, self.u_max, self.t_red_c, self.degradation, self.t_supply_c)

    def host_spec(self) -> HostSpec:
        return HostSpec(self.host_cores, self.host_ram_mb, PowerCurve(self.power_curve), self.bandwidth_mbps)

    def rc_params(self) -> RcParams:
        return RcParams(self.rc["R"], self.rc["C"], self.rc["t_initial_k"])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flavor_mix"] = list(self.flavor_mix)
        d["power_curve"] = [list(p) for p in self.power_curve]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        if "flavor_mix" in kw:
            kw["flavor_mix"] = tuple(kw["flavor_mix"])
        if "power_curve" in kw:
            kw["power_curve"] = tuple(tuple(p) for p in kw["power_curve"])
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "SimConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        preset = d.pop("preset", "desk")
        if preset not in ("desk", "full"):
            raise ConfigError(f"unknown preset {preset!r}")
        base = cls.full() if preset == "full" else cls.desk()
        merged = {**base.to_dict(), **d}
        return cls.from_dict(merged)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
