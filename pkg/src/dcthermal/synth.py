"""Synthetic telemetry and workload traces with a known thermal ground truth.

Host rows are built the same way the simulator aggregates VMs onto a host,
so the simulator's feature vectors fall inside the training distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .telemetry import HostRecord
from .thermal import DEFAULT_POWER_CURVE, PowerCurve, power_at

FLAVORS = {
    "1c4g": (1, 4096.0),
    "2c8g": (2, 8192.0),
    "4c16g": (4, 16384.0),
    "8c32g": (8, 32768.0),
}
FLAVOR_NAMES = tuple(FLAVORS)

HOST_CORES = 64
HOST_RAM_MB = 524288.0
FAN_IDLE_RPM = 5650.0
FAN_RPM_PER_WATT = 12.0
FAN_ZONE_SWING = 1500.0  # zone controller offset, independent of host power
THROTTLE_KNEE = 75.0  # °C; above it frequency scaling flattens the rise
THROTTLE_SLOPE = 0.3


@dataclass(frozen=True)
class HostProfile:
    """Per-host thermal character: where it sits and how well it sheds heat."""

    host_id: str
    inlet_base: float  # °C at idle
    cpu_offset: float  # °C added to every CPU reading
    resistance: float  # scales the power-driven CPU rise
    idle: bool = False  # host only ever saw near-zero load in its telemetry


def make_profiles(n_hosts: int, seed: int, idle_hosts: int = 0) -> list[HostProfile]:
    rng = np.random.default_rng([seed, 11])
    width = max(2, len(str(n_hosts - 1)))
    out = []
    for i in range(n_hosts):
        out.append(HostProfile(
            host_id=f"h{i:0{width}d}",
            inlet_base=float(rng.uniform(13.0, 22.0)),
            cpu_offset=float(rng.uniform(0.0, 14.0)),
            resistance=float(rng.uniform(0.9, 1.1)),
            idle=i >= n_hosts - idle_hosts,
        ))
    return out


def fan_speed(power: float | np.ndarray):
    return FAN_IDLE_RPM + FAN_RPM_PER_WATT * (np.asarray(power) - 56.0)


def cpu_temperature(power, utilization, fan, profile: HostProfile, knee: float = THROTTLE_KNEE):
    """Ground-truth CPU temperature (°C).

    Heat rise is power times an airflow-dependent thermal resistance, plus a
    leakage term growing with the square of load. Past the throttle knee the
    rise continues at a fraction of its slope.
    """
    power = np.asarray(power, dtype=float)
    u = np.asarray(utilization, dtype=float) / 100.0
    airflow = 9000.0 / np.asarray(fan, dtype=float)
    raw = 28.0 + profile.cpu_offset + 0.105 * profile.resistance * power * airflow + 6.0 * u ** 2
    return np.where(raw > knee, knee + THROTTLE_SLOPE * (raw - knee), raw)


def inlet_temperature(utilization, profile: HostProfile):
    return profile.inlet_base + 1.5 * np.asarray(utilization, dtype=float) / 100.0


def ambient_temperature(power, utilization, fan, profile: HostProfile, knee: float = THROTTLE_KNEE):
    return inlet_temperature(utilization, profile) + cpu_temperature(power, utilization, fan, profile, knee)


def _host_rows(profile: HostProfile, n_rows: int, rng: np.random.Generator, curve: PowerCurve,
               max_vms: int):
    cores = np.array([c for c, _ in FLAVORS.values()])
    rams = np.array([r for _, r in FLAVORS.values()])
    out = []
    for _ in range(n_rows):
        n_vms = int(rng.integers(0, max_vms + 1))
        kinds = rng.integers(0, len(cores), size=n_vms)
        level = 0.001 if profile.idle else rng.uniform(0.0, 1.0)
        spread = 0.0003 if profile.idle else 0.15
        # per-VM ceiling keeps an idle host under 1 % even fully packed
        top = 0.9 * HOST_CORES / (max_vms * max(cores)) / 100.0 if profile.idle else 1.0
        cpu = np.clip(level + rng.normal(0.0, spread, size=n_vms), 0.0, min(top, 1.0))
        demand = float((cores[kinds] * cpu).sum())
        util = min(100.0, 100.0 * demand / HOST_CORES)
        ram = float((rams[kinds] * rng.uniform(0.3, 0.9, size=n_vms)).sum())
        rx = float(rng.lognormal(6.0, 1.5, size=n_vms).sum())
        tx = float(rng.lognormal(5.5, 1.5, size=n_vms).sum())
        out.append((n_vms, float(cores[kinds].sum()), util, ram, rx, tx))
    return out


def synth_telemetry(profiles, rows_per_host: int = 1000, seed: int = 0, noise: float = 1.0,
                    curve: PowerCurve = DEFAULT_POWER_CURVE, max_vms: int = 48,
                    start: float = 1.5e9, interval: float = 600.0,
                    knee: float = THROTTLE_KNEE) -> list[HostRecord]:
    """Telemetry rows whose ambient target is the ground truth plus N(0, noise²).

    A lower ``knee`` puts more of the load range past the throttle bend,
    making the target less linear in the features.
    """
    records = []
    for k, prof in enumerate(profiles):
        rng = np.random.default_rng([seed, k])
        for i, (n_vms, used_cores, util, ram, rx, tx) in enumerate(
                _host_rows(prof, rows_per_host, rng, curve, max_vms)):
            power = max(0.0, power_at(curve, util) + rng.normal(0.0, 3.0))
            zone = rng.uniform(-FAN_ZONE_SWING, FAN_ZONE_SWING)
            fans = [max(1000.0, float(fan_speed(power) + zone + rng.normal(0.0, 150.0))) for _ in range(4)]
            fan_mean = sum(fans) / 4
            t_in = float(inlet_temperature(util, prof))
            t_cpu = float(cpu_temperature(power, util, fan_mean, prof, knee)) + rng.normal(0.0, noise)
            t_other = t_cpu - abs(rng.normal(4.0, 2.0))
            pair = (t_cpu, t_other) if rng.random() < 0.5 else (t_other, t_cpu)
            records.append(HostRecord(
                host_id=prof.host_id, timestamp=start + i * interval,
                cpu_load=util, ram_total=HOST_RAM_MB, ram_used=min(ram, HOST_RAM_MB),
                n_cpu=float(HOST_CORES), n_cpu_used=used_cores, net_rx=rx, net_tx=tx,
                power=power, t_cpu1=max(0.0, pair[0]), t_cpu2=max(0.0, pair[1]),
                fan1=fans[0], fan2=fans[1], fan3=fans[2], fan4=fans[3],
                t_inlet=t_in, n_vms=float(n_vms),
            ))
    return records


@dataclass
class VmTraceSpec:
    vm_id: str
    flavor: str


def make_vms(n_vms: int, seed: int, mix=(0.3, 0.3, 0.25, 0.15)) -> list[VmTraceSpec]:
    rng = np.random.default_rng([seed, 23])
    width = max(3, len(str(n_vms - 1)))
    kinds = rng.choice(len(FLAVOR_NAMES), size=n_vms, p=np.asarray(mix) / np.sum(mix))
    return [VmTraceSpec(f"vm{i:0{width}d}", FLAVOR_NAMES[k]) for i, k in enumerate(kinds)]


def synth_trace_arrays(vms, n_intervals: int = 144, interval: float = 600.0, seed: int = 0):
    """Bitbrain-like demand: skewed base levels, a daily cycle, noise, bursts.

    Returns (cpu percent, ram MB, rx Kbps, tx Kbps), each (n_vms, n_intervals).
    """
    rng = np.random.default_rng([seed, 37])
    n = len(vms)
    t = np.arange(n_intervals) * interval
    base = rng.beta(2.0, 3.5, size=n)
    amp = rng.uniform(0.2, 0.7, size=n)
    phase = rng.uniform(-0.6, 0.6, size=n)
    day = np.sin(2 * np.pi * t[None, :] / 86400.0 - np.pi / 2 + phase[:, None])
    level = base[:, None] * (1.0 + amp[:, None] * day)
    level += rng.normal(0.0, 0.04, size=(n, n_intervals))
    bursts = rng.random((n, n_intervals)) < 0.02
    level = np.where(bursts, level + rng.uniform(0.2, 0.5, size=(n, n_intervals)), level)
    cpu = np.clip(level, 0.0, 1.0) * 100.0
    flavor_ram = np.array([FLAVORS[v.flavor][1] for v in vms])
    frac = rng.uniform(0.3, 0.8, size=n)
    ram = flavor_ram[:, None] * np.clip(frac[:, None] + rng.normal(0.0, 0.03, size=(n, n_intervals)), 0.05, 1.0)
    rx = rng.lognormal(6.0, 1.0, size=(n, 1)) * rng.uniform(0.5, 1.5, size=(n, n_intervals))
    tx = rng.lognormal(5.5, 1.0, size=(n, 1)) * rng.uniform(0.5, 1.5, size=(n, n_intervals))
    return cpu, ram, rx, tx
