"""Discrete-interval data-center simulator.

One call to :func:`step` plays a scheduling interval: refresh VM demand from
the trace, find overloaded and underloaded hosts, let the policy pick
targets, run the migrations, power down empty hosts, and account energy,
temperature and SLA time.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .metrics import IntervalRow, SlaAccumulator
from .synth import FLAVORS
from .telemetry import FEATURE_NAMES
from .thermal import DEFAULT_POWER_CURVE, EnergyLedger, PowerCurve, estimate_fan_speeds, power_at

logger = logging.getLogger(__name__)

_FAN_SLOTS = [FEATURE_NAMES.index(n) for n in ("fs_1", "fs_2", "fs_3", "fs_4")]
_NON_FAN_SLOTS = [i for i in range(len(FEATURE_NAMES)) if i not in _FAN_SLOTS]


class SimulationError(RuntimeError):
    pass


class TraceError(SimulationError):
    pass


class InfeasibleScheduleError(SimulationError):
    pass


class PlacementExhausted(SimulationError):
    def __init__(self, vm_id: str, detail: str = ""):
        self.vm_id = vm_id
        super().__init__(f"no feasible host for {vm_id}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class HostSpec:
    cores: int = 64
    ram: float = 524288.0  # MB
    power_curve: PowerCurve = DEFAULT_POWER_CURVE
    bandwidth: float = 1000.0  # Mbps

    def __post_init__(self):
        if self.cores <= 0 or self.ram <= 0 or self.bandwidth <= 0:
            raise ValueError("host capacities must be positive")


@dataclass(frozen=True)
class VmSpec:
    vm_id: str
    flavor: str

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}; expected one of {sorted(FLAVORS)}")

    @property
    def cores(self) -> int:
        return FLAVORS[self.flavor][0]

    @property
    def ram(self) -> float:
        return FLAVORS[self.flavor][1]


def flavor_for_cores(cores: float) -> str:
    """Smallest flavor with at least ``cores`` vCPUs (largest flavor caps)."""
    for name, (c, _) in FLAVORS.items():
        if cores <= c:
            return name
    return list(FLAVORS)[-1]


@dataclass(frozen=True)
class Cluster:
    hosts: dict[str, HostSpec]
    vms: dict[str, VmSpec]

    @property
    def host_ids(self) -> list[str]:
        return sorted(self.hosts)

    @classmethod
    def homogeneous(cls, host_ids: Sequence[str], vms: Iterable[VmSpec], spec: HostSpec = HostSpec()):
        return cls({h: spec for h in host_ids}, {v.vm_id: v for v in vms})


# --------------------------------------------------------------------------- traces

@dataclass(eq=False)
class Trace:
    """Per-VM demand on the interval grid. Arrays are (n_vms, n_intervals)."""

    vm_ids: tuple[str, ...]
    cpu: np.ndarray  # percent of the VM's own cores
    ram: np.ndarray  # MB in use
    net_rx: np.ndarray  # Kbps
    net_tx: np.ndarray  # Kbps
    interval: float = 600.0
    start: float = 0.0
    filled: np.ndarray | None = None  # True where a gap was carried forward
    cores: dict[str, float] = field(default_factory=dict)  # provisioned vCPUs, if the source says

    def __post_init__(self):
        self.vm_ids = tuple(self.vm_ids)
        self._row = {v: i for i, v in enumerate(self.vm_ids)}
        for name in ("cpu", "ram", "net_rx", "net_tx"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (len(self.vm_ids), a.shape[1] if a.ndim == 2 else -1):
                raise TraceError(f"{name} must be (n_vms, n_intervals)")
            if not np.all(np.isfinite(a)) or (a < 0).any():
                raise TraceError(f"{name} must be finite and nonnegative")
            setattr(self, name, a)
        if self.filled is None:
            self.filled = np.zeros(self.cpu.shape, dtype=bool)

    @property
    def n_intervals(self) -> int:
        return self.cpu.shape[1]

    def row(self, vm_id: str) -> int:
        return self._row[vm_id]

    def truncated(self, n_intervals: int) -> "Trace":
        return Trace(self.vm_ids, self.cpu[:, :n_intervals], self.ram[:, :n_intervals],
                     self.net_rx[:, :n_intervals], self.net_tx[:, :n_intervals], self.interval,
                     self.start, self.filled[:, :n_intervals], dict(self.cores))


def resample(samples: Sequence[tuple], t0: float, interval: float, n_bins: int):
    """Mean of (timestamp, *values) samples per grid bin; empty bins carry forward.

    Bins before the first sample take the first observed value. Returns
    (values array (n_values, n_bins), filled mask).
    """
    if not samples:
        raise TraceError("no samples to resample")
    arr = np.asarray(samples, dtype=float)
    bins = np.floor((arr[:, 0] - t0) / interval).astype(np.int64)
    keep = (bins >= 0) & (bins < n_bins)
    arr, bins = arr[keep], bins[keep]
    if arr.size == 0:
        raise TraceError("no samples fall inside the trace horizon")
    n_vals = arr.shape[1] - 1
    sums = np.zeros((n_vals, n_bins))
    counts = np.zeros(n_bins)
    np.add.at(counts, bins, 1)
    for k in range(n_vals):
        np.add.at(sums[k], bins, arr[:, k + 1])
    out = np.empty((n_vals, n_bins))
    filled = counts == 0
    last = sums[:, bins.min()] / counts[bins.min()]
    for b in range(n_bins):
        if counts[b]:
            last = sums[:, b] / counts[b]
        out[:, b] = last
    return out, filled


_BITBRAIN = {
    "timestamp": "Timestamp [ms]",
    "cores": "CPU cores",
    "cpu": "CPU usage [%]",
    "ram_kb": "Memory usage [KB]",
    "rx": "Network received throughput [KB/s]",
    "tx": "Network transmitted throughput [KB/s]",
}
SYNTH_TRACE_FILE = "trace.csv"
SYNTH_COLUMNS = ("vm_id", "timestamp", "cpu_pct", "ram_mb", "net_rx_kbps", "net_tx_kbps")


def _read_bitbrain(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise TraceError(f"{path}: empty trace file")
    split = (lambda ln: [c.strip() for c in ln.split(";")]) if ";" in lines[0] else \
        (lambda ln: [c.strip() for c in ln.split(",")])
    header = split(lines[0])
    try:
        idx = {k: header.index(v) for k, v in _BITBRAIN.items()}
    except ValueError as exc:
        raise TraceError(f"{path}: not a Bitbrain-layout file ({exc})") from None
    samples, cores = [], []
    for ln in lines[1:]:
        cells = split(ln)
        try:
            ts = float(cells[idx["timestamp"]])
            row = (ts, float(cells[idx["cpu"]]), float(cells[idx["ram_kb"]]) / 1024.0,
                   float(cells[idx["rx"]]) * 8.0, float(cells[idx["tx"]]) * 8.0)
            c = float(cells[idx["cores"]])
        except (ValueError, IndexError):
            continue
        if all(math.isfinite(v) for v in row) and min(row[1:]) >= 0:
            samples.append(row)
            cores.append(c)
    return samples, (max(cores) if cores else 0.0)


def load_trace(path, interval: float = 600.0, n_intervals: int | None = None) -> Trace:
    """Load a trace directory onto the ``interval`` grid.

    Two layouts are understood: a single ``trace.csv`` with columns
    vm_id,timestamp,cpu_pct,ram_mb,net_rx_kbps,net_tx_kbps, or one
    Bitbrain-style file per VM (``<vm>.csv``, ';'-separated).
    """
    path = Path(path)
    per_vm: dict[str, list] = {}
    cores: dict[str, float] = {}
    synth = path / SYNTH_TRACE_FILE if path.is_dir() else path
    if synth.is_file() and synth.name == SYNTH_TRACE_FILE:
        with open(synth, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(SYNTH_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise TraceError(f"{synth}: missing columns {sorted(missing)}")
            for rec in reader:
                per_vm.setdefault(rec["vm_id"], [])
                try:
                    row = tuple(float(rec[c]) for c in SYNTH_COLUMNS[1:])
                except ValueError:
                    continue
                if all(math.isfinite(v) for v in row) and min(row[1:]) >= 0:
                    per_vm[rec["vm_id"]].append(row)
    elif path.is_dir():
        for f in sorted(path.glob("*.csv")):
            samples, c = _read_bitbrain(f)
            per_vm[f.stem] = samples
            cores[f.stem] = c
    else:
        raise TraceError(f"{path}: no trace found")
    if not per_vm:
        raise TraceError(f"{path}: no VMs in trace")
    for vm, rows in per_vm.items():
        if not rows:
            raise TraceError(f"VM {vm}: no parsable rows")
    t0 = min(r[0] for rows in per_vm.values() for r in rows)
    t_end = max(r[0] for rows in per_vm.values() for r in rows)
    n_bins = n_intervals or int(math.floor((t_end - t0) / interval)) + 1
    vm_ids = sorted(per_vm)
    cpu, ram, rx, tx, filled = [], [], [], [], []
    for vm in vm_ids:
        vals, gap = resample(per_vm[vm], t0, interval, n_bins)
        cpu.append(np.clip(vals[0], 0.0, 100.0))
        ram.append(vals[1])
        rx.append(vals[2])
        tx.append(vals[3])
        filled.append(gap)
    n_filled = int(np.sum(filled))
    if n_filled:
        logger.info("%s: %d empty bins carried forward", path, n_filled)
    return Trace(tuple(vm_ids), np.array(cpu), np.array(ram), np.array(rx), np.array(tx),
                 interval, t0, np.array(filled), cores)


def write_trace(trace: Trace, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = directory / SYNTH_TRACE_FILE
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SYNTH_COLUMNS)
        for vm in trace.vm_ids:
            r = trace.row(vm)
            for i in range(trace.n_intervals):
                w.writerow([vm, repr(trace.start + i * trace.interval), repr(float(trace.cpu[r, i])),
                            repr(float(trace.ram[r, i])), repr(float(trace.net_rx[r, i])),
                            repr(float(trace.net_tx[r, i]))])
    return out


def write_vms(vms: Iterable[VmSpec], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("vm_id,flavor\n")
        for v in vms:
            fh.write(f"{v.vm_id},{v.flavor}\n")


def read_vms(path) -> list[VmSpec]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [VmSpec(r["vm_id"], r["flavor"]) for r in csv.DictReader(fh)]


# --------------------------------------------------------------------------- state

@dataclass
class HostState:
    active: bool = False
    utilization: float = 0.0  # percent, capped at 100
    overload_debt: float = 0.0  # demand above 100 percent
    ram_used: float = 0.0
    predicted_temp: float = math.nan
    power: float = 0.0


@dataclass
class Migration:
    vm_id: str
    source: str
    target: str
    duration: float  # s
    remaining: float  # s
    interval_started: int
    requested: float = 0.0  # core-seconds asked for while migrating
    allocated: float = 0.0  # core-seconds delivered while migrating


@dataclass
class ClusterState:
    interval_index: int
    placements: dict[str, str]
    hosts: dict[str, HostState]
    in_flight: list[Migration] = field(default_factory=list)

    def copy(self) -> "ClusterState":
        return copy.deepcopy(self)

    def vms_on(self, host_id: str) -> list[str]:
        return sorted(v for v, h in self.placements.items() if h == host_id)

    def active_hosts(self) -> list[str]:
        return sorted(h for h, s in self.hosts.items() if s.active)

    def migrating(self) -> set[str]:
        return {m.vm_id for m in self.in_flight}


def initial_state(cluster: Cluster) -> ClusterState:
    """First-fit-decreasing by VM cores over hosts in id order.

    Fit is by provisioned cores and flavor RAM, so interval 0 never
    oversubscribes; every policy starts from this same placement.
    """
    free_cores = {h: cluster.hosts[h].cores for h in cluster.host_ids}
    free_ram = {h: cluster.hosts[h].ram for h in cluster.host_ids}
    placements = {}
    for vm in sorted(cluster.vms.values(), key=lambda v: (-v.cores, v.vm_id)):
        for h in cluster.host_ids:
            if vm.cores <= free_cores[h] and vm.ram <= free_ram[h]:
                placements[vm.vm_id] = h
                free_cores[h] -= vm.cores
                free_ram[h] -= vm.ram
                break
        else:
            raise PlacementExhausted(vm.vm_id, "initial placement")
    used = set(placements.values())
    hosts = {h: HostState(active=h in used) for h in cluster.host_ids}
    return ClusterState(0, placements, hosts)


@dataclass(frozen=True)
class SimParams:
    interval: float = 600.0  # s
    u_max: float = 0.9  # fraction
    t_red: float = 105.0  # °C
    degradation: float = 0.1  # CPU share withheld from a migrating VM
    t_supply: float = 25.0  # °C

    @property
    def u_max_pct(self) -> float:
        return 100.0 * self.u_max


@dataclass
class HostLoad:
    demand: float = 0.0  # cores actually busy
    ram: float = 0.0  # MB in use (incl. reservations for incoming migrations)
    cores: int = 0  # provisioned vCPUs
    n_vm: int = 0
    rx: float = 0.0
    tx: float = 0.0

    def key(self) -> tuple:
        return (self.demand, self.ram, self.cores, self.n_vm, self.rx, self.tx)


@dataclass(frozen=True)
class VmDemand:
    cores: float  # busy cores
    ram: float
    vcpus: int
    rx: float
    tx: float


def host_utilization(load: HostLoad, spec: HostSpec) -> tuple[float, float]:
    """(utilization percent capped at 100, overload debt percent)."""
    demand = 100.0 * load.demand / spec.cores
    return min(demand, 100.0), max(demand - 100.0, 0.0)


class PlacementContext:
    """Provisional view of one interval: loads per host plus prediction access.

    Schedulers commit placements here one VM at a time, so each decision
    sees the effect of the ones before it.
    """

    def __init__(self, cluster: Cluster, trace: Trace, interval_index: int, state: ClusterState,
                 models, params: SimParams):
        self.cluster = cluster
        self.trace = trace
        self.i = interval_index
        self.models = models
        self.params = params
        self.placements = dict(state.placements)
        self.active = {h for h, s in state.hosts.items() if s.active}
        self.migrating = state.migrating()
        self.decisions: list[dict] = []
        self._cache: dict = {}
        self.loads = {h: HostLoad() for h in cluster.host_ids}
        for vm, h in self.placements.items():
            self._apply(self.loads[h], self.demand(vm), +1)
        for m in state.in_flight:
            # memory is held on the target until the copy finishes
            self.loads[m.target].ram += self.demand(m.vm_id).ram

    def demand(self, vm_id: str) -> VmDemand:
        r = self.trace.row(vm_id)
        vm = self.cluster.vms[vm_id]
        return VmDemand(vm.cores * self.trace.cpu[r, self.i] / 100.0, float(self.trace.ram[r, self.i]),
                        vm.cores, float(self.trace.net_rx[r, self.i]), float(self.trace.net_tx[r, self.i]))

    @staticmethod
    def _apply(load: HostLoad, d: VmDemand, sign: int) -> None:
        load.demand += sign * d.cores
        load.ram += sign * d.ram
        load.cores += sign * d.vcpus
        load.n_vm += sign
        load.rx += sign * d.rx
        load.tx += sign * d.tx
        if load.n_vm == 0:
            load.demand = load.rx = load.tx = 0.0

    def vms_on(self, host_id: str) -> list[str]:
        return sorted(v for v, h in self.placements.items() if h == host_id)

    def utilization(self, host_id: str) -> float:
        return host_utilization(self.loads[host_id], self.cluster.hosts[host_id])[0]

    def demand_pct(self, host_id: str) -> float:
        return 100.0 * self.loads[host_id].demand / self.cluster.hosts[host_id].cores

    def load_with(self, host_id: str, add: Sequence[str] = (), remove: Sequence[str] = ()) -> HostLoad:
        load = replace(self.loads[host_id])
        for vm in add:
            self._apply(load, self.demand(vm), +1)
        for vm in remove:
            self._apply(load, self.demand(vm), -1)
        return load

    def feature_vector(self, host_id: str, load: HostLoad | None = None) -> np.ndarray:
        load = load or self.loads[host_id]
        return build_features(load, self.cluster.hosts[host_id], self.models.fans.get(host_id))

    def predict(self, host_id: str, load: HostLoad | None = None):
        load = load or self.loads[host_id]
        key = (host_id, load.key())
        hit = self._cache.get(key)
        if hit is None:
            x = self.feature_vector(host_id, load)
            hit = self._cache[key] = (self.models.predict(host_id, x), x)
        return hit[0]

    def recorded_vector(self, host_id: str, load: HostLoad) -> np.ndarray:
        self.predict(host_id, load)
        return self._cache[(host_id, load.key())][1]

    def fits(self, host_id: str, vm_id: str, u_cap_pct: float) -> tuple[bool, float]:
        """Capacity and threshold check for adding ``vm_id``; returns (ok, predicted °C)."""
        spec = self.cluster.hosts[host_id]
        load = self.load_with(host_id, add=[vm_id])
        temp = self.predict(host_id, load).value
        util = 100.0 * load.demand / spec.cores
        ok = (temp < self.params.t_red and util <= u_cap_pct and load.ram <= spec.ram)
        return ok, temp

    def add(self, vm_id: str, host_id: str) -> None:
        self.placements[vm_id] = host_id
        self._apply(self.loads[host_id], self.demand(vm_id), +1)
        self.active.add(host_id)

    def remove(self, vm_id: str) -> str:
        host = self.placements.pop(vm_id)
        self._apply(self.loads[host], self.demand(vm_id), -1)
        return host

    def checkpoint(self):
        return ({h: replace(l) for h, l in self.loads.items()}, dict(self.placements),
                set(self.active), len(self.decisions))

    def restore(self, cp) -> None:
        loads, placements, active, n_dec = cp
        self.loads, self.placements, self.active = loads, placements, active
        del self.decisions[n_dec:]


def build_features(load: HostLoad, spec: HostSpec, fan_model) -> np.ndarray:
    """Feature vector in dataset column order for a host carrying ``load``."""
    util = min(100.0, 100.0 * load.demand / spec.cores)
    power = power_at(spec.power_curve, util)
    x = np.empty(len(FEATURE_NAMES))
    x[_NON_FAN_SLOTS] = [util, spec.ram, load.ram, spec.cores, load.cores, load.rx, load.tx,
                         load.n_vm, power]
    x[_FAN_SLOTS] = estimate_fan_speeds(fan_model, x[_NON_FAN_SLOTS])
    return x


# --------------------------------------------------------------------------- detection

def detect_overloaded(ctx: PlacementContext, u_cap_pct: float | None = None) -> list[str]:
    """Active hosts over the CPU threshold (strict) or at/over the thermal threshold."""
    cap = ctx.params.u_max_pct if u_cap_pct is None else u_cap_pct
    out = []
    for h in sorted(ctx.active):
        if not ctx.vms_on(h):
            continue
        try:
            temp = ctx.predict(h).value
        except Exception as exc:
            raise SimulationError(f"prediction failed for host {h}: {exc}") from exc
        if ctx.demand_pct(h) > cap or temp >= ctx.params.t_red:
            out.append(h)
    return out


def migration_time(ram_mb: float, bandwidth_mbps: float) -> float:
    return ram_mb / (bandwidth_mbps / 8.0)


def select_vms_for_migration(ctx: PlacementContext, host_id: str, reason: str,
                             u_cap_pct: float | None = None) -> list[str]:
    """VMs to move off ``host_id``, shortest migration first.

    For underload that is every VM; for overload it is the shortest prefix
    whose removal brings the host under both thresholds.
    """
    bw = ctx.cluster.hosts[host_id].bandwidth
    vms = [v for v in ctx.vms_on(host_id) if v not in ctx.migrating]
    vms.sort(key=lambda v: (migration_time(ctx.demand(v).ram, bw), v))
    if reason == "underload":
        return vms
    if reason != "overload":
        raise ValueError(f"unknown reason {reason!r}")
    cap = ctx.params.u_max_pct if u_cap_pct is None else u_cap_pct
    spec = ctx.cluster.hosts[host_id]
    chosen = []
    for vm in vms:
        chosen.append(vm)
        load = ctx.load_with(host_id, remove=chosen)
        if 100.0 * load.demand / spec.cores <= cap and ctx.predict(host_id, load).value < ctx.params.t_red:
            break
    return chosen


Placer = Callable[[list, PlacementContext, list], None]


def first_fit_placer(u_cap_pct: float) -> Placer:
    def place(vms, ctx, targets):
        for vm in vms:
            for h in targets:
                if ctx.fits(h, vm, u_cap_pct)[0]:
                    ctx.add(vm, h)
                    break
            else:
                raise PlacementExhausted(vm, "no active target")
    return place


def detect_underloaded(ctx: PlacementContext, placer: Placer | None = None,
                       exclude: Iterable[str] = (), u_cap_pct: float | None = None) -> list[str]:
    """Hosts whose whole VM set can move onto other active hosts.

    Hosts are tried in ascending utilization; each success is committed to
    ``ctx`` before the next host is tried, and hosts that received VMs are
    not drained in the same pass.
    """
    cap = ctx.params.u_max_pct if u_cap_pct is None else u_cap_pct
    placer = placer or first_fit_placer(cap)
    excluded = set(exclude)
    drained: list[str] = []
    receivers: set[str] = set()
    order = sorted((h for h in ctx.active if h not in excluded), key=lambda h: (ctx.utilization(h), h))
    for h in order:
        if h in receivers:
            continue
        vms = ctx.vms_on(h)
        if any(v in ctx.migrating for v in vms):
            continue
        if not vms:
            drained.append(h)
            continue
        targets = sorted(t for t in ctx.active
                         if t != h and t not in excluded and t not in drained and ctx.vms_on(t))
        if not targets:
            continue
        cp = ctx.checkpoint()
        before = {t: ctx.loads[t].n_vm for t in targets}
        for vm in vms:
            ctx.remove(vm)
        try:
            placer(vms, ctx, targets)
        except PlacementExhausted:
            ctx.restore(cp)
            continue
        drained.append(h)
        ctx.active.discard(h)
        receivers.update(t for t in targets if ctx.loads[t].n_vm != before[t])
    return drained


# --------------------------------------------------------------------------- migration

@dataclass
class StepOutcome:
    row: IntervalRow
    host_time: dict[str, tuple[float, float]]  # host -> (saturated s, active s)
    vm_requested: dict[str, float]  # vm -> requested core-seconds this interval
    migrations: list[Migration]  # migrations that finished this interval
    decisions: list[dict]


def apply_migrations(state: ClusterState, moves: dict[str, str], cluster: Cluster, trace: Trace,
                     params: SimParams) -> tuple[ClusterState, list[Migration]]:
    """Start a migration for every vm -> target in ``moves``.

    Rejects the whole map (state untouched) if any target would exceed its
    CPU or memory capacity.
    """
    if not moves:
        return state.copy(), []
    i = state.interval_index
    ctx = PlacementContext(cluster, trace, i, state, _NoModels(), params)
    for vm, target in sorted(moves.items()):
        src = ctx.placements.get(vm)
        if src is None:
            raise InfeasibleScheduleError(f"unknown VM {vm}")
        if src == target:
            continue
        d = ctx.demand(vm)
        ctx.loads[target].demand += d.cores
        ctx.loads[target].ram += d.ram
    for h, load in ctx.loads.items():
        spec = cluster.hosts[h]
        if load.ram > spec.ram or load.demand > spec.cores * (1 + 1e-12):
            if any(t == h for t in moves.values()):
                raise InfeasibleScheduleError(f"host {h} over capacity after schedule")
    new = state.copy()
    started = []
    for vm, target in sorted(moves.items()):
        src = new.placements[vm]
        if src == target:
            continue
        bw = min(cluster.hosts[src].bandwidth, cluster.hosts[target].bandwidth)
        dur = migration_time(ctx.demand(vm).ram, bw)
        m = Migration(vm, src, target, dur, dur, i)
        new.in_flight.append(m)
        new.hosts[target].active = True
        started.append(m)
    return new, started


class _NoModels:
    fans: dict = {}

    def predict(self, host_id, x):  # pragma: no cover - never called for capacity checks
        raise SimulationError("capacity check does not predict")


def _saturated_seconds(demand_pct: float, outgoing: list[tuple[float, float]], spec: HostSpec,
                       active_s: float) -> float:
    """Time at 100% CPU given outgoing (completion time, busy cores) pairs."""
    if demand_pct < 100.0:
        return 0.0
    remaining = demand_pct
    for t_done, cores in sorted(outgoing):
        remaining -= 100.0 * cores / spec.cores
        if remaining < 100.0:
            return min(t_done, active_s)
    return active_s


def step(state: ClusterState, cluster: Cluster, trace: Trace, policy, models,
         params: SimParams = SimParams()) -> tuple[ClusterState, StepOutcome]:
    """Advance one scheduling interval."""
    i = state.interval_index
    dt = params.interval
    ctx = PlacementContext(cluster, trace, i, state, models, params)
    start_active = set(ctx.active)
    start_demand = {h: ctx.demand_pct(h) for h in cluster.host_ids}

    try:
        cap = policy.overload_threshold(ctx)
        overloaded = detect_overloaded(ctx, cap)
        pending = []
        for h in overloaded:
            for vm in select_vms_for_migration(ctx, h, "overload", cap):
                ctx.remove(vm)
                pending.append(vm)
        if pending:
            policy.place(pending, ctx, exclude=set(overloaded), allow_activation=True)
        underloaded = []
        if policy.consolidates:
            # receivers stay under this interval's threshold so they are not
            # flagged overloaded by the very move that drained the sender
            underloaded = detect_underloaded(
                ctx, placer=lambda vms, c, targets: policy.place(vms, c, targets=targets, allow_activation=False,
                                                                  u_cap_pct=cap),
                exclude=overloaded, u_cap_pct=cap)
    except PlacementExhausted as exc:
        raise SimulationError(f"interval {i}: {exc}") from exc
    except SimulationError as exc:
        raise SimulationError(f"interval {i}: {exc}") from exc

    moves = {vm: h for vm, h in ctx.placements.items() if state.placements.get(vm) != h}
    new, started = apply_migrations(state, moves, cluster, trace, params)

    # play the interval: migrations progress, finished ones land on the target
    finished: list[Migration] = []
    outgoing: dict[str, list[tuple[float, float]]] = defaultdict(list)
    last_out: dict[str, float] = defaultdict(float)
    still = []
    for m in new.in_flight:
        d = ctx.demand(m.vm_id)
        progress = min(m.remaining, dt)
        m.requested += d.cores * progress
        m.allocated += (1.0 - params.degradation) * d.cores * progress
        m.remaining -= progress
        last_out[m.source] = max(last_out[m.source], progress)
        if m.remaining <= 0.0:
            m.remaining = 0.0
            new.placements[m.vm_id] = m.target
            outgoing[m.source].append((progress, d.cores))
            finished.append(m)
        else:
            still.append(m)
    new.in_flight = still

    end = PlacementContext(cluster, trace, i, new, models, params)
    busy = set(new.placements.values()) | {m.target for m in still}
    computing = 0.0
    temps = []
    host_time = {}
    saturated_hosts = 0
    debt_total = 0.0
    fallbacks = 0
    for h in cluster.host_ids:
        hs = new.hosts[h]
        spec = cluster.hosts[h]
        hs.active = h in busy
        util, debt = host_utilization(end.loads[h], spec)
        hs.utilization = util if hs.active else 0.0
        hs.overload_debt = max(start_demand[h] - 100.0, 0.0)
        hs.ram_used = end.loads[h].ram if hs.active else 0.0
        debt_total += hs.overload_debt
        if hs.active:
            pred = end.predict(h)
            hs.predicted_temp = pred.value
            fallbacks += pred.flag != "ok"
            hs.power = power_at(spec.power_curve, util)
            computing += hs.power * dt
            temps.append(pred.value)
            active_s = dt
        else:
            hs.predicted_temp = math.nan
            hs.power = 0.0
            active_s = last_out[h] if h in start_active else 0.0
            computing += power_at(spec.power_curve, min(start_demand[h], 100.0)) * active_s
        if h in start_active or hs.active:
            sat = _saturated_seconds(start_demand[h], outgoing.get(h, []), spec, active_s)
            saturated_hosts += sat > 0
            host_time[h] = (sat, active_s)
    new.interval_index = i + 1

    energy = EnergyLedger.from_computing(computing / 3.6e6, params.t_supply)
    row = IntervalRow(
        interval=i,
        mean_temp=float(np.mean(temps)) if temps else math.nan,
        peak_temp=float(max(temps)) if temps else math.nan,
        active_hosts=sum(1 for h in new.hosts.values() if h.active),
        computing_kwh=energy.computing_kwh,
        cooling_kwh=energy.cooling_kwh,
        migrations=len(started),
        overloaded=len(overloaded),
        underloaded=len(underloaded),
        saturated_hosts=saturated_hosts,
        overload_debt=debt_total,
        guard_fallbacks=fallbacks,
        temps=tuple(temps),
    )
    vm_requested = {}
    for vm in cluster.vms:
        vm_requested[vm] = ctx.demand(vm).cores * dt
    return new, StepOutcome(row, host_time, vm_requested, finished, ctx.decisions)


def check_capacity(state: ClusterState, cluster: Cluster, trace: Trace, interval_index: int) -> None:
    """Raise if any host exceeds CPU or RAM capacity, or a VM is lost."""
    if set(state.placements) != set(cluster.vms):
        raise SimulationError("VM set changed: placements must cover every VM exactly once")
    ctx = PlacementContext(cluster, trace, interval_index, state, _NoModels(), SimParams())
    for h, load in ctx.loads.items():
        spec = cluster.hosts[h]
        if load.ram > spec.ram + 1e-6:
            raise SimulationError(f"host {h} RAM {load.ram:.0f} > {spec.ram:.0f}")
        if load.n_vm and not state.hosts[h].active:
            raise SimulationError(f"inactive host {h} carries VMs")


@dataclass
class SimResult:
    policy: str
    rows: list[IntervalRow]
    sla: SlaAccumulator
    host_log: list[tuple[int, str, float, float]]  # (interval, host, saturated s, active s)
    vm_log: list[tuple[int, str, float]]  # (interval, vm, requested core-s)
    migrations: list[Migration]
    decisions: list[dict]
    final_state: ClusterState


def run_simulation(cluster: Cluster, trace: Trace, policy, models, params: SimParams = SimParams(),
                   n_intervals: int | None = None, state: ClusterState | None = None,
                   check: bool = True) -> SimResult:
    n = trace.n_intervals if n_intervals is None else n_intervals
    if n > trace.n_intervals:
        raise SimulationError(f"trace has {trace.n_intervals} intervals, {n} requested")
    state = state or initial_state(cluster)
    sla = SlaAccumulator()
    rows, host_log, vm_log, migrations, decisions = [], [], [], [], []
    for _ in range(n):
        i = state.interval_index
        state, out = step(state, cluster, trace, policy, models, params)
        if check:
            check_capacity(state, cluster, trace, i)
        rows.append(out.row)
        for h, (sat, act) in sorted(out.host_time.items()):
            sla.add_host_time(h, sat, act)
            host_log.append((i, h, sat, act))
        for vm, req in sorted(out.vm_requested.items()):
            sla.add_requested(vm, req)
            vm_log.append((i, vm, req))
        for m in out.migrations:
            sla.add_migration(m.vm_id, m.requested, m.allocated)
            migrations.append(m)
        decisions.extend(out.decisions)
    return SimResult(policy.name, rows, sla, host_log, vm_log, migrations, decisions, state)
