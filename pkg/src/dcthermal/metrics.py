"""SLA, energy and temperature reporting for simulation runs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class MetricError(ValueError):
    pass


class ConfigMismatch(ValueError):
    def __init__(self, diff: dict):
        self.diff = diff
        lines = [f"  {k}: {a!r} != {b!r}" for k, (a, b) in sorted(diff.items())]
        super().__init__("runs used different configs:\n" + "\n".join(lines))


class ExactSum:
    """Running float sum with no rounding error until read.

    Keeps Shewchuk partials; ``value`` is the correctly rounded total, so it
    equals ``math.fsum`` over the same addends whatever their order.
    """

    __slots__ = ("_partials",)

    def __init__(self):
        self._partials: list[float] = []

    def add(self, x: float) -> None:
        x = float(x)
        kept = 0
        for y in self._partials:
            if abs(x) < abs(y):
                x, y = y, x
            hi = x + y
            lo = y - (hi - x)
            if lo:
                self._partials[kept] = lo
                kept += 1
            x = hi
        self._partials[kept:] = [x]

    @property
    def value(self) -> float:
        return math.fsum(self._partials)


@dataclass(frozen=True)
class SlaMetrics:
    sla_tah: float
    pdm: float
    sla_violation: float
    n_migrations: int
    skipped_vms: tuple[str, ...] = ()  # VMs with zero requested CPU

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skipped_vms"] = list(self.skipped_vms)
        return d


def sla_tah(host_times: dict[str, tuple[float, float]]) -> float:
    """Mean over ever-active hosts of saturated time / active time.

    ``host_times`` maps host -> (saturated seconds, active seconds).
    """
    ratios = [sat / act for _, (sat, act) in sorted(host_times.items()) if act > 0]
    if not ratios:
        raise MetricError("no active hosts: SLA time per active host is undefined")
    return math.fsum(ratios) / len(ratios)


def pdm(requested: dict[str, float], shortfall: dict[str, float]) -> tuple[float, tuple[str, ...]]:
    """Mean per-VM migration shortfall as a fraction of lifetime requested CPU.

    ``requested`` covers every VM (core-seconds over its lifetime); VMs never
    migrated have no ``shortfall`` entry and contribute 0. VMs with zero
    request are skipped and returned as the second element.
    """
    skipped = tuple(sorted(v for v, r in requested.items() if r <= 0))
    terms = [shortfall.get(v, 0.0) / r for v, r in sorted(requested.items()) if r > 0]
    if not terms:
        return 0.0, skipped
    return math.fsum(terms) / len(terms), skipped


def sla_metrics(host_times, requested, shortfall, n_migrations: int) -> SlaMetrics:
    tah = sla_tah(host_times)
    p, skipped = pdm(requested, shortfall)
    return SlaMetrics(tah, p, tah * p, n_migrations, skipped)


class SlaAccumulator:
    """Streams host time and VM CPU integrals during a run."""

    def __init__(self):
        self._sat: dict[str, ExactSum] = {}
        self._act: dict[str, ExactSum] = {}
        self._req: dict[str, ExactSum] = {}
        self._short: dict[str, ExactSum] = {}
        self.n_migrations = 0

    @staticmethod
    def _bump(table: dict, key: str, x: float) -> None:
        s = table.get(key)
        if s is None:
            s = table[key] = ExactSum()
        s.add(x)

    def add_host_time(self, host: str, saturated: float, active: float) -> None:
        if saturated < 0 or active < 0 or saturated > active:
            raise MetricError(f"bad host time for {host}: {saturated} of {active}")
        self._bump(self._sat, host, saturated)
        self._bump(self._act, host, active)

    def add_requested(self, vm: str, core_seconds: float) -> None:
        self._bump(self._req, vm, core_seconds)

    def add_migration(self, vm: str, requested: float, allocated: float) -> None:
        self._bump(self._short, vm, abs(requested - allocated))
        self.n_migrations += 1

    def host_times(self) -> dict[str, tuple[float, float]]:
        return {h: (self._sat[h].value, self._act[h].value) for h in sorted(self._act)}

    def requested(self) -> dict[str, float]:
        return {v: s.value for v, s in sorted(self._req.items())}

    def shortfall(self) -> dict[str, float]:
        return {v: s.value for v, s in sorted(self._short.items())}

    def result(self) -> SlaMetrics:
        return sla_metrics(self.host_times(), self.requested(), self.shortfall(), self.n_migrations)


@dataclass(frozen=True)
class IntervalRow:
    interval: int
    mean_temp: float  # °C over active hosts
    peak_temp: float  # °C
    active_hosts: int
    computing_kwh: float
    cooling_kwh: float
    migrations: int
    overloaded: int = 0
    underloaded: int = 0
    saturated_hosts: int = 0
    overload_debt: float = 0.0  # Σ percent demand above capacity
    guard_fallbacks: int = 0
    temps: tuple[float, ...] = ()  # per active host, host-id order

    @property
    def total_kwh(self) -> float:
        return self.computing_kwh + self.cooling_kwh


INTERVAL_COLUMNS = ("interval", "mean_temp_c", "peak_temp_c", "active_hosts", "computing_kwh",
                    "cooling_kwh", "total_kwh", "migrations", "overloaded", "underloaded",
                    "saturated_hosts", "overload_debt_pct", "guard_fallbacks")


def _cell(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def interval_cells(r: IntervalRow) -> list[str]:
    return [_cell(v) for v in (r.interval, r.mean_temp, r.peak_temp, r.active_hosts, r.computing_kwh,
                               r.cooling_kwh, r.total_kwh, r.migrations, r.overloaded, r.underloaded,
                               r.saturated_hosts, r.overload_debt, r.guard_fallbacks)]


@dataclass(frozen=True)
class SimReport:
    policy: str
    rows: tuple[IntervalRow, ...]
    peak_temp: float
    mean_temp: float
    computing_kwh: float
    cooling_kwh: float
    total_kwh: float
    mean_active_hosts: float
    sla: SlaMetrics
    hist_edges: tuple[float, ...]
    hist_counts: tuple[int, ...]
    cdf: tuple[float, ...]  # fraction of samples below each edge
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "intervals": len(self.rows),
            "peak_temp_c": self.peak_temp,
            "mean_temp_c": self.mean_temp,
            "computing_kwh": self.computing_kwh,
            "cooling_kwh": self.cooling_kwh,
            "total_kwh": self.total_kwh,
            "mean_active_hosts": self.mean_active_hosts,
            "migrations": self.sla.n_migrations,
            "sla_tah": self.sla.sla_tah,
            "pdm": self.sla.pdm,
            "sla_violation": self.sla.sla_violation,
        }


def histogram(samples: Sequence[float], bin_width: float = 2.0):
    """Fixed-width bins [lo, lo + w) aligned to multiples of ``bin_width``.

    The CDF is the fraction of samples strictly below each edge, so it starts
    at 0 and ends at exactly 1.
    """
    if bin_width <= 0:
        raise MetricError("bin width must be positive")
    x = np.asarray([s for s in samples if math.isfinite(s)], dtype=float)
    if x.size == 0:
        return (0.0, bin_width), (0,), (0.0, 0.0)
    lo = math.floor(x.min() / bin_width) * bin_width
    hi = math.floor(x.max() / bin_width) * bin_width + bin_width
    n_bins = int(round((hi - lo) / bin_width))
    edges = lo + bin_width * np.arange(n_bins + 1)
    idx = np.minimum(((x - lo) // bin_width).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    cdf = np.concatenate([[0.0], np.cumsum(counts) / x.size])
    return tuple(float(e) for e in edges), tuple(int(c) for c in counts), tuple(float(c) for c in cdf)


def aggregate(rows: Sequence[IntervalRow], sla: SlaMetrics, policy: str = "", config: dict | None = None,
              bin_width: float = 2.0) -> SimReport:
    if not rows:
        raise MetricError("no interval rows to aggregate")
    peaks = [r.peak_temp for r in rows if math.isfinite(r.peak_temp)]
    temps = [t for r in rows for t in r.temps]
    edges, counts, cdf = histogram(temps, bin_width)
    computing = math.fsum(r.computing_kwh for r in rows)
    cooling = math.fsum(r.cooling_kwh for r in rows)
    return SimReport(
        policy=policy,
        rows=tuple(rows),
        peak_temp=max(peaks) if peaks else math.nan,
        mean_temp=math.fsum(temps) / len(temps) if temps else math.nan,
        computing_kwh=computing,
        cooling_kwh=cooling,
        total_kwh=math.fsum(r.total_kwh for r in rows),
        mean_active_hosts=math.fsum(float(r.active_hosts) for r in rows) / len(rows),
        sla=sla,
        hist_edges=edges,
        hist_counts=counts,
        cdf=cdf,
        config=dict(config or {}),
    )


def energy_saving_pct(energy: float, baseline: float) -> float:
    """Percent less energy than ``baseline``: 100 * (1 - energy / baseline)."""
    if baseline <= 0:
        raise MetricError("baseline energy must be positive")
    return 100.0 * (1.0 - energy / baseline)


COMPARE_FIELDS = ("peak_temp_c", "total_kwh", "mean_active_hosts", "sla_violation", "migrations")


def config_diff(a: dict, b: dict, ignore: Iterable[str] = ("policy",)) -> dict:
    skip = set(ignore)
    keys = (set(a) | set(b)) - skip
    return {k: (a.get(k), b.get(k)) for k in sorted(keys) if a.get(k) != b.get(k)}


@dataclass(frozen=True)
class Comparison:
    policies: tuple[str, ...]
    table: tuple[dict, ...]  # one summary per report
    deltas: dict  # (policy_a, policy_b) -> {field: a - b}
    savings: dict  # policy -> percent energy saved by the lowest-energy policy

    def render(self) -> str:
        head = f"{'policy':<10}{'peak °C':>10}{'total kWh':>12}{'active':>9}{'SLAV':>12}{'migr':>7}"
        lines = [head]
        for s in self.table:
            lines.append(f"{s['policy']:<10}{s['peak_temp_c']:>10.2f}{s['total_kwh']:>12.2f}"
                         f"{s['mean_active_hosts']:>9.2f}{s['sla_violation']:>12.3e}{s['migrations']:>7d}")
        best = min(self.table, key=lambda s: s["total_kwh"])["policy"]
        for p, pct in self.savings.items():
            if p != best:
                lines.append(f"{best} uses {pct:.2f}% less energy than {p}")
        return "\n".join(lines)


def compare_runs(reports: Sequence) -> Comparison:
    """Side-by-side summaries with pairwise deltas and energy savings.

    Accepts :class:`SimReport` objects or (summary dict, config dict) pairs,
    and refuses runs whose configs differ in anything but the policy.
    """
    items = [(r.summary(), r.config) if isinstance(r, SimReport) else r for r in reports]
    if len(items) < 2:
        raise MetricError("need at least two reports to compare")
    base = items[0][1]
    for _, cfg in items[1:]:
        diff = config_diff(base, cfg)
        if diff:
            raise ConfigMismatch(diff)
    table = tuple(s for s, _ in items)
    deltas = {}
    for a in table:
        for b in table:
            if a is not b:
                deltas[(a["policy"], b["policy"])] = {k: a[k] - b[k] for k in COMPARE_FIELDS}
    best = min(s["total_kwh"] for s in table)
    savings = {s["policy"]: energy_saving_pct(best, s["total_kwh"]) for s in table}
    return Comparison(tuple(s["policy"] for s in table), table, deltas, savings)


def write_report(report: SimReport, directory) -> list[Path]:
    """Write intervals.csv, summary.json, histogram.csv and cdf.csv."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    p = d / "intervals.csv"
    with open(p, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INTERVAL_COLUMNS)
        for r in report.rows:
            w.writerow(interval_cells(r))
    out.append(p)
    p = d / "summary.json"
    summary = report.summary()
    summary["sla"] = report.sla.to_dict()
    p.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    out.append(p)
    p = d / "histogram.csv"
    with open(p, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_lo_c", "bin_hi_c", "count"))
        for lo, hi, c in zip(report.hist_edges, report.hist_edges[1:], report.hist_counts):
            w.writerow((repr(lo), repr(hi), c))
    out.append(p)
    p = d / "cdf.csv"
    with open(p, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("temp_c", "fraction_below"))
        for e, c in zip(report.hist_edges, report.cdf):
            w.writerow((repr(e), repr(c)))
    out.append(p)
    return out


def read_summary(directory) -> dict:
    return json.loads((Path(directory) / "summary.json").read_text(encoding="utf-8"))
