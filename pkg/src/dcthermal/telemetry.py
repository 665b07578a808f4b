"""Telemetry ingestion: parse host logs, clean them, and partition per host.

The prediction target is the host ambient temperature, taken as the inlet
temperature plus the hotter of the two CPU sensors.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "CPU", "R", "R_x", "N_CPU", "N_CPUx", "N_Rx", "N_Tx", "N_vm", "P_c",
    "fs_1", "fs_2", "fs_3", "fs_4",
)
TARGET_NAME = "T_amb"

# record attribute backing each feature column, in FEATURE_NAMES order
FEATURE_FIELDS = (
    "cpu_load", "ram_total", "ram_used", "n_cpu", "n_cpu_used", "net_rx",
    "net_tx", "n_vms", "power", "fan1", "fan2", "fan3", "fan4",
)

NUMERIC_FIELDS = (
    "timestamp", "cpu_load", "ram_total", "ram_used", "n_cpu", "n_cpu_used",
    "net_rx", "net_tx", "power", "t_cpu1", "t_cpu2", "fan1", "fan2", "fan3",
    "fan4", "t_inlet", "n_vms",
)
REQUIRED_FIELDS = ("host_id",) + NUMERIC_FIELDS

_NONNEGATIVE = (
    "ram_total", "ram_used", "n_cpu", "n_cpu_used", "net_rx", "net_tx",
    "power", "t_cpu1", "t_cpu2", "fan1", "fan2", "fan3", "fan4", "t_inlet",
    "n_vms",
)


class TelemetryError(Exception):
    pass


class SchemaError(TelemetryError):
    """A required column is missing from the log header."""

    def __init__(self, column: str, path=None):
        self.column = column
        where = f" in {path}" if path is not None else ""
        super().__init__(f"missing required column {column!r}{where}")


class EmptyInputError(TelemetryError):
    pass


@dataclass(frozen=True)
class HostRecord:
    host_id: str
    timestamp: float
    cpu_load: float
    ram_total: float
    ram_used: float
    n_cpu: float
    n_cpu_used: float
    net_rx: float
    net_tx: float
    power: float
    t_cpu1: float
    t_cpu2: float
    fan1: float
    fan2: float
    fan3: float
    fan4: float
    t_inlet: float
    n_vms: float

    def features(self) -> list[float]:
        return [getattr(self, f) for f in FEATURE_FIELDS]


@dataclass(frozen=True)
class LogFormat:
    """How to read a delimited log: delimiter plus a field -> header map.

    Fields absent from ``columns`` are looked up under their own name.
    """

    delimiter: str = ","
    columns: Mapping[str, str] = field(default_factory=dict)

    def header_for(self, name: str) -> str:
        return self.columns.get(name, name)

    @classmethod
    def from_json(cls, path) -> "LogFormat":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        unknown = set(raw.get("columns", {})) - set(REQUIRED_FIELDS)
        if unknown:
            raise TelemetryError(f"unknown fields in column map: {sorted(unknown)}")
        return cls(delimiter=raw.get("delimiter", ","), columns=dict(raw.get("columns", {})))

    def to_dict(self) -> dict:
        return {"delimiter": self.delimiter, "columns": dict(self.columns)}


@dataclass
class ParseResult:
    records: list[HostRecord]
    total_rows: int
    dropped: int
    duplicates: int = 0


def _valid(values: dict) -> bool:
    for name in NUMERIC_FIELDS:
        if not math.isfinite(values[name]):
            return False
    if not 0.0 <= values["cpu_load"] <= 100.0:
        return False
    if any(values[name] < 0 for name in _NONNEGATIVE):
        return False
    return values["ram_used"] <= values["ram_total"]


def parse_log(path, fmt: LogFormat | None = None) -> ParseResult:
    """Read one telemetry log into cleaned ``HostRecord`` objects.

    Rows with an unparseable, non-finite or out-of-range field are dropped.
    When a host reports the same timestamp twice, the last row wins and the
    earlier one is counted as dropped.
    """
    fmt = fmt or LogFormat()
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=fmt.delimiter)
        header = next(reader, None)
        if header is None:
            raise EmptyInputError(f"{path} is empty")
        header = [h.strip() for h in header]
        index = {}
        for name in REQUIRED_FIELDS:
            col = fmt.header_for(name)
            if col not in header:
                raise SchemaError(col, path)
            index[name] = header.index(col)

        kept: dict[tuple[str, float], HostRecord] = {}
        total = dropped = duplicates = 0
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            total += 1
            try:
                values = {n: float(row[index[n]]) for n in NUMERIC_FIELDS}
                host = row[index["host_id"]].strip()
            except (ValueError, IndexError):
                dropped += 1
                continue
            if not host or not _valid(values):
                dropped += 1
                continue
            rec = HostRecord(host_id=host, **values)
            key = (host, rec.timestamp)
            if key in kept:
                duplicates += 1
                dropped += 1
                del kept[key]  # re-insert so dict order tracks the last emission
            kept[key] = rec

    if total == 0:
        raise EmptyInputError(f"{path} has a header but no rows")
    if dropped:
        logger.info("%s: dropped %d of %d rows", path, dropped, total)
    return ParseResult(list(kept.values()), total, dropped, duplicates)


def effective_cpu_temp(r: HostRecord) -> float:
    return max(r.t_cpu1, r.t_cpu2)


def ambient_target(r: HostRecord) -> float:
    return r.t_inlet + effective_cpu_temp(r)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Per-host training data: fixed feature columns plus ambient target."""

    host_id: str
    rows: np.ndarray
    target: np.ndarray
    feature_names: tuple[str, ...] = FEATURE_NAMES

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        target = np.asarray(self.target, dtype=float)
        if rows.ndim != 2 or rows.shape[1] != len(self.feature_names):
            raise ValueError(f"rows must be (n, {len(self.feature_names)}), got {rows.shape}")
        if target.shape != (rows.shape[0],) or rows.shape[0] == 0:
            raise ValueError("rows and target must have the same nonzero length")
        rows.setflags(write=False)
        target.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return self.rows.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.host_id == other.host_id
            and self.feature_names == other.feature_names
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.target, other.target)
        )

    @property
    def bounds(self) -> list[tuple[float, float]]:
        return [(float(c.min()), float(c.max())) for c in self.rows.T]

    @property
    def target_bounds(self) -> tuple[float, float]:
        return float(self.target.min()), float(self.target.max())

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.host_id, self.rows[index], self.target[index], self.feature_names)

    def select_features(self, names: Iterable[str]) -> "Dataset":
        names = tuple(names)
        cols = [self.feature_names.index(n) for n in names]
        return Dataset(self.host_id, self.rows[:, cols], self.target, names)


def partition_by_host(records: Iterable[HostRecord]) -> dict[str, Dataset]:
    """Group records per host in timestamp order and build datasets."""
    grouped: dict[str, list[HostRecord]] = {}
    for r in records:
        grouped.setdefault(r.host_id, []).append(r)
    out = {}
    for host in sorted(grouped):
        recs = sorted(grouped[host], key=lambda r: r.timestamp)  # stable
        rows = np.array([r.features() for r in recs], dtype=float)
        target = np.array([ambient_target(r) for r in recs], dtype=float)
        out[host] = Dataset(host, rows, target)
    return out


def write_dataset(d: Dataset, path) -> None:
    """Write the canonical dataset file (header + float rows, exact repr)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(d.feature_names + (TARGET_NAME,)) + "\n")
        for row, y in zip(d.rows, d.target):
            fh.write(",".join(repr(float(v)) for v in row) + "," + repr(float(y)) + "\n")


def read_dataset(path, host_id: str | None = None) -> Dataset:
    path = Path(path)
    if host_id is None:
        host_id = path.name.split(".")[0]
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if not header or header[-1] != TARGET_NAME:
            raise TelemetryError(f"{path}: last column must be {TARGET_NAME}")
        data = [[float(v) for v in line.rstrip("\n").split(",")] for line in fh if line.strip()]
    if not data:
        raise EmptyInputError(f"{path} has no rows")
    arr = np.array(data, dtype=float)
    return Dataset(host_id, arr[:, :-1], arr[:, -1], tuple(header[:-1]))


def write_aux(records: Iterable[HostRecord], path) -> None:
    """Side file aligned row-for-row with the dataset: timestamp, inlet, CPU temp.

    The dataset itself carries no temperature columns; comparisons against
    the RC model need inlet and CPU temperature separately.
    """
    recs = sorted(records, key=lambda r: r.timestamp)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("timestamp,t_inlet,t_cpu\n")
        for r in recs:
            fh.write(f"{r.timestamp!r},{r.t_inlet!r},{effective_cpu_temp(r)!r}\n")


def read_aux(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def write_log(records: Iterable[HostRecord], path, fmt: LogFormat | None = None) -> None:
    """Write records as a delimited log that ``parse_log`` reads back."""
    fmt = fmt or LogFormat()
    names = [f.name for f in fields(HostRecord)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=fmt.delimiter, lineterminator="\n")
        w.writerow([fmt.header_for(n) for n in names])
        for r in records:
            w.writerow([getattr(r, n) if n == "host_id" else repr(getattr(r, n)) for n in names])


def list_logs(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptyInputError(f"{directory} is not a directory")
    logs = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix in (".csv", ".log", ".txt"))
    if not logs:
        raise EmptyInputError(f"no telemetry logs in {os.fspath(directory)}")
    return logs
