import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcthermal.metrics import (
    ConfigMismatch, ExactSum, IntervalRow, MetricError, SlaAccumulator, SlaMetrics, aggregate, compare_runs,
    energy_saving_pct, histogram, pdm, read_summary, sla_metrics, sla_tah, write_report,
)

NO_SLA = SlaMetrics(0.0, 0.0, 0.0, 0)


def row(i, peak, temps=None, kwh=1.0, active=1):
    temps = tuple(temps) if temps is not None else (peak,)
    return IntervalRow(i, float(np.mean(temps)), peak, active, kwh, kwh / 4.7, 0, temps=temps)


# ---------------------------------------------------------------- SLA

def test_sla_tah_examples():
    assert sla_tah({"a": (0.0, 100.0)}) == 0.0
    assert sla_tah({"a": (50.0, 100.0)}) == 0.5
    assert sla_tah({"a": (10.0, 100.0), "b": (0.0, 50.0)}) == pytest.approx(0.05, abs=1e-15)
    assert sla_tah({"a": (10.0, 100.0), "b": (0.0, 50.0), "never": (0.0, 0.0)}) == sla_tah(
        {"a": (10.0, 100.0), "b": (0.0, 50.0)})
    with pytest.raises(MetricError):
        sla_tah({"a": (0.0, 0.0)})


def test_pdm_examples():
    assert pdm({"a": 1000.0, "b": 1000.0}, {}) == (0.0, ())
    assert pdm({"a": 1000.0, "b": 1000.0}, {"a": 5.0})[0] == pytest.approx(0.0025, abs=1e-15)
    value, skipped = pdm({"a": 1000.0, "z": 0.0}, {"a": 10.0})
    assert value == pytest.approx(0.01) and skipped == ("z",)


def test_zero_degradation_gives_zero_pdm():
    acc = SlaAccumulator()
    acc.add_host_time("h", 0.0, 600.0)
    acc.add_requested("a", 100.0)
    acc.add_migration("a", 100.0, 100.0)
    assert acc.result().pdm == 0.0 and acc.result().n_migrations == 1


def test_sla_violation_is_product():
    m = sla_metrics({"a": (3.0, 7.0), "b": (1.0, 9.0)}, {"a": 3.0, "b": 11.0}, {"b": 0.1}, 1)
    assert m.sla_violation == m.sla_tah * m.pdm
    assert 0.0 <= m.sla_violation <= 1.0


def test_host_time_validated():
    with pytest.raises(MetricError):
        SlaAccumulator().add_host_time("h", 10.0, 5.0)


@given(st.lists(st.floats(min_value=-1e12, max_value=1e12, allow_nan=False), max_size=60))
def test_exact_sum_matches_fsum(xs):
    s = ExactSum()
    for x in xs:
        s.add(x)
    assert s.value == math.fsum(xs)


# ---------------------------------------------------------------- aggregate

def test_single_interval_aggregate():
    r = IntervalRow(0, 80.0, 90.0, 2, 1.5, 0.3, 1, temps=(70.0, 90.0))
    rep = aggregate([r], NO_SLA)
    assert rep.peak_temp == 90.0 and rep.mean_temp == 80.0
    assert rep.total_kwh == r.total_kwh and rep.mean_active_hosts == 2.0


def test_peak_is_max_of_interval_peaks_and_energy_adds():
    rows = [row(0, 90.0), row(1, 95.5), row(2, 93.0)]
    rep = aggregate(rows, NO_SLA)
    assert rep.peak_temp == 95.5
    assert rep.total_kwh == math.fsum(r.total_kwh for r in rows)


def test_histogram_invariants():
    rng = np.random.default_rng(0)
    n_hosts, n_int = 5, 30
    temps = rng.uniform(40, 100, (n_int, n_hosts))
    rows = [row(i, float(t.max()), t, active=n_hosts) for i, t in enumerate(temps)]
    rep = aggregate(rows, NO_SLA)
    assert sum(rep.hist_counts) == n_hosts * n_int
    assert all(b - a == 2.0 for a, b in zip(rep.hist_edges, rep.hist_edges[1:]))
    assert rep.hist_edges[0] <= temps.min() and rep.hist_edges[-1] > temps.max()
    assert list(rep.cdf) == sorted(rep.cdf)
    assert rep.cdf[0] == 0.0 and rep.cdf[-1] == 1.0


def test_histogram_bins_and_cdf_values():
    edges, counts, cdf = histogram([41.0, 42.0, 43.9, 47.0], 2.0)
    assert edges == (40.0, 42.0, 44.0, 46.0, 48.0)
    assert counts == (1, 2, 0, 1)
    assert cdf == (0.0, 0.25, 0.75, 0.75, 1.0)
    with pytest.raises(MetricError):
        histogram([1.0], 0.0)


def test_aggregate_rejects_empty():
    with pytest.raises(MetricError):
        aggregate([], NO_SLA)


# ---------------------------------------------------------------- comparison

def _report(policy, kwh, peak=90.0, config=None):
    return aggregate([row(0, peak, kwh=kwh / (1 + 1 / 4.7))], NO_SLA, policy, config or {"seed": 0})


def test_energy_savings_examples():
    assert energy_saving_pct(172.20, 263.20) == pytest.approx(34.57, abs=5e-3)
    assert energy_saving_pct(172.20, 391.57) == pytest.approx(56.02, abs=5e-3)
    with pytest.raises(MetricError):
        energy_saving_pct(1.0, 0.0)


def test_compare_identical_runs_zero_deltas():
    a, b = _report("a", 10.0), _report("b", 10.0)
    cmp = compare_runs([a, b])
    assert all(v == 0 for v in cmp.deltas[("a", "b")].values())
    assert cmp.savings == {"a": 0.0, "b": 0.0}


def test_compare_deltas_antisymmetric():
    reps = [_report("tas", 172.2, 95.0), _report("rr", 391.57, 101.44), _report("granite", 263.2, 101.81)]
    fwd = compare_runs(reps)
    rev = compare_runs(reps[::-1])
    for (a, b), d in fwd.deltas.items():
        assert all(d[k] == -rev.deltas[(b, a)][k] for k in d)
    assert fwd.savings["granite"] == pytest.approx(34.57, abs=5e-3)
    assert fwd.savings["rr"] == pytest.approx(56.02, abs=5e-3)
    assert "tas uses" in fwd.render()


def test_compare_refuses_mismatched_configs():
    a = _report("a", 1.0, config={"seed": 0, "policy": {"granite": {"s": 1}}})
    b = _report("b", 2.0, config={"seed": 1, "policy": {}})
    with pytest.raises(ConfigMismatch) as exc:
        compare_runs([a, b])
    assert exc.value.diff == {"seed": (0, 1)}
    with pytest.raises(MetricError):
        compare_runs([a])


def test_write_report_files(tmp_path):
    rows = [row(0, 90.0, (80.0, 90.0), active=2), row(1, 91.0, (81.0, 91.0), active=2)]
    rep = aggregate(rows, NO_SLA, "tas", {"seed": 0})
    paths = write_report(rep, tmp_path)
    assert sorted(p.name for p in paths) == ["cdf.csv", "histogram.csv", "intervals.csv", "summary.json"]
    assert len((tmp_path / "intervals.csv").read_text().splitlines()) == 3
    summary = read_summary(tmp_path)
    assert summary["peak_temp_c"] == 91.0 and summary["sla"]["n_migrations"] == 0
    json.dumps(summary)
    again = tmp_path / "again"
    write_report(rep, again)
    for p in paths:
        assert p.read_bytes() == (again / p.name).read_bytes()
