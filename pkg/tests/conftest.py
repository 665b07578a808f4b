import numpy as np
import pytest

from dcthermal.regress import LinearModel, Standardizer
from dcthermal.sched import HostModels
from dcthermal.sim import Cluster, ClusterState, HostSpec, HostState, PlacementContext, SimParams, Trace, VmSpec
from dcthermal.thermal import NON_FAN_FEATURES, FanModel

CRITERIA: dict[int, tuple[str, str]] = {}


class FakeModel:
    """Predictor whose output is a fixed function of the feature vector."""

    def __init__(self, fn, target_bounds=(0.0, 200.0)):
        self.fn = fn
        self.target_bounds = target_bounds

    def predict(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return np.array([self.fn(r) for r in x])
        return float(self.fn(x))


def const_fan(rpm: float = 5000.0) -> FanModel:
    p = len(NON_FAN_FEATURES)
    lm = LinearModel(np.zeros(p), rpm, Standardizer.identity(p), NON_FAN_FEATURES)
    return FanModel(tuple([lm] * 4), tuple([(rpm, rpm)] * 4))


def linear_temp(base: float, per_util: float = 0.0):
    return FakeModel(lambda x: base + per_util * x[0])


def fake_models(temps: dict, guard: bool = False) -> HostModels:
    """``temps`` maps host -> FakeModel or constant °C."""
    preds = {h: (t if isinstance(t, FakeModel) else FakeModel(lambda x, t=t: t)) for h, t in temps.items()}
    return HostModels.build(preds, {h: const_fan() for h in preds}, guard=guard)


def make_world(host_ids, vms: dict, cpu: dict, ram: dict | None = None, placements: dict | None = None,
               n_intervals: int = 1, spec: HostSpec = HostSpec()):
    """Cluster + constant trace. ``vms`` maps vm -> flavor, ``cpu`` vm -> percent."""
    ids = sorted(vms)
    ram = ram or {}
    cl = Cluster({h: spec for h in host_ids}, {v: VmSpec(v, f) for v, f in vms.items()})
    cpu_a = np.array([[cpu[v]] * n_intervals for v in ids], dtype=float).reshape(len(ids), n_intervals)
    ram_a = np.array([[ram.get(v, 1024.0)] * n_intervals for v in ids], dtype=float).reshape(len(ids), n_intervals)
    zeros = np.zeros_like(cpu_a)
    trace = Trace(tuple(ids), cpu_a, ram_a, zeros, zeros)
    placements = dict(placements or {})
    used = set(placements.values())
    state = ClusterState(0, placements, {h: HostState(active=h in used) for h in host_ids})
    return cl, trace, state


def make_ctx(cluster, trace, state, models, params=SimParams(), i=0):
    return PlacementContext(cluster, trace, i, state, models, params)


@pytest.fixture
def world():
    return make_world



@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        CRITERIA[n] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, title = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {title}")
