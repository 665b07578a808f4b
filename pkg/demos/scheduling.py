"""Three placement policies on one desk-scale day.

Trains a GBT model per host on synthetic telemetry, replays a 24 h trace of
100 VMs over 20 hosts under each policy, and prints the comparison table.
Takes about 20 seconds. Run: python3 demos/scheduling.py
"""

from dcthermal import gbt
from dcthermal.cli import build_inputs
from dcthermal.config import SimConfig
from dcthermal.metrics import aggregate, compare_runs
from dcthermal.sched import HostModels, make_policy
from dcthermal.sim import run_simulation
from dcthermal.synth import make_profiles, synth_telemetry
from dcthermal.telemetry import partition_by_host
from dcthermal.thermal import fit_fan_model

cfg = SimConfig.desk(seed=0)
data = partition_by_host(synth_telemetry(make_profiles(cfg.n_hosts, cfg.seed), 1000, cfg.seed))
models = HostModels.build({h: gbt.train(d, seed=cfg.seed) for h, d in data.items()},
                          {h: fit_fan_model(d) for h, d in data.items()})
cluster, trace = build_inputs(cfg, sorted(data))

reports = []
for name in ("tas", "rr", "granite"):
    policy = make_policy(name, **cfg.policy.get(name, {}))
    result = run_simulation(cluster, trace, policy, models, cfg.params())
    reports.append(aggregate(result.rows, result.sla.result(), name, cfg.to_dict()))

print(compare_runs(reports).render())

# temperature spread per policy: share of host-intervals at or above 90 °C
for rep in reports:
    hot = sum(c for e, c in zip(rep.hist_edges, rep.hist_counts) if e >= 90.0)
    print(f"{rep.policy:8s} {100 * hot / sum(rep.hist_counts):5.1f} % of host-intervals >= 90 °C")
