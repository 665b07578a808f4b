"""A host that only ever idled has a model that extrapolates badly under load.

The prediction guard notices the out-of-range value and swaps in the average
of the peer hosts' predictions. Run: python3 demos/guard.py
"""

import numpy as np

from dcthermal.regress import fit_ols
from dcthermal.sched import HostModels
from dcthermal.synth import make_profiles, synth_telemetry
from dcthermal.telemetry import partition_by_host

profiles = make_profiles(4, seed=9, idle_hosts=1)
data = partition_by_host(synth_telemetry(profiles, 400, seed=9))
idle = profiles[-1].host_id
preds = {h: fit_ols(d) for h, d in data.items()}
models = HostModels.build(preds, {})

busy_host = data["h00"]
x = busy_host.rows[np.argmax(busy_host.rows[:, 0])]  # the busiest row we have
print(f"{idle} saw at most {data[idle].bounds[0][1]:.2f} % CPU; asking it about {x[0]:.0f} %")
print(f"  raw prediction {float(preds[idle].predict(x)):.1f} °C")
out = models.predict(idle, x)
print(f"  guarded        {out.value:.1f} °C ({out.flag})")
