"""Which regressor predicts host ambient temperature best?

Generates synthetic telemetry for one host, then scores six model families
with 10-fold cross-validation. Run: python3 demos/model_comparison.py
"""

import numpy as np

from dcthermal import gbt
from dcthermal.regress import ModelSpec, compare_models, fit_lasso, fit_mlp, fit_ols, fit_ridge, fit_sgd
from dcthermal.synth import make_profiles, synth_telemetry
from dcthermal.telemetry import partition_by_host

# one host, 1000 rows; the target carries N(0, 1) noise, so ~1.0 is the floor
host = partition_by_host(synth_telemetry(make_profiles(1, seed=0), 1000, seed=0, knee=60.0))["h00"]
print(f"{len(host)} rows, target {host.target_bounds[0]:.1f}..{host.target_bounds[1]:.1f} °C")

specs = [
    ModelSpec("LR", fit_ols),
    ModelSpec("BR", lambda d: fit_ridge(d, 1.0)),
    ModelSpec("Lasso", lambda d: fit_lasso(d, 0.01)),
    ModelSpec("SGD", lambda d: fit_sgd(d, 0.001, 20, 0)),
    ModelSpec("MLP", lambda d: fit_mlp(d, 0.1, 2000, 0)),
    ModelSpec("GBT", lambda d: gbt.train(d, seed=0)),
]
for rep in compare_models(host, specs, k=10, seed=0):
    print(f"{rep.model_name:6s} {rep.mean_rmse:6.3f} ± {np.std(rep.fold_rmse):.3f}")

# what the boosted trees lean on
model = gbt.train(host, seed=0)
top = sorted(gbt.feature_importance(model).items(), key=lambda kv: -kv[1])[:5]
print("most used split features:", ", ".join(f"{n} ({c})" for n, c in top))
