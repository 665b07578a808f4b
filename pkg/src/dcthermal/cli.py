"""Command-line entry point.

    dcthermal generate            synthetic raw telemetry logs and a VM trace
    dcthermal ingest              raw logs -> per-host datasets + summary
    dcthermal train               datasets -> per-host models + CV report
    dcthermal compare-theoretical learned model vs RC model on held-out rows
    dcthermal simulate            play a trace under one scheduling policy
    dcthermal compare             side-by-side table of simulate runs
    dcthermal serve               HTTP prediction endpoint

Every command that writes files puts a ``config.json`` (resolved arguments)
and a ``manifest.json`` (file hashes) into its output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gbt, modelio
from .config import ConfigError, SimConfig
from .metrics import aggregate, compare_runs, read_summary, write_report
from .regress import fit_lasso, fit_mlp, fit_ols, fit_ridge, fit_sgd, kfold_cv
from .sched import make_policy
from .serve import load_model_dir, make_server
from .sim import (Cluster, Trace, VmSpec, flavor_for_cores, load_trace, read_vms, run_simulation, write_trace,
                  write_vms)
from .synth import make_profiles, make_vms, synth_telemetry, synth_trace_arrays
from .telemetry import (FEATURE_NAMES, LogFormat, TelemetryError, list_logs, parse_log, partition_by_host,
                        read_aux, read_dataset, write_aux, write_dataset, write_log)
from .thermal import RcParams, fit_fan_model, rc_temperature

logger = logging.getLogger("dcthermal")

MODEL_SUFFIX = ".model.json"
FAN_SUFFIX = ".fan.json"
AUX_SUFFIX = ".aux.csv"


class CliError(Exception):
    pass


def _dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_run_files(out: Path, config: dict) -> None:
    """Record the resolved config, then hash every file in ``out``."""
    _dump(config, out / "config.json")
    files = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files.append({"path": p.relative_to(out).as_posix(), "bytes": p.stat().st_size,
                          "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
    _dump({"files": files}, out / "manifest.json")


# --------------------------------------------------------------------------- generate

def cmd_generate(out, n_hosts: int = 4, rows: int = 1000, n_vms: int = 20, n_intervals: int = 144,
                 seed: int = 0, idle_hosts: int = 0, noise: float = 1.0,
                 flavor_mix=(0.3, 0.3, 0.25, 0.15)) -> Path:
    out = Path(out)
    (out / "telemetry").mkdir(parents=True, exist_ok=True)
    profiles = make_profiles(n_hosts, seed, idle_hosts)
    records = synth_telemetry(profiles, rows, seed=seed, noise=noise)
    by_host: dict[str, list] = {}
    for r in records:
        by_host.setdefault(r.host_id, []).append(r)
    for host, recs in sorted(by_host.items()):
        write_log(recs, out / "telemetry" / f"{host}.csv")
    vms = [VmSpec(v.vm_id, v.flavor) for v in make_vms(n_vms, seed, flavor_mix)]
    cpu, ram, rx, tx = synth_trace_arrays(vms, n_intervals, 600.0, seed)
    trace = Trace(tuple(v.vm_id for v in vms), cpu, ram, rx, tx)
    write_trace(trace, out / "trace")
    write_vms(vms, out / "trace" / "vms.csv")
    _dump([{"host_id": p.host_id, "inlet_base": p.inlet_base, "cpu_offset": p.cpu_offset,
            "resistance": p.resistance, "idle": p.idle} for p in profiles], out / "profiles.json")
    write_run_files(out, {"command": "generate", "n_hosts": n_hosts, "rows": rows, "n_vms": n_vms,
                          "n_intervals": n_intervals, "seed": seed, "idle_hosts": idle_hosts, "noise": noise,
                          "flavor_mix": list(flavor_mix)})
    return out


# --------------------------------------------------------------------------- ingest

def cmd_ingest(raw_dir, out, fmt_path=None) -> dict:
    fmt = LogFormat.from_json(fmt_path) if fmt_path else LogFormat()
    logs = list_logs(raw_dir)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    records, files = [], []
    for p in logs:
        res = parse_log(p, fmt)
        records.extend(res.records)
        files.append({"file": p.name, "rows": res.total_rows, "kept": len(res.records),
                      "dropped": res.dropped, "duplicates": res.duplicates})
    if not records:
        raise TelemetryError(f"no valid rows in {raw_dir}")
    by_host: dict[str, list] = {}
    for r in records:
        by_host.setdefault(r.host_id, []).append(r)
    hosts = {}
    for host, d in partition_by_host(records).items():
        write_dataset(d, out / f"{host}.csv")
        write_aux(by_host[host], out / f"{host}{AUX_SUFFIX}")
        hosts[host] = {"rows": len(d), "target_bounds": list(d.target_bounds),
                       "feature_bounds": {n: list(b) for n, b in zip(d.feature_names, d.bounds)}}
    summary = {"files": files, "hosts": hosts,
               "total_rows": sum(f["rows"] for f in files),
               "kept_rows": sum(h["rows"] for h in hosts.values()),
               "dropped_rows": sum(f["dropped"] for f in files)}
    _dump(summary, out / "summary.json")
    write_run_files(out, {"command": "ingest", "raw_dir": str(raw_dir), "format": fmt.to_dict()})
    return summary


# --------------------------------------------------------------------------- train

def make_trainer(kind: str, hyper: dict, seed: int):
    hyper = dict(hyper or {})
    if kind == "gbt":
        h = gbt.Hyper(**hyper)
        h.validate()
        return lambda d: gbt.train(d, h, seed)
    if kind == "ols":
        return fit_ols
    if kind == "ridge":
        return lambda d: fit_ridge(d, hyper.get("lam", 1.0))
    if kind == "lasso":
        return lambda d: fit_lasso(d, hyper.get("lam", 0.01))
    if kind == "sgd":
        return lambda d: fit_sgd(d, hyper.get("lr", 0.001), hyper.get("epochs", 20), seed)
    if kind == "mlp":
        return lambda d: fit_mlp(d, hyper.get("lr", 0.1), hyper.get("epochs", 2000), seed)
    raise CliError(f"unknown model kind {kind!r}")


def dataset_files(data_dir) -> list[Path]:
    files = sorted(p for p in Path(data_dir).glob("*.csv") if not p.name.endswith(AUX_SUFFIX))
    if not files:
        raise CliError(f"no datasets in {data_dir}")
    return files


def holdout_split(n: int, fraction: float, seed: int, host_index: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 101, host_index]).permutation(n)
    k = int(round(n * fraction))
    return np.sort(perm[k:]), np.sort(perm[:k])


def cmd_train(data_dir, out, kind: str = "gbt", hyper: dict | None = None, seed: int = 0, cv: int = 5,
              holdout: float = 0.1) -> dict:
    if not 0 <= holdout < 1:
        raise CliError("holdout must be in [0, 1)")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = make_trainer(kind, hyper or {}, seed)
    report, held = {}, {}
    for i, path in enumerate(dataset_files(data_dir)):
        d = read_dataset(path)
        train_idx, test_idx = holdout_split(len(d), holdout, seed, i)
        td = d.subset(train_idx)
        model = trainer(td)
        modelio.save_model(model, out / f"{d.host_id}{MODEL_SUFFIX}")
        modelio.save_model(fit_fan_model(td), out / f"{d.host_id}{FAN_SUFFIX}")
        held[d.host_id] = test_idx.tolist()
        if cv >= 2:
            rep = kfold_cv(td, cv, trainer, seed, kind).to_dict()
            lo, hi = td.target_bounds
            # also in min-max normalized target units, for comparison with unit-free RMSE figures
            rep["mean_rmse_normalized"] = rep["mean_rmse"] / (hi - lo) if hi > lo else 0.0
            report[d.host_id] = rep
        logger.info("trained %s on %d rows", d.host_id, len(td))
    if report:
        means = [r["mean_rmse"] for r in report.values()]
        _dump({"model": kind, "k": cv, "hosts": report, "mean_rmse": float(np.mean(means))},
              out / "cv_report.json")
    _dump({"seed": seed, "fraction": holdout, "rows": held}, out / "holdout.json")
    write_run_files(out, {"command": "train", "data_dir": str(data_dir), "kind": kind, "hyper": hyper or {},
                          "seed": seed, "cv": cv, "holdout": holdout})
    return report


# --------------------------------------------------------------------------- compare-theoretical

def cmd_compare_theoretical(model_dir, data_dir, out, n: int = 1000, seed: int = 0,
                            rc: RcParams = RcParams(), horizon_s: float = 600.0) -> dict:
    """Held-out CPU temperature error: learned model vs the RC model.

    The learned CPU temperature is the predicted ambient temperature minus
    the measured inlet temperature.
    """
    model_dir, out = Path(model_dir), Path(out)
    held = json.loads((model_dir / "holdout.json").read_text(encoding="utf-8"))["rows"]
    pool = [(h, int(r)) for h in sorted(held) for r in held[h]]
    if not pool:
        raise CliError("no held-out rows recorded; train with --holdout > 0")
    if n > len(pool):
        logger.warning("requested %d tuples but only %d are held out; using %d", n, len(pool), len(pool))
        n = len(pool)
    pick = np.random.default_rng([seed, 202]).choice(len(pool), size=n, replace=False)
    cache = {}
    p_col = FEATURE_NAMES.index("P_c")
    rows = []
    for k in pick.tolist():
        host, r = pool[k]
        if host not in cache:
            cache[host] = (modelio.load_model(model_dir / f"{host}{MODEL_SUFFIX}"),
                           read_dataset(Path(data_dir) / f"{host}.csv"), read_aux(Path(data_dir) / f"{host}{AUX_SUFFIX}"))
        model, d, aux = cache[host]
        t_in, t_cpu = float(aux[r, 1]), float(aux[r, 2])
        learned = float(model.predict(d.rows[r])) - t_in
        theory = rc_temperature(float(d.rows[r, p_col]), t_in, horizon_s, rc)
        rows.append((host, r, t_cpu, learned, theory, abs(learned - t_cpu), abs(theory - t_cpu)))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "tuples.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("host_id", "row", "t_cpu_c", "learned_c", "rc_c", "learned_abs_err", "rc_abs_err"))
        for row in rows:
            w.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])
    learned_err = sorted(r[5] for r in rows)
    rc_err = sorted(r[6] for r in rows)
    with open(out / "error_curve.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "learned_abs_err", "rc_abs_err"))
        for i, (a, b) in enumerate(zip(learned_err, rc_err)):
            w.writerow((i, repr(a), repr(b)))
    report = {"n": n, "seed": seed, "horizon_s": horizon_s,
              "learned_mae": float(np.mean(learned_err)), "rc_mae": float(np.mean(rc_err)),
              "learned_max_err": max(learned_err), "rc_max_err": max(rc_err)}
    _dump(report, out / "report.json")
    write_run_files(out, {"command": "compare-theoretical", "model_dir": str(model_dir), "data_dir": str(data_dir),
                          "n": n, "seed": seed, "horizon_s": horizon_s,
                          "rc": {"R": rc.R, "C": rc.C, "t_initial_k": rc.t_initial}})
    return report


# --------------------------------------------------------------------------- simulate

def build_inputs(cfg: SimConfig, hosts: list[str]):
    """Cluster and trace for a config: from ``trace_dir`` or generated from ``seed``."""
    if cfg.trace_dir:
        trace = load_trace(cfg.trace_dir, cfg.interval_s, cfg.n_intervals)
        vms_file = Path(cfg.trace_dir) / "vms.csv"
        if vms_file.exists():
            vms = read_vms(vms_file)
        else:
            vms = [VmSpec(v, flavor_for_cores(trace.cores.get(v, 1))) for v in trace.vm_ids]
    else:
        vms = [VmSpec(v.vm_id, v.flavor) for v in make_vms(cfg.n_vms, cfg.seed, cfg.flavor_mix)]
        cpu, ram, rx, tx = synth_trace_arrays(vms, cfg.n_intervals, cfg.interval_s, cfg.seed)
        trace = Trace(tuple(v.vm_id for v in vms), cpu, ram, rx, tx, cfg.interval_s)
    missing = set(v.vm_id for v in vms) - set(trace.vm_ids)
    if missing:
        raise CliError(f"VMs without trace rows: {sorted(missing)[:5]}")
    spec = cfg.host_spec()
    return Cluster({h: spec for h in hosts}, {v.vm_id: v for v in vms}), trace


def model_digest(model_dir) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(model_dir).glob("*.json")):
        if p.name in ("config.json", "manifest.json"):
            continue
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def cmd_simulate(cfg: SimConfig, policy: str, model_dir, out, seed: int | None = None):
    if seed is not None:
        cfg = SimConfig.from_dict({**cfg.to_dict(), "seed": seed})
    models, _ = load_model_dir(model_dir, cfg.guard_margin_c, cfg.guard)
    missing_fans = sorted(set(models.predictors) - set(models.fans))
    if missing_fans:
        raise CliError(f"fan models missing for hosts {missing_fans}")
    cluster, trace = build_inputs(cfg, sorted(models.predictors))
    pol = make_policy(policy, **cfg.policy.get(policy, {}))
    result = run_simulation(cluster, trace, pol, models, cfg.params(), min(cfg.n_intervals, trace.n_intervals))
    resolved = {**cfg.to_dict(), "models": model_digest(model_dir)}
    report = aggregate(result.rows, result.sla.result(), policy, resolved, cfg.hist_bin_c)
    out = Path(out)
    write_report(report, out)
    if result.decisions:
        with open(out / "decisions.jsonl", "w", encoding="utf-8") as fh:
            for d in result.decisions:
                fh.write(json.dumps(d, sort_keys=True) + "\n")
    write_run_files(out, {"command": "simulate", "policy": policy, "model_dir": str(model_dir), "sim": resolved})
    return report, result


def cmd_compare(run_dirs, out=None) -> str:
    items = []
    for d in run_dirs:
        summary = read_summary(d)
        cfg = json.loads((Path(d) / "config.json").read_text(encoding="utf-8"))
        items.append((summary, cfg.get("sim", cfg)))
    comp = compare_runs(items)
    text = comp.render()
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(text + "\n", encoding="utf-8")
        _dump({"table": list(comp.table), "savings_pct": comp.savings,
               "deltas": {f"{a}-{b}": v for (a, b), v in sorted(comp.deltas.items())}},
              out / "comparison.json")
        write_run_files(out, {"command": "compare", "runs": [str(d) for d in run_dirs]})
    return text


# --------------------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dcthermal", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic raw telemetry logs and a VM trace")
    g.add_argument("--out", required=True)
    g.add_argument("--hosts", type=int, default=4)
    g.add_argument("--rows", type=int, default=1000, help="telemetry rows per host")
    g.add_argument("--vms", type=int, default=20)
    g.add_argument("--intervals", type=int, default=144)
    g.add_argument("--idle-hosts", type=int, default=0, help="hosts whose telemetry only covers near-idle load")
    g.add_argument("--noise", type=float, default=1.0, help="target noise sigma, °C")
    g.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("ingest", help="parse raw logs into per-host datasets")
    i.add_argument("raw_dir")
    i.add_argument("--out", required=True)
    i.add_argument("--format", help="JSON file with delimiter and column-name map")

    t = sub.add_parser("train", help="train one model per host")
    t.add_argument("data_dir")
    t.add_argument("--out", required=True)
    t.add_argument("--kind", default="gbt", choices=["gbt", "ols", "ridge", "lasso", "sgd", "mlp"])
    t.add_argument("--hyper", default="{}", help='JSON object, e.g. \'{"eta": 0.1, "max_depth": 4}\'')
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--cv", type=int, default=5, help="folds for the CV report; 0 skips it")
    t.add_argument("--holdout", type=float, default=0.1, help="fraction of rows kept out of training")

    c = sub.add_parser("compare-theoretical", help="learned vs RC model error on held-out rows")
    c.add_argument("--models", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("-n", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--horizon", type=float, default=600.0, help="seconds since the RC model's initial state")
    c.add_argument("--config", help="simulator config supplying RC constants")

    s = sub.add_parser("simulate", help="run one policy over a trace")
    s.add_argument("--config", help="simulator config JSON (desk preset if omitted)")
    s.add_argument("--policy", required=True, choices=["tas", "rr", "granite"])
    s.add_argument("--models", required=True)
    s.add_argument("--trace", help="trace directory (overrides the config)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)

    m = sub.add_parser("compare", help="compare simulate runs made on one config")
    m.add_argument("runs", nargs="+")
    m.add_argument("--out")

    v = sub.add_parser("serve", help="HTTP prediction endpoint")
    v.add_argument("--models", required=True)
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8080)
    v.add_argument("--margin", type=float, default=10.0, help="guard slack around training targets, °C")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "generate":
            out = cmd_generate(args.out, args.hosts, args.rows, args.vms, args.intervals, args.seed,
                               args.idle_hosts, args.noise)
            print(f"wrote {out}")
        elif args.command == "ingest":
            s = cmd_ingest(args.raw_dir, args.out, args.format)
            for h, info in s["hosts"].items():
                print(f"{h}: {info['rows']} rows")
            print(f"kept {s['kept_rows']} of {s['total_rows']} rows ({s['dropped_rows']} dropped)")
        elif args.command == "train":
            try:
                hyper = json.loads(args.hyper)
            except json.JSONDecodeError as exc:
                raise CliError(f"--hyper is not valid JSON: {exc}") from None
            rep = cmd_train(args.data_dir, args.out, args.kind, hyper, args.seed, args.cv, args.holdout)
            for h, r in rep.items():
                print(f"{h}: {args.cv}-fold RMSE {r['mean_rmse']:.3f}")
        elif args.command == "compare-theoretical":
            rc = SimConfig.load(args.config).rc_params() if args.config else RcParams()
            r = cmd_compare_theoretical(args.models, args.data, args.out, args.n, args.seed, rc, args.horizon)
            print(f"n={r['n']}  learned MAE {r['learned_mae']:.2f} °C  RC MAE {r['rc_mae']:.2f} °C")
        elif args.command == "simulate":
            cfg = SimConfig.load(args.config) if args.config else SimConfig.desk()
            if args.trace:
                cfg = SimConfig.from_dict({**cfg.to_dict(), "trace_dir": args.trace})
            report, _ = cmd_simulate(cfg, args.policy, args.models, args.out, args.seed)
            s = report.summary()
            print(f"{args.policy}: peak {s['peak_temp_c']:.2f} °C, {s['total_kwh']:.2f} kWh, "
                  f"{s['mean_active_hosts']:.2f} active hosts, {s['migrations']} migrations")
        elif args.command == "compare":
            print(cmd_compare(args.runs, args.out))
        elif args.command == "serve":
            models, versions = load_model_dir(args.models, args.margin)
            server = make_server(models, versions, args.host, args.port)
            print(f"serving {len(models.predictors)} host models on http://{args.host}:{server.server_port}/predict")
            try:
                server.serve_forever()
            except KeyboardInterrupt:
                pass
            finally:
                server.server_close()
    except (CliError, ConfigError, TelemetryError, modelio.ModelFormatError, FileNotFoundError,
            ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
