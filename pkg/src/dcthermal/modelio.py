"""JSON persistence for trained models.

Floats are written with Python's shortest round-trip repr, so a loaded model
predicts bit-identically to the one that was saved, and saving the same
model twice produces byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gbt import Hyper, Tree, TreeEnsemble
from .regress import LinearModel, MlpModel, Standardizer
from .thermal import FanModel

FORMAT = "dcthermal-model"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def _std(s: Standardizer) -> dict:
    return {"mean": s.mean.tolist(), "scale": s.scale.tolist()}


def _unstd(d: dict) -> Standardizer:
    return Standardizer(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


def _linear(m: LinearModel) -> dict:
    return {
        "weights": m.weights.tolist(), "intercept": float(m.intercept), "standardizer": _std(m.standardizer),
        "feature_names": list(m.feature_names), "target_bounds": list(m.target_bounds),
        "kind": m.kind, "rank_deficient": m.rank_deficient, "converged": m.converged,
    }


def _unlinear(d: dict) -> LinearModel:
    return LinearModel(np.asarray(d["weights"], dtype=float), float(d["intercept"]), _unstd(d["standardizer"]),
                       tuple(d["feature_names"]), tuple(d["target_bounds"]), d["kind"],
                       bool(d["rank_deficient"]), bool(d["converged"]))


def to_dict(model) -> dict:
    if isinstance(model, TreeEnsemble):
        body = {
            "kind": "gbt",
            "base_score": float(model.base_score),
            "hyper": model.hyper.to_dict(),
            "feature_names": list(model.feature_names),
            "target_bounds": [float(b) for b in model.target_bounds],
            "trees": [{
                "feature": t.feature.tolist(), "threshold": t.threshold.tolist(), "left": t.left.tolist(),
                "right": t.right.tolist(), "value": t.value.tolist(), "default_left": t.default_left.tolist(),
            } for t in model.trees],
        }
    elif isinstance(model, MlpModel):
        body = {
            "kind": "mlp",
            "hidden_weights": model.hidden_weights.tolist(), "hidden_bias": model.hidden_bias.tolist(),
            "output_weights": model.output_weights.tolist(), "output_bias": float(model.output_bias),
            "standardizer": _std(model.standardizer), "target_mean": float(model.target_mean),
            "target_scale": float(model.target_scale), "feature_names": list(model.feature_names),
            "target_bounds": [float(b) for b in model.target_bounds],
        }
    elif isinstance(model, LinearModel):
        body = {"kind": "linear", "model": _linear(model)}
    elif isinstance(model, FanModel):
        body = {"kind": "fan", "models": [_linear(m) for m in model.models],
                "bounds": [list(b) for b in model.bounds], "input_names": list(model.input_names)}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    body.update(format=FORMAT, version=VERSION)
    return body


def from_dict(d: dict):
    if d.get("format") != FORMAT:
        raise ModelFormatError("not a model file")
    if d.get("version") != VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
    kind = d.get("kind")
    try:
        if kind == "gbt":
            trees = [Tree(np.asarray(t["feature"], dtype=np.int64), np.asarray(t["threshold"], dtype=float),
                          np.asarray(t["left"], dtype=np.int64), np.asarray(t["right"], dtype=np.int64),
                          np.asarray(t["value"], dtype=float), np.asarray(t["default_left"], dtype=bool))
                     for t in d["trees"]]
            return TreeEnsemble(trees, float(d["base_score"]), Hyper(**d["hyper"]),
                                tuple(d["feature_names"]), tuple(d["target_bounds"]))
        if kind == "mlp":
            return MlpModel(np.asarray(d["hidden_weights"], dtype=float), np.asarray(d["hidden_bias"], dtype=float),
                            np.asarray(d["output_weights"], dtype=float), float(d["output_bias"]),
                            _unstd(d["standardizer"]), float(d["target_mean"]), float(d["target_scale"]),
                            tuple(d["feature_names"]), tuple(d["target_bounds"]))
        if kind == "linear":
            return _unlinear(d["model"])
        if kind == "fan":
            return FanModel(tuple(_unlinear(m) for m in d["models"]), tuple(tuple(b) for b in d["bounds"]),
                            tuple(d["input_names"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt {kind} model: {exc}") from exc
    raise ModelFormatError(f"unknown model kind {kind!r}")


def dumps(model) -> str:
    return json.dumps(to_dict(model), sort_keys=True, separators=(",", ":")) + "\n"


def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(model), encoding="utf-8")
    return path


def load_model(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return from_dict(d)
    except ModelFormatError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
