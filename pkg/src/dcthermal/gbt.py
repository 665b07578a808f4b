"""Gradient-boosted regression trees with a regularized objective.

Squared-error loss, so per-row gradients are ``pred - y`` and hessians are 1.
Each tree is grown by exact greedy search over midpoints of sorted unique
feature values; a split is kept only if its regularized gain exceeds zero.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .regress import CvReport, kfold_cv, rmse
from .telemetry import Dataset

logger = logging.getLogger(__name__)

LEAF = -1


@dataclass(frozen=True)
class Hyper:
    """Boosting hyperparameters. Defaults are the tuned cell used throughout."""

    eta: float = 0.1
    gamma: float = 0.5
    lam: float = 1.0
    max_depth: int = 4
    min_child_weight: float = 4.0
    subsample: float = 1.0
    rounds: int = 100
    early_stopping: int | None = None  # patience on a 10% holdout; None disables

    def validate(self) -> None:
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if self.gamma < 0 or self.lam < 0 or self.min_child_weight < 0:
            raise ValueError("gamma, lam and min_child_weight must be >= 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must be in (0, 1]")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.early_stopping is not None and self.early_stopping < 1:
            raise ValueError("early_stopping patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Tree:
    """One regression tree stored as pre-order node arrays.

    ``feature[i] == LEAF`` marks a leaf whose output is ``value[i]``.
    Internal nodes send ``x[feature] < threshold`` left, everything else right.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    default_left: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_internal(self) -> int:
        return int(np.count_nonzero(self.feature != LEAF))

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] == LEAF:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index reached by each row of X."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f != LEAF
            if not internal.any():
                return node
            ri = rows[internal]
            ni = node[internal]
            go_left = X[ri, f[internal]] < self.threshold[ni]
            node[internal] = np.where(go_left, self.left[ni], self.right[ni])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature == LEAF)


class _TreeBuilder:
    def __init__(self, X, g, h, hyper: Hyper):
        self.X = X
        self.g = g
        self.h = h
        self.hp = hyper
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.members: dict[int, np.ndarray] = {}

    def leaf_weight(self, idx) -> float:
        G = float(self.g[idx].sum())
        H = float(self.h[idx].sum())
        return -G / (H + self.hp.lam)

    def best_split(self, idx):
        hp = self.hp
        Xn = self.X[idx]
        if Xn.shape[0] < 2:
            return None
        order = np.argsort(Xn, axis=0, kind="stable")
        xs = np.take_along_axis(Xn, order, axis=0)
        gs = self.g[idx][order]
        hs = self.h[idx][order]
        GL = np.cumsum(gs, axis=0)[:-1]
        HL = np.cumsum(hs, axis=0)[:-1]
        G = float(self.g[idx].sum())
        H = float(self.h[idx].sum())
        GR = G - GL
        HR = H - HL
        valid = (xs[1:] != xs[:-1]) & (HL >= hp.min_child_weight) & (HR >= hp.min_child_weight)
        if not valid.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (GL ** 2 / (HL + hp.lam) + GR ** 2 / (HR + hp.lam)
                          - G ** 2 / (H + hp.lam)) - hp.gamma
        gain = np.where(valid, gain, -np.inf)
        # feature-major flattening: ties go to the lower feature, then lower threshold
        flat = int(np.argmax(gain.T))
        j, pos = divmod(flat, gain.shape[0])
        best = float(gain[pos, j])
        if not best > 0:
            return None
        lo, hi = xs[pos, j], xs[pos + 1, j]
        thr = 0.5 * (lo + hi)
        if not thr > lo:
            thr = hi
        return j, float(thr), best

    def grow(self, idx: np.ndarray, depth: int) -> int:
        node = len(self.feature)
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(0.0)
        split = self.best_split(idx) if depth < self.hp.max_depth else None
        if split is None:
            self.value[node] = self.leaf_weight(idx)
            self.members[node] = idx
            return node
        j, thr, _ = split
        go_left = self.X[idx, j] < thr
        self.feature[node] = j
        self.threshold[node] = thr
        self.left[node] = self.grow(idx[go_left], depth + 1)
        self.right[node] = self.grow(idx[~go_left], depth + 1)
        return node

    def build(self, idx: np.ndarray) -> Tree:
        self.grow(idx, 0)
        n = len(self.feature)
        return Tree(
            feature=np.array(self.feature, dtype=np.int64),
            threshold=np.array(self.threshold, dtype=float),
            left=np.array(self.left, dtype=np.int64),
            right=np.array(self.right, dtype=np.int64),
            value=np.array(self.value, dtype=float),
            default_left=np.zeros(n, dtype=bool),
        )


@dataclass(eq=False)
class TreeEnsemble:
    trees: list[Tree]
    base_score: float
    hyper: Hyper
    feature_names: tuple[str, ...]
    target_bounds: tuple[float, float]
    kind: str = field(default="gbt", init=False)
    _packed: tuple | None = field(default=None, init=False, repr=False)

    def truncated(self, n_trees: int) -> "TreeEnsemble":
        return TreeEnsemble(self.trees[:n_trees], self.base_score, self.hyper,
                            self.feature_names, self.target_bounds)

    def _check(self, X) -> tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != len(self.feature_names):
            raise ValueError(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        return X, single

    def tree_outputs(self, X) -> np.ndarray:
        """Per-tree raw outputs, shape (n_rows, n_trees)."""
        X, _ = self._check(X)
        if not self.trees:
            return np.zeros((X.shape[0], 0))
        if X.shape[0] == 1:
            return self._packed_outputs(X[0])[None, :]
        return np.column_stack([t.predict(X) for t in self.trees])

    def predict(self, X):
        X, single = self._check(X)
        eta = self.hyper.eta
        if single:
            s = self.base_score
            if self.trees:
                for v in self._packed_outputs(X[0]).tolist():
                    s += eta * v
            return float(s)
        out = np.full(X.shape[0], self.base_score)
        if self.trees:
            outs = self.tree_outputs(X)
            for k in range(outs.shape[1]):
                out += eta * outs[:, k]
        return out

    def _packed_outputs(self, x: np.ndarray) -> np.ndarray:
        # all trees walked in lock-step for a single row
        if self._packed is None:
            width = max(t.n_nodes for t in self.trees)
            def pad(attr, fill, dtype):
                a = np.full((len(self.trees), width), fill, dtype=dtype)
                for i, t in enumerate(self.trees):
                    a[i, : t.n_nodes] = getattr(t, attr)
                return a
            self._packed = (
                pad("feature", LEAF, np.int64), pad("threshold", 0.0, float),
                pad("left", 0, np.int64), pad("right", 0, np.int64), pad("value", 0.0, float),
            )
        feat, thr, left, right, value = self._packed
        rows = np.arange(feat.shape[0])
        node = np.zeros(feat.shape[0], dtype=np.int64)
        for _ in range(self.hyper.max_depth + 1):
            f = feat[rows, node]
            internal = f != LEAF
            if not internal.any():
                break
            fx = x[np.where(internal, f, 0)]
            go_left = fx < thr[rows, node]
            nxt = np.where(go_left, left[rows, node], right[rows, node])
            node = np.where(internal, nxt, node)
        return value[rows, node]


def predict(m: TreeEnsemble, x) -> float:
    return m.predict(x)


def _rounds(d: Dataset, hyper: Hyper, seed: int, record: list | None = None,
            holdout: Dataset | None = None):
    X = d.rows
    y = d.target
    n = X.shape[0]
    base = float(y.mean())
    pred = np.full(n, base)
    hold_pred = np.full(len(holdout), base) if holdout is not None else None
    rng = np.random.default_rng(seed)
    h = np.ones(n)
    trees: list[Tree] = []
    best = (np.inf, 0)
    for r in range(hyper.rounds):
        g = pred - y
        if hyper.subsample < 1.0:
            m = max(1, int(round(hyper.subsample * n)))
            idx = np.sort(rng.choice(n, size=m, replace=False))
        else:
            idx = np.arange(n)
        builder = _TreeBuilder(X, g, h, hyper)
        tree = builder.build(idx)
        trees.append(tree)
        if record is not None:
            record.append({"round": r, "gradients": g.copy(), "rows": idx,
                           "members": dict(builder.members), "tree": tree})
        pred = pred + hyper.eta * tree.predict(X)
        if holdout is not None:
            hold_pred = hold_pred + hyper.eta * tree.predict(holdout.rows)
            score = rmse(holdout.target, hold_pred)
            if score < best[0]:
                best = (score, r + 1)
            elif r + 1 - best[1] >= hyper.early_stopping:
                logger.debug("early stop at round %d (best %d)", r + 1, best[1])
                break
    if holdout is not None:
        trees = trees[: best[1]]
    return base, trees


def train(d: Dataset, hyper: Hyper | None = None, seed: int = 0, record: list | None = None) -> TreeEnsemble:
    """Fit an additive tree ensemble to ``d``.

    ``record``, when given, receives one dict per round with the gradients,
    sampled rows, and the training rows that landed in each leaf.
    """
    hyper = hyper or Hyper()
    hyper.validate()
    if len(d) < 2:
        raise ValueError("need at least 2 rows to train")
    if hyper.early_stopping is not None:
        perm = np.random.default_rng([seed, 1]).permutation(len(d))
        n_hold = max(1, len(d) // 10)
        hold, fit = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
        base, trees = _rounds(d.subset(fit), hyper, seed, record, holdout=d.subset(hold))
    else:
        base, trees = _rounds(d, hyper, seed, record)
    return TreeEnsemble(trees, base, hyper, d.feature_names, d.target_bounds)


def feature_importance(m: TreeEnsemble) -> dict[str, int]:
    """How many internal nodes split on each feature, across all trees."""
    counts = dict.fromkeys(m.feature_names, 0)
    for t in m.trees:
        for f in t.feature[t.feature != LEAF]:
            counts[m.feature_names[f]] += 1
    return counts


def ranked_features(m: TreeEnsemble) -> list[str]:
    imp = feature_importance(m)
    return sorted(imp, key=lambda name: (-imp[name], m.feature_names.index(name)))


def grid_search(d: Dataset, grid: Mapping[str, Sequence], k: int = 10, seed: int = 0,
                base: Hyper | None = None) -> tuple[Hyper, CvReport]:
    """Exhaustive CV over the Cartesian product of ``grid``.

    Parameters are iterated in name order; on equal RMSE the earlier cell wins.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("grid must be nonempty")
    base = base or Hyper()
    names = sorted(grid)
    best: tuple[Hyper, CvReport] | None = None
    for values in itertools.product(*(grid[n] for n in names)):
        hyper = replace(base, **dict(zip(names, values)))
        hyper.validate()
        label = ",".join(f"{n}={v}" for n, v in zip(names, values))
        report = kfold_cv(d, k, lambda dd, hp=hyper: train(dd, hp, seed), seed, label)
        if best is None or report.mean_rmse < best[1].mean_rmse:
            best = (hyper, report)
    return best


def threshold_curve(d: Dataset, ranked: Sequence[str], k: int = 10, seed: int = 0,
                    hyper: Hyper | None = None) -> list[tuple[int, float]]:
    """CV RMSE when training on the top-n ranked features, for n = 1..N."""
    hyper = hyper or Hyper()
    curve = []
    for n in range(1, len(ranked) + 1):
        sub = d.select_features(ranked[:n])
        rep = kfold_cv(sub, k, lambda dd: train(dd, hyper, seed), seed, f"top{n}")
        curve.append((n, rep.mean_rmse))
    return curve
