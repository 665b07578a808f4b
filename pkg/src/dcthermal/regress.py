"""Baseline regressors, RMSE, and k-fold cross-validation.

Linear fits go through a centred QR solve; lasso uses cyclic coordinate
descent; the MLP has one ReLU hidden layer trained by full-batch gradient
descent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .telemetry import Dataset

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
RIDGE_FALLBACK = 1e-8
DIVERGENCE_LOSS = 1e12


class DivergenceError(RuntimeError):
    pass


def rmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    if y.size == 0:
        raise ValueError("rmse of empty vectors")
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


@dataclass(frozen=True)
class Standardizer:
    """Column z-scoring. Constant columns keep scale 1 (they centre to zero)."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
        return cls(mean, scale)

    @classmethod
    def identity(cls, n_features: int) -> "Standardizer":
        return cls(np.zeros(n_features), np.ones(n_features))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    intercept: float
    standardizer: Standardizer
    feature_names: tuple[str, ...] = ()
    target_bounds: tuple[float, float] = (-np.inf, np.inf)
    kind: str = "ols"
    rank_deficient: bool = False
    converged: bool = True

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        if X2.shape[1] != self.weights.shape[0]:
            raise ValueError(f"expected {self.weights.shape[0]} features, got {X2.shape[1]}")
        out = self.standardizer.transform(X2) @ self.weights + self.intercept
        return out[0] if single else out

    def raw_coefficients(self) -> tuple[np.ndarray, float]:
        """Weights and intercept in the original (unstandardized) units."""
        w = self.weights / self.standardizer.scale
        b = self.intercept - float(self.standardizer.mean @ w)
        return w, b


def _centred_solve(Z: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float, bool]:
    zbar = Z.mean(axis=0)
    ybar = float(y.mean())
    Zc = Z - zbar
    yc = y - ybar
    p = Z.shape[1]
    if lam > 0:
        A = np.vstack([Zc, np.sqrt(lam) * np.eye(p)])
        b = np.concatenate([yc, np.zeros(p)])
    else:
        A, b = Zc, yc
    if p == 0:
        return np.zeros(0), ybar, False
    if A.shape[0] < p:  # only reachable with lam == 0
        w, b0, _ = _centred_solve(Z, y, RIDGE_FALLBACK)
        return w, b0, True
    Q, R = np.linalg.qr(A, mode="reduced")
    diag = np.abs(np.diag(R))
    if lam == 0 and diag.min() <= RANK_TOL * max(diag.max(), 1.0):
        w, b0, _ = _centred_solve(Z, y, RIDGE_FALLBACK)
        return w, b0, True
    w = solve_triangular(R, Q.T @ b)
    return w, ybar - float(zbar @ w), False


def _linear(d: Dataset, lam: float, kind: str) -> LinearModel:
    std = Standardizer.identity(d.rows.shape[1])
    w, b, deficient = _centred_solve(d.rows, d.target, lam)
    if deficient:
        logger.debug("%s: rank-deficient design, solved with ridge %.0e", d.host_id, RIDGE_FALLBACK)
    return LinearModel(w, b, std, d.feature_names, d.target_bounds, kind, rank_deficient=deficient)


def fit_ols(d: Dataset) -> LinearModel:
    """Least squares via QR; falls back to a tiny ridge on rank deficiency."""
    return _linear(d, 0.0, "ols")


def fit_ridge(d: Dataset, lam: float = 1.0) -> LinearModel:
    """Ridge with unpenalized intercept (MAP under a fixed Gaussian prior)."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    return _linear(d, float(lam), "ridge")


def soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def fit_lasso(d: Dataset, lam: float, tol: float = 1e-7, max_sweeps: int = 10_000) -> LinearModel:
    """Cyclic coordinate descent on (1/2n)||y - b - Xw||^2 + lam*||w||_1.

    Columns are z-scored first; weights live in the standardized space.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    std = Standardizer.fit(d.rows)
    X = std.transform(d.rows)
    y = d.target
    n, p = X.shape
    ybar = float(y.mean())
    r = y - ybar
    col_sq = (X ** 2).sum(axis=0) / n
    w = np.zeros(p)
    converged = False
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            if col_sq[j] == 0:
                continue
            old = w[j]
            rho = X[:, j] @ r / n + col_sq[j] * old
            new = soft_threshold(rho, lam) / col_sq[j]
            if new != old:
                r -= X[:, j] * (new - old)
                w[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta < tol:
            converged = True
            break
    if not converged:
        logger.warning("%s: lasso did not converge in %d sweeps", d.host_id, max_sweeps)
    return LinearModel(w, ybar, std, d.feature_names, d.target_bounds, "lasso", converged=converged)


def fit_sgd(d: Dataset, lr: float = 0.01, epochs: int = 20, seed: int = 0) -> LinearModel:
    """Per-sample squared-loss SGD on standardized columns, reshuffled each epoch."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    std = Standardizer.fit(d.rows)
    X = std.transform(d.rows)
    y = d.target
    n, p = X.shape
    w = np.zeros(p)
    b = 0.0
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        for i in rng.permutation(n):
            err = X[i] @ w + b - y[i]
            w -= lr * err * X[i]
            b -= lr * err
        loss = float(np.mean((X @ w + b - y) ** 2))
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"SGD diverged at epoch {epoch} (loss={loss:.3g})")
    return LinearModel(w, b, std, d.feature_names, d.target_bounds, "sgd")


HIDDEN = 5


@dataclass(frozen=True)
class MlpModel:
    """One hidden ReLU layer of five units; target is z-scored internally."""

    hidden_weights: np.ndarray  # (5, p)
    hidden_bias: np.ndarray  # (5,)
    output_weights: np.ndarray  # (5,)
    output_bias: float
    standardizer: Standardizer
    target_mean: float = 0.0
    target_scale: float = 1.0
    feature_names: tuple[str, ...] = ()
    target_bounds: tuple[float, float] = (-np.inf, np.inf)
    kind: str = field(default="mlp", init=False)

    def params(self) -> tuple:
        return self.hidden_weights, self.hidden_bias, self.output_weights, self.output_bias

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        Z = self.standardizer.transform(np.atleast_2d(X))
        out = mlp_forward(self.params(), Z) * self.target_scale + self.target_mean
        return out[0] if single else out


def mlp_forward(params, Z) -> np.ndarray:
    W1, b1, w2, b2 = params
    return np.maximum(Z @ W1.T + b1, 0.0) @ w2 + b2


def mlp_loss_and_grad(params, Z, t):
    """Loss (1/2n)*sum((f(z)-t)^2) and its gradient w.r.t. every parameter."""
    W1, b1, w2, b2 = params
    n = Z.shape[0]
    pre = Z @ W1.T + b1
    H = np.maximum(pre, 0.0)
    err = H @ w2 + b2 - t
    loss = 0.5 * float(err @ err) / n
    g_w2 = H.T @ err / n
    g_b2 = float(err.sum()) / n
    dH = np.outer(err, w2) * (pre > 0)
    g_W1 = dH.T @ Z / n
    g_b1 = dH.sum(axis=0) / n
    return loss, (g_W1, g_b1, g_w2, g_b2)


def init_mlp_params(p: int, seed: int):
    rng = np.random.default_rng(seed)
    W1 = rng.uniform(-0.5, 0.5, size=(HIDDEN, p))
    b1 = rng.uniform(-0.5, 0.5, size=HIDDEN)
    w2 = rng.uniform(-0.5, 0.5, size=HIDDEN)
    b2 = float(rng.uniform(-0.5, 0.5))
    return W1, b1, w2, b2


def fit_mlp(d: Dataset, lr: float = 0.1, epochs: int = 2000, seed: int = 0,
            history: list | None = None) -> MlpModel:
    """Full-batch gradient descent on squared loss.

    ``history``, when given, receives the training loss before each update.
    """
    std = Standardizer.fit(d.rows)
    Z = std.transform(d.rows)
    t_mean = float(d.target.mean())
    t_scale = float(d.target.std()) or 1.0
    t = (d.target - t_mean) / t_scale
    W1, b1, w2, b2 = init_mlp_params(Z.shape[1], seed)
    for epoch in range(epochs):
        loss, (gW1, gb1, gw2, gb2) = mlp_loss_and_grad((W1, b1, w2, b2), Z, t)
        if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
            raise DivergenceError(f"MLP diverged at epoch {epoch} (loss={loss:.3g})")
        if history is not None:
            history.append(loss)
        W1 = W1 - lr * gW1
        b1 = b1 - lr * gb1
        w2 = w2 - lr * gw2
        b2 = b2 - lr * gb2
    return MlpModel(W1, b1, w2, b2, std, t_mean, t_scale, d.feature_names, d.target_bounds)


@dataclass
class CvReport:
    model_name: str
    fold_rmse: np.ndarray
    k: int

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.fold_rmse))

    def to_dict(self) -> dict:
        return {
            "model": self.model_name,
            "k": self.k,
            "fold_rmse": [float(v) for v in self.fold_rmse],
            "mean_rmse": self.mean_rmse,
        }


Trainer = Callable[[Dataset], object]


def kfold_indices(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle once, then cut into k folds whose sizes differ by at most one."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need at least k={k} rows, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def kfold_cv(d: Dataset, k: int, trainer: Trainer, seed: int = 0, name: str = "") -> CvReport:
    folds = kfold_indices(len(d), k, seed)
    scores = []
    for i, val in enumerate(folds):
        train = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        model = trainer(d.subset(train))
        scores.append(rmse(d.target[val], model.predict(d.rows[val])))
    return CvReport(name or getattr(trainer, "__name__", "model"), np.array(scores), k)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    trainer: Trainer


def compare_models(d: Dataset, specs: Sequence[ModelSpec], seed: int = 0, k: int = 10) -> list[CvReport]:
    """Cross-validate every spec on the same folds; best (lowest RMSE) first."""
    if not specs:
        raise ValueError("need at least one model spec")
    reports = [kfold_cv(d, k, s.trainer, seed, s.name) for s in specs]
    return sorted(reports, key=lambda r: (r.mean_rmse, r.model_name))


def default_specs(seed: int = 0, include_gbt: bool = True) -> list[ModelSpec]:
    """The baseline zoo with fixed default settings."""
    specs = [
        ModelSpec("LR", fit_ols),
        ModelSpec("BR", lambda d: fit_ridge(d, 1.0)),
        ModelSpec("LLR", lambda d: fit_lasso(d, 0.01)),
        ModelSpec("SGD", lambda d: fit_sgd(d, lr=0.001, epochs=20, seed=seed)),
        ModelSpec("MLP", lambda d: fit_mlp(d, seed=seed)),
    ]
    if include_gbt:
        from .gbt import Hyper, train

        specs.append(ModelSpec("GBT", lambda d: train(d, Hyper(), seed)))
    return specs
