import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcthermal.regress import (
    DivergenceError, ModelSpec, Standardizer, compare_models, fit_lasso, fit_mlp, fit_ols, fit_ridge, fit_sgd,
    init_mlp_params, kfold_cv, kfold_indices, mlp_forward, mlp_loss_and_grad, rmse, soft_threshold,
)
from dcthermal.telemetry import Dataset


def ds(X, y, names=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    names = names or tuple(f"x{i}" for i in range(X.shape[1]))
    return Dataset("h", X, np.asarray(y, dtype=float), names)


# ---------------------------------------------------------------- rmse

def test_rmse_examples():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([1.0], [0.0]) == 1.0
    assert rmse([3.0, 0.0], [0.0, 4.0]) == pytest.approx(np.sqrt(12.5), abs=1e-15)
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        rmse([], [])


@given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=20),
       st.floats(-1e3, 1e3))
def test_rmse_symmetric_and_shift_invariant(pairs, c):
    y, yh = np.array(pairs).T
    assert rmse(y, yh) == rmse(yh, y)
    assert rmse(y + c, yh + c) == pytest.approx(rmse(y, yh), abs=1e-9)


# ---------------------------------------------------------------- linear

def test_ols_exact_recovery():
    x = np.arange(10.0)
    m = fit_ols(ds(x, 2 * x))
    assert m.weights[0] == pytest.approx(2.0, abs=1e-9) and m.intercept == pytest.approx(0.0, abs=1e-9)
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 2))
    m = fit_ols(ds(X, 3 * X[:, 0] - X[:, 1] + 5))
    np.testing.assert_allclose(m.weights, [3.0, -1.0], atol=1e-8)
    assert m.intercept == pytest.approx(5.0, abs=1e-8)
    m = fit_ols(ds(X, np.full(30, 7.0)))
    np.testing.assert_allclose(m.weights, 0.0, atol=1e-12)
    assert m.intercept == pytest.approx(7.0)


def test_ols_residuals_orthogonal():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(50, 4))
    y = X @ [1.0, -2.0, 0.5, 3.0] + rng.normal(size=50)
    m = fit_ols(ds(X, y))
    r = y - m.predict(X)
    Z = Standardizer.fit(X).transform(X)
    assert abs(r.sum()) < 1e-6
    assert np.all(np.abs(Z.T @ r) < 1e-6)


def test_ols_rank_deficient_falls_back_to_ridge():
    X = np.column_stack([np.arange(8.0), 2 * np.arange(8.0)])
    m = fit_ols(ds(X, np.arange(8.0)))
    assert m.rank_deficient and np.all(np.isfinite(m.weights))
    m = fit_ols(ds(np.ones((1, 3)), [1.0]))
    assert m.rank_deficient


def test_ridge_limits_and_two_point_closed_form():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(20, 3))
    y = X @ [1.0, 2.0, 3.0] + 4
    np.testing.assert_allclose(fit_ridge(ds(X, y), 0.0).weights, fit_ols(ds(X, y)).weights, atol=1e-10)
    big = fit_ridge(ds(X, y), 1e12)
    assert np.all(np.abs(big.weights) < 1e-9) and big.intercept == pytest.approx(y.mean(), abs=1e-6)
    # x = (0, 2), y = (0, 4), lambda = 1: centred x = (-1, 1), y = (-2, 2)
    # w = sum(xc*yc) / (sum(xc^2) + lambda) = 4 / 3, b = 2 - w
    m = fit_ridge(ds([0.0, 2.0], [0.0, 4.0]), 1.0)
    assert m.weights[0] == pytest.approx(4 / 3, abs=1e-12)
    assert m.intercept == pytest.approx(2 - 4 / 3, abs=1e-12)


def test_lasso_examples():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 3))
    y = X @ [2.0, -1.0, 0.0] + 1 + 0.1 * rng.normal(size=40)
    ols = fit_ols(ds(X, y))
    l0 = fit_lasso(ds(X, y), 0.0)
    np.testing.assert_allclose(l0.predict(X), ols.predict(X), atol=1e-5)
    assert np.all(fit_lasso(ds(X, y), 1e3).weights == 0.0)
    # univariate closed form in standardized space
    x = X[:, 0]
    z = (x - x.mean()) / x.std()
    lam = 0.3
    expect = soft_threshold(z @ (y - y.mean()) / 40, lam) / (z @ z / 40)
    assert fit_lasso(ds(x, y), lam).weights[0] == pytest.approx(expect, abs=1e-9)


def test_lasso_l1_norm_shrinks_with_lambda():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 5))
    y = X @ [3.0, -2.0, 1.0, 0.5, 0.0] + rng.normal(size=60)
    norms = [np.abs(fit_lasso(ds(X, y), lam).weights).sum() for lam in (0.0, 0.05, 0.2, 0.5, 1.0, 3.0)]
    assert all(a >= b - 1e-9 for a, b in zip(norms, norms[1:]))


def test_sgd_examples():
    x = np.linspace(-1, 1, 50)
    d = ds(x, 2 * x)
    m0 = fit_sgd(d, epochs=0)
    assert np.all(m0.weights == 0.0) and m0.intercept == 0.0
    a, b = fit_sgd(d, epochs=5, seed=7), fit_sgd(d, epochs=5, seed=7)
    assert np.array_equal(a.weights, b.weights) and a.intercept == b.intercept
    w, _ = fit_sgd(d, lr=0.01, epochs=200).raw_coefficients()
    assert abs(w[0] - 2.0) < 0.05
    with pytest.raises(DivergenceError):
        fit_sgd(ds(x * 1e8, x * 1e8), lr=50.0, epochs=5)


# ---------------------------------------------------------------- MLP

def test_mlp_zero_epochs_is_init_forward():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(8, 3))
    y = rng.normal(size=8)
    m = fit_mlp(ds(X, y), epochs=0, seed=11)
    Z = Standardizer.fit(X).transform(X)
    expect = mlp_forward(init_mlp_params(3, 11), Z) * y.std() + y.mean()
    np.testing.assert_array_equal(m.predict(X), expect)
    assert m.hidden_weights.shape == (5, 3)


def test_mlp_loss_decreases_on_interaction():
    rng = np.random.default_rng(6)
    X = rng.uniform(-1, 1, size=(64, 2))
    y = X[:, 0] * X[:, 1]
    hist = []
    fit_mlp(ds(X, y), lr=0.05, epochs=50, seed=0, history=hist)
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_mlp_gradient_matches_finite_differences_small():
    rng = np.random.default_rng(8)
    Z = rng.normal(size=(3, 2))
    t = rng.normal(size=3)
    params = init_mlp_params(2, 3)
    _, grads = mlp_loss_and_grad(params, Z, t)
    W1, b1, w2, b2 = params
    eps = 1e-5
    fd = np.empty_like(W1)
    for idx in np.ndindex(W1.shape):
        up, dn = W1.copy(), W1.copy()
        up[idx] += eps
        dn[idx] -= eps
        fd[idx] = (mlp_loss_and_grad((up, b1, w2, b2), Z, t)[0] - mlp_loss_and_grad((dn, b1, w2, b2), Z, t)[0]) / (2 * eps)
    np.testing.assert_allclose(grads[0], fd, rtol=1e-4, atol=1e-10)


# ---------------------------------------------------------------- CV

def test_kfold_fold_sizes_and_partition():
    folds = kfold_indices(13, 10, 0)
    assert sorted(len(f) for f in folds) == [1] * 7 + [2] * 3
    allrows = np.concatenate(folds)
    assert sorted(allrows.tolist()) == list(range(13))
    assert [len(f) for f in kfold_indices(6, 6, 1)] == [1] * 6
    with pytest.raises(ValueError):
        kfold_indices(3, 4, 0)


def test_kfold_constant_target_zero_rmse():
    rng = np.random.default_rng(9)
    d = ds(rng.normal(size=(20, 2)), np.full(20, 3.0))
    rep = kfold_cv(d, 5, fit_ols)
    np.testing.assert_allclose(rep.fold_rmse, 0.0, atol=1e-12)
    assert rep.mean_rmse == pytest.approx(np.mean(rep.fold_rmse))


def test_compare_models_ordering_and_ties():
    rng = np.random.default_rng(10)
    X = rng.uniform(-1, 1, size=(200, 2))
    d = ds(X, X[:, 0] * X[:, 1])
    from dcthermal.gbt import Hyper, train

    reps = compare_models(d, [ModelSpec("LR", fit_ols), ModelSpec("BR", lambda dd: fit_ridge(dd, 1.0)),
                              ModelSpec("GBT", lambda dd: train(dd, Hyper(), 0))], k=5)
    assert reps[0].model_name == "GBT"
    twins = compare_models(d, [ModelSpec("b", fit_ols), ModelSpec("a", fit_ols)], k=5)
    assert [r.model_name for r in twins] == ["a", "b"] and twins[0].mean_rmse == twins[1].mean_rmse
    assert len(compare_models(d, [ModelSpec("LR", fit_ols)], k=5)) == 1
