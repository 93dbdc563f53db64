import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nowcast.regression import (
    RankDeficientError,
    cross_validate,
    lmg,
    model_data,
    ols_fit,
    vif,
)
from nowcast.territory import AggregateTable, Region, RegionTable

import oracles


def random_instance(rng, n, p):
    X = rng.normal(size=(n, p)) * rng.uniform(0.1, 100, p) + rng.normal(0, 10, p)
    y = X @ rng.normal(size=p) + rng.normal(0, rng.uniform(0.5, 5), n)
    return X, y


# OLS

def test_exact_line():
    fit = ols_fit([[0.0], [1.0], [2.0]], [1.0, 3.0, 5.0])
    assert fit.coefficients[0] == pytest.approx(2.0, abs=1e-12)
    assert fit.intercept == pytest.approx(1.0, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


def test_constant_response():
    with pytest.warns(RuntimeWarning, match="zero variance"):
        fit = ols_fit(np.arange(10.0)[:, None], np.full(10, 4.0))
    assert fit.r2 == 0 and fit.coefficients[0] == 0 and fit.intercept == 4.0
    assert fit.constant_response


def test_ols_matches_normal_equations():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        p = int(rng.integers(1, 7))
        n = int(rng.integers(p + 5, 201))
        X, y = random_instance(rng, n, p)
        fit = ols_fit(X, y)
        beta, se, pv = oracles.ols_oracle(X, y)
        assert np.allclose(fit.params, beta, rtol=1e-8, atol=1e-8)
        assert np.allclose(fit.std_errors, se, rtol=1e-8, atol=1e-8)
        assert np.allclose(fit.p_values, pv, rtol=1e-8, atol=1e-8)


def test_residuals_and_r2_bounds():
    rng = np.random.default_rng(5)
    X, y = random_instance(rng, 80, 4)
    fit = ols_fit(X, y)
    assert abs(fit.residuals.sum()) < 1e-8 * max(1.0, np.abs(y).sum())
    assert 0 <= fit.r2 <= 1
    assert fit.adj_r2 == pytest.approx(1 - (1 - fit.r2) * 79 / 75)


def test_rank_deficiency_names_columns():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=30), rng.normal(size=30)
    X = np.column_stack([a, b, 2 * a - b])
    with pytest.raises(RankDeficientError) as info:
        ols_fit(X, rng.normal(size=30), ["a", "b", "c"])
    assert len(info.value.columns) == 1 and info.value.columns[0] in {"a", "b", "c"}
    with pytest.raises(RankDeficientError, match="intercept|k"):
        ols_fit(np.column_stack([a, np.full(30, 3.0)]), b, ["a", "k"])


def test_too_few_rows():
    with pytest.raises(ValueError):
        ols_fit(np.ones((3, 2)), np.ones(3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_noise_regressor_never_lowers_r2(seed):
    rng = np.random.default_rng(seed)
    X, y = random_instance(rng, 60, 3)
    base = ols_fit(X, y).r2
    more = ols_fit(np.column_stack([X, rng.normal(size=60)]), y).r2
    assert more >= base - 1e-12


# LMG

def test_lmg_single_regressor():
    rng = np.random.default_rng(1)
    x = rng.normal(size=40)
    assert lmg(x, 3 * x + rng.normal(size=40)).shares.tolist() == [1.0]


def test_lmg_orthogonal_regressors():
    # centred, exactly orthogonal columns
    x1 = np.array([1.0, -1, 1, -1, 1, -1, 1, -1])
    x2 = np.array([1.0, 1, -1, -1, 1, 1, -1, -1])
    noise = np.array([0.3, -0.1, 0.2, 0.5, -0.4, 0.1, -0.3, -0.3])
    y = 2 * x1 + 0.7 * x2 + noise
    X = np.column_stack([x1, x2])
    dec = lmg(X, y)
    marginal = np.array([oracles.r2_oracle(X, y, [0]), oracles.r2_oracle(X, y, [1])])
    assert np.allclose(dec.shares, marginal / marginal.sum(), atol=1e-6)


def test_lmg_duplicate_pair_equal_shares():
    rng = np.random.default_rng(7)
    x = rng.normal(size=400)
    X = np.column_stack([x, x + rng.normal(0, 1e-4, 400), rng.normal(size=400)])
    y = x + 0.3 * X[:, 2] + rng.normal(0, 0.5, 400)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        shares = lmg(X, y).shares
    assert abs(shares[0] - shares[1]) < 0.02


def test_lmg_matches_all_orderings():
    rng = np.random.default_rng(11)
    for _ in range(10):
        X, y = random_instance(rng, 120, 5)
        dec = lmg(X, y)
        assert dec.orderings == 120
        assert np.max(np.abs(dec.shares - oracles.lmg_oracle(X, y))) < 1e-10
        assert abs(dec.shares.sum() - 1) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0.01, 1000), min_size=4, max_size=4))
def test_lmg_scale_invariance_and_simplex(seed, scales):
    rng = np.random.default_rng(seed)
    X, y = random_instance(rng, 50, 4)
    a = lmg(X, y).shares
    b = lmg(X * np.array(scales), y).shares
    assert np.allclose(a, b, atol=1e-9)
    assert abs(a.sum() - 1) < 1e-9 and np.all(a >= 0) and np.all(a <= 1)


def test_lmg_sampled_and_limits():
    rng = np.random.default_rng(12)
    X, y = random_instance(rng, 200, 11)
    with pytest.raises(ValueError, match="sampled"):
        lmg(X, y)
    with pytest.raises(ValueError):
        lmg(X, y, sampled=True)
    X5, y5 = X[:, :5], y
    approx = lmg(X5, y5, sampled=True, orderings=3000, seed=1).shares
    assert np.allclose(approx, lmg(X5, y5).shares, atol=0.02)
    assert np.array_equal(approx, lmg(X5, y5, sampled=True, orderings=3000, seed=1).shares)


# VIF

def test_vif():
    rng = np.random.default_rng(13)
    a, b = rng.normal(size=200), rng.normal(size=200)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        v = vif(np.column_stack([a, b]), ["a", "b"])
    assert v["a"] == pytest.approx(1 / (1 - np.corrcoef(a, b)[0, 1] ** 2))
    with pytest.warns(RuntimeWarning, match="above 10"):
        v = vif(np.column_stack([a, a + rng.normal(0, 0.01, 200), b]), ["a", "a2", "b"])
    assert v["a"] > 10 and v["b"] < 10


# cross-validation

def test_cv_exact_linear_and_shape():
    rng = np.random.default_rng(14)
    X = rng.normal(size=(50, 2))
    y = 5 + X @ [1.5, -2.0]
    rep = cross_validate(X, y, repetitions=1000, seed=3)
    assert len(rep) == 1000 and len(list(rep.rows())) == 1000
    assert np.all(rep.rmse < 1e-9)


def test_cv_deterministic_and_worker_independent():
    rng = np.random.default_rng(15)
    X, y = random_instance(rng, 60, 3)
    y = y - y.min() + 1
    a = cross_validate(X, y, repetitions=50, seed=9, workers=1)
    b = cross_validate(X, y, repetitions=50, seed=9, workers=4)
    for f in ("r2", "rmse", "cv_rmse", "mean_rel_err", "rel_err_count"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert np.all(a.rmse >= 0)
    assert a.rel_err_count.sum() == 50 * 24


def test_cv_relative_error_and_zero_targets():
    rng = np.random.default_rng(16)
    X = rng.normal(size=(40, 1))
    y = 2 + X[:, 0] + rng.normal(0, 0.1, 40)
    y[0] = 0.0
    rep = cross_validate(X, y, repetitions=30, seed=1)
    assert rep.zero_targets == 1 and rep.rel_err_count[0] == 0 and np.isnan(rep.mean_rel_err[0])

    # hand check of one experiment's relative errors
    rep1 = cross_validate(X, y, repetitions=1, seed=1)
    from nowcast._rng import substream
    perm = substream(1, "cv", 0).permutation(40)
    train, test = perm[:24], perm[24:]
    fit = oracles.ols_oracle(X[train], y[train])[0]
    pred = fit[0] + X[test, 0] * fit[1]
    keep = y[test] != 0
    assert np.allclose(rep1.mean_rel_err[test[keep]], (pred[keep] - y[test][keep]) / y[test][keep], atol=1e-10)
    rmse = np.sqrt(np.mean((pred - y[test]) ** 2))
    assert rep1.rmse[0] == pytest.approx(rmse, rel=1e-10)
    assert rep1.cv_rmse[0] == pytest.approx(rmse / y[test].mean(), rel=1e-10)


def test_cv_undefined_cv_rmse():
    X = np.arange(20.0)[:, None]
    y = np.where(np.arange(20) % 2 == 0, 1.0, -1.0) * 3
    rep = cross_validate(X, y, repetitions=200, seed=4)
    assert rep.undefined_cv == int(np.isnan(rep.cv_rmse).sum())


def test_cv_too_small():
    with pytest.raises(ValueError):
        cross_validate(np.ones((6, 3)) + np.arange(18).reshape(6, 3) ** 2, np.arange(6.0), repetitions=2)


# model data join

def test_model_data_join():
    regions = RegionTable([
        Region("A", "a", 2000, 10, 1.0, 100),
        Region("B", "b", 3000, 10, float("nan"), 200),
        Region("C", "c", 4000, 20, 3.0, 300),
    ])
    agg = AggregateTable(
        np.array(["A", "B", "C", "D"], dtype=object),
        np.array([1, 2, 3, 4]),
        np.arange(16.0).reshape(4, 4),
    )
    data = model_data(agg, regions, "DI")
    assert data.region_ids.tolist() == ["A", "C"] and data.dropped == 2
    assert data.X[:, 0].tolist() == [200.0, 200.0]  # PD
    assert data.X[:, 1].tolist() == [3.0, 11.0]  # MD
    assert data.y.tolist() == [1.0, 3.0]
