import numpy as np
import pytest

from saekit.indirect import (composite_estimate, default_composite_weight,
                             pooled_weighted_slope, survey_regression_estimate,
                             synthetic_estimate)


def test_intercept_only_slope_is_pooled_mean():
    rng = np.random.default_rng(0)
    y = (rng.random(50) < 0.3).astype(float)
    d = rng.uniform(0.5, 3.0, 50)
    x = np.ones((50, 1))
    B = pooled_weighted_slope(x, y, d)
    assert B[0] == pytest.approx(np.sum(d * y) / np.sum(d))


def test_exact_linear_fit_recovered():
    rng = np.random.default_rng(1)
    x = np.column_stack([np.ones(40), rng.standard_normal(40),
                         rng.standard_normal(40)])
    beta = np.array([0.2, -0.5, 0.9])
    y = x @ beta
    d = rng.uniform(0.5, 2.0, 40)
    B = pooled_weighted_slope(x, y, d)
    np.testing.assert_allclose(B, beta, atol=1e-10)


def test_slope_matches_independent_solver():
    rng = np.random.default_rng(2)
    x = np.column_stack([np.ones(80), rng.standard_normal(80)])
    y = rng.random(80)
    d = rng.uniform(0.1, 5.0, 80)
    B = pooled_weighted_slope(x, y, d)
    # oracle: least squares on sqrt(d)-scaled rows
    sq = np.sqrt(d)
    oracle, *_ = np.linalg.lstsq(x * sq[:, None], y * sq, rcond=None)
    np.testing.assert_allclose(B, oracle, atol=1e-8)


def test_singular_cross_product_reports_condition():
    x = np.column_stack([np.ones(10), np.ones(10)])
    with pytest.raises(np.linalg.LinAlgError, match="condition"):
        pooled_weighted_slope(x, np.zeros(10), np.ones(10))


def test_synthetic_intercept_only_and_symmetry():
    B = np.array([0.31])
    est, outside = synthetic_estimate(np.ones((3, 1)), B)
    np.testing.assert_allclose(est, 0.31)
    assert not outside.any()
    est2, _ = synthetic_estimate([[1.0, 0.5], [1.0, 0.5]],
                                 np.array([0.1, 0.2]))
    assert est2[0] == est2[1]


def test_synthetic_flags_out_of_range():
    est, outside = synthetic_estimate([[1.0], [-4.0]], np.array([0.5]))
    assert est[1] == pytest.approx(-2.0)
    assert outside.tolist() == [False, True]


def test_synthetic_equals_per_unit_average():
    rng = np.random.default_rng(3)
    units = rng.standard_normal((200, 2))
    B = np.array([0.25, -0.4])
    xbar = units.mean(axis=0)
    est, _ = synthetic_estimate([xbar], B)
    assert est[0] == pytest.approx(np.mean(units @ B), abs=1e-12)


def test_survey_regression_reduces_to_ht():
    rng = np.random.default_rng(4)
    n = 30
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = (rng.random(n) < 0.4).astype(float)
    d = rng.uniform(1.0, 2.0, n)
    ht = np.sum(d * y) / np.sum(d)
    xbar_ht = (d @ x) / d.sum()
    # sample covariate mean equals population mean: correction vanishes
    est = survey_regression_estimate(y, x, d, xbar_ht, np.array([0.1, 0.3]))
    assert est == pytest.approx(ht)
    # zero slopes: correction vanishes regardless of the means
    est2 = survey_regression_estimate(y, x, d, np.array([9.0, 9.0]),
                                      np.zeros(2))
    assert est2 == pytest.approx(ht)


def test_survey_regression_two_forms_agree():
    rng = np.random.default_rng(5)
    n_pop, n_s = 500, 60
    x_pop = np.column_stack([np.ones(n_pop), rng.standard_normal(n_pop)])
    idx = rng.choice(n_pop, n_s, replace=False)
    x_s = x_pop[idx]
    y_s = (rng.random(n_s) < 0.3).astype(float)
    d = rng.uniform(0.5, 3.0, n_s)
    B = np.array([0.2, 0.15])
    xbar_pop = x_pop.mean(axis=0)
    second = survey_regression_estimate(y_s, x_s, d, xbar_pop, B)
    # first displayed form with Hajek-normalized weights
    w = d / d.sum()
    first = xbar_pop @ B + np.sum(w * (y_s - x_s @ B))
    assert second == pytest.approx(first, abs=1e-10)


def test_survey_regression_empty_area():
    with pytest.raises(ValueError):
        survey_regression_estimate(np.array([]), np.empty((0, 1)),
                                   np.array([]), np.array([1.0]),
                                   np.array([0.1]))


def test_composite_endpoints_and_midpoint():
    assert composite_estimate(0.2, 0.1, 1.0) == 0.2
    assert composite_estimate(0.2, 0.1, 0.0) == 0.1
    assert composite_estimate(0.2, 0.1, 0.5) == pytest.approx(0.15)
    with pytest.raises(ValueError):
        composite_estimate(0.2, 0.1, 1.2)


def test_composite_convexity():
    rng = np.random.default_rng(6)
    for _ in range(100):
        sr, syn = rng.random(2)
        delta = rng.random()
        c = composite_estimate(sr, syn, delta)
        assert min(sr, syn) - 1e-12 <= c <= max(sr, syn) + 1e-12


def test_default_composite_weight():
    assert default_composite_weight(50, 50) == pytest.approx(0.5)
    assert default_composite_weight(450, 50) == pytest.approx(0.9)
    with pytest.raises(ValueError):
        default_composite_weight(10, 0)


def _area_population(rng, n_areas=6, n_pop=400, effect_sd=0.35):
    """Finite populations with one covariate and genuine area effects."""
    pops = []
    for i in range(n_areas):
        x = rng.standard_normal(n_pop)
        b = effect_sd * rng.standard_normal()
        p = 1 / (1 + np.exp(-(-0.8 + 0.9 * x + b)))
        y = (rng.random(n_pop) < p).astype(float)
        pops.append((x, y))
    return pops


def test_survey_regression_bias_shrinks_with_sample_size():
    rng = np.random.default_rng(7)
    pops = _area_population(rng)
    bias_by_n = {}
    for n_i in (10, 50, 250):
        errs = []
        for rep in range(300):
            sr_errs = []
            samples = []
            for x, y in pops:
                idx = rng.choice(len(y), n_i, replace=False)
                samples.append((x[idx], y[idx]))
            xs = np.column_stack([
                np.ones(n_i * len(pops)),
                np.concatenate([s[0] for s in samples])])
            ys = np.concatenate([s[1] for s in samples])
            B = pooled_weighted_slope(xs, ys, np.ones(len(ys)))
            for (x, y), (sx, sy) in zip(pops, samples):
                xbar = np.array([1.0, x.mean()])
                xmat = np.column_stack([np.ones(n_i), sx])
                est = survey_regression_estimate(sy, xmat, np.ones(n_i),
                                                 xbar, B)
                sr_errs.append(est - y.mean())
            errs.append(np.mean(sr_errs))
        bias_by_n[n_i] = abs(np.mean(errs))
    assert bias_by_n[250] < bias_by_n[10] + 0.01
    assert bias_by_n[250] < 0.01


def test_synthetic_lower_variance_higher_bias_than_sr():
    rng = np.random.default_rng(8)
    pops = _area_population(rng, effect_sd=0.6)
    n_i = 25
    sr_all, syn_all = [], []
    for rep in range(300):
        samples = []
        for x, y in pops:
            idx = rng.choice(len(y), n_i, replace=False)
            samples.append((x[idx], y[idx]))
        xs = np.column_stack([np.ones(n_i * len(pops)),
                              np.concatenate([s[0] for s in samples])])
        ys = np.concatenate([s[1] for s in samples])
        B = pooled_weighted_slope(xs, ys, np.ones(len(ys)))
        sr_rep, syn_rep = [], []
        for (x, y), (sx, sy) in zip(pops, samples):
            xbar = np.array([1.0, x.mean()])
            xmat = np.column_stack([np.ones(n_i), sx])
            sr_rep.append(survey_regression_estimate(
                sy, xmat, np.ones(n_i), xbar, B) - y.mean())
            syn_est, _ = synthetic_estimate([xbar], B)
            syn_rep.append(syn_est[0] - y.mean())
        sr_all.append(sr_rep)
        syn_all.append(syn_rep)
    sr_all = np.array(sr_all)
    syn_all = np.array(syn_all)
    # synthetic: tighter around its own mean, but further from the truth
    assert syn_all.var(axis=0).mean() < sr_all.var(axis=0).mean()
    assert (np.abs(syn_all.mean(axis=0)).mean()
            > np.abs(sr_all.mean(axis=0)).mean())
