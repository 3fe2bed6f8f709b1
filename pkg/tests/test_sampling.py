import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saekit.population import PopulationConfig, generate_population
from saekit.sampling import (CertaintyUnitError, TwoStageDesign,
                             adaptive_cluster_sample, adjust_nonresponse,
                             draw_two_stage,
                             inclusion_probability_two_stage, poststratify,
                             pps_systematic, replicate_rngs, weight_cv_deff)
from saekit.spatial import build_adjacency, path_edges


# -- linear systematic PPS ----------------------------------------------------

def test_pps_hand_enumerated_example():
    # t = 100/2 = 50; hits at 7 and 57 fall in (0,10] and (30,60]
    assert pps_systematic([10, 20, 30, 40], 2, 7.0) == [0, 2]


def test_pps_exhaustive_selection_any_start():
    sizes = [5, 5, 5]
    for r in (0.5, 2.0, 4.9, 5.0):
        assert pps_systematic(sizes, 3, r) == [0, 1, 2]


def test_pps_unit_sizes_is_systematic_srs():
    # equal sizes: the selection walks the frame at a constant stride
    assert pps_systematic([1, 1, 1, 1], 2, 0.5) == [0, 2]
    assert pps_systematic([1, 1, 1, 1], 2, 1.0) == [0, 2]
    assert pps_systematic([1, 1, 1, 1], 2, 1.5) == [1, 3]
    assert pps_systematic([1, 1, 1, 1], 2, 2.0) == [1, 3]


def test_pps_certainty_unit_rejected():
    with pytest.raises(CertaintyUnitError):
        pps_systematic([100, 1, 1], 2, 1.0)


def test_pps_start_validation():
    with pytest.raises(ValueError):
        pps_systematic([1, 1], 2, 0.0)
    with pytest.raises(ValueError):
        pps_systematic([1, 1], 2, 1.5)
    with pytest.raises(ValueError):
        pps_systematic([2, 2], 1, 2.5, integer_start=True)
    assert pps_systematic([2, 2], 1, 3, integer_start=True) == [1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=2, max_size=30),
       st.data())
def test_pps_returns_exactly_n_and_respects_sizes(sizes, data):
    n = data.draw(st.integers(1, len(sizes)))
    t = sum(sizes) / n
    if max(sizes) > t:
        return  # certainty case covered elsewhere
    r = data.draw(st.floats(1e-6, t))
    sel = pps_systematic(sizes, n, r)
    assert len(sel) == n
    assert sorted(sel) == sel
    assert all(0 <= i < len(sizes) for i in sel)


# -- inclusion probabilities ---------------------------------------------------

def test_inclusion_probability_worked_example():
    pi1, pi2, pi = inclusion_probability_two_stage(2, 30, 100, 10)
    assert pi1 == pytest.approx(0.6)
    assert pi2 == pytest.approx(1.0 / 3.0)
    assert pi == pytest.approx(0.2)


def test_inclusion_probability_census():
    pi1, pi2, pi = inclusion_probability_two_stage(1, 50, 50, 50)
    assert (pi1, pi2, pi) == (1.0, 1.0, 1.0)


def test_inclusion_probability_self_weighting():
    # constant second-stage take: overall probability free of cluster size
    _, _, pi_a = inclusion_probability_two_stage(3, 20, 300, 5)
    _, _, pi_b = inclusion_probability_two_stage(3, 60, 300, 5)
    assert pi_a == pytest.approx(pi_b) == pytest.approx(15 / 300)


def test_inclusion_probability_certainty_error():
    with pytest.raises(CertaintyUnitError):
        inclusion_probability_two_stage(5, 80, 100, 10)


# -- two-stage draws ------------------------------------------------------------

def make_population(**kwargs):
    m = kwargs.pop("areas", 4)
    structure = build_adjacency(path_edges(m))
    defaults = dict(areas=m, adjacency=structure, intercept=-1.2,
                    seed=99, clusters_per_area=8, households_low=30,
                    households_high=30)
    defaults.update(kwargs)
    return generate_population(PopulationConfig(**defaults))


def test_self_weighting_equal_weights_within_stratum():
    pop = make_population()
    sample = draw_two_stage(pop, TwoStageDesign(n_clusters=3,
                                                n_households=10, seed=1))
    for sid in np.unique(sample.stratum_id):
        w = sample.adjusted_weight[sample.stratum_id == sid]
        assert np.all(w == w[0])


def test_census_design_recovers_truth_exactly():
    pop = make_population(clusters_per_area=4, households_low=12,
                          households_high=12)
    sample = draw_two_stage(pop, TwoStageDesign(n_clusters=4,
                                                n_households=12, seed=2))
    for area in pop.frame.area_ids:
        mask = sample.area_id == area
        est = (np.sum(sample.adjusted_weight[mask]
                      * sample.y_positive[mask])
               / np.sum(sample.adjusted_weight[mask]
                        * sample.n_tested[mask]))
        assert est == pytest.approx(pop.truth[area], abs=1e-12)


def test_weights_are_reciprocal_inclusion_probabilities():
    pop = make_population(households_low=20, households_high=45)
    sample = draw_two_stage(pop, TwoStageDesign(n_clusters=2,
                                                n_households=15, seed=3))
    np.testing.assert_allclose(
        sample.design_weight, 1.0 / (sample.pi1 * sample.pi2), rtol=1e-12)


def test_draw_deterministic_given_seed():
    pop = make_population()
    d = TwoStageDesign(n_clusters=3, n_households=10, seed=11)
    s1 = draw_two_stage(pop, d)
    s2 = draw_two_stage(pop, d)
    np.testing.assert_array_equal(s1.cluster_id, s2.cluster_id)
    np.testing.assert_array_equal(s1.y_positive, s2.y_positive)


def test_design_validation():
    pop = make_population()
    with pytest.raises(ValueError):
        draw_two_stage(pop, TwoStageDesign(n_clusters=9, n_households=10))
    with pytest.raises(ValueError):
        draw_two_stage(pop, TwoStageDesign(n_clusters=2, n_households=31))


def test_design_unbiasedness_monte_carlo():
    pop = make_population(areas=4, clusters_per_area=10)
    design = TwoStageDesign(n_clusters=3, n_households=12, seed=0)
    rngs = replicate_rngs(2024, 400)
    areas = pop.frame.area_ids
    ests = {a: [] for a in areas}
    for rng in rngs:
        s = draw_two_stage(pop, design, rng=rng)
        for a in areas:
            mask = s.area_id == a
            ests[a].append(
                np.sum(s.adjusted_weight[mask] * s.y_positive[mask])
                / np.sum(s.adjusted_weight[mask] * s.n_tested[mask]))
    for a in areas:
        e = np.asarray(ests[a])
        mc_se = e.std(ddof=1) / np.sqrt(len(e))
        assert abs(e.mean() - pop.truth[a]) <= 3.5 * mc_se


def test_nonresponse_thinning_adjusts_weights():
    pop = make_population()
    rates = {sid: 0.8 for sid, _, _ in pop.frame.strata}
    d = TwoStageDesign(n_clusters=3, n_households=10, seed=4,
                       nonresponse_rates=rates)
    s = draw_two_stage(pop, d)
    np.testing.assert_allclose(s.adjusted_weight,
                               s.design_weight / 0.8, rtol=1e-12)
    assert np.all(s.n_tested <= 10)


# -- weight adjustments ---------------------------------------------------------

def make_sample():
    pop = make_population()
    return draw_two_stage(pop, TwoStageDesign(n_clusters=3,
                                              n_households=10, seed=5))


def test_adjust_nonresponse_identity_and_scaling():
    s = make_sample()
    cells = np.array(["c1"] * len(s))
    out = adjust_nonresponse(s, cells, {"c1": 1.0})
    np.testing.assert_array_equal(out.adjusted_weight, s.design_weight)
    cells2 = np.where(np.arange(len(s)) < 5, "a", "b")
    out2 = adjust_nonresponse(s, cells2, {"a": 0.8, "b": 1.0})
    np.testing.assert_allclose(out2.adjusted_weight[:5],
                               s.design_weight[:5] * 1.25)
    np.testing.assert_allclose(out2.adjusted_weight[5:],
                               s.design_weight[5:])
    assert out2.weighted_total >= s.weighted_total


def test_adjust_nonresponse_invalid_rate():
    s = make_sample()
    cells = np.array(["c"] * len(s))
    with pytest.raises(ValueError):
        adjust_nonresponse(s, cells, {"c": 0.0})
    with pytest.raises(ValueError):
        adjust_nonresponse(s, cells, {})


def test_poststratify_identity_factor_and_exactness():
    s = make_sample()
    groups = np.asarray(s.area_id, dtype=object)
    current = {a: float(np.sum(s.adjusted_weight[groups == a]
                               * s.n_tested[groups == a]))
               for a in np.unique(groups)}
    out = poststratify(s, groups, current)
    np.testing.assert_allclose(out.adjusted_weight, s.adjusted_weight,
                               rtol=1e-12)
    targets = {a: v * 1.25 if i == 0 else v
               for i, (a, v) in enumerate(sorted(current.items()))}
    out2 = poststratify(s, groups, targets)
    for a, total in targets.items():
        got = np.sum(out2.adjusted_weight[groups == a]
                     * out2.n_tested[groups == a])
        assert abs(got - total) / total < 1e-9


def test_poststratify_group_errors():
    s = make_sample()
    groups = np.array(["g"] * len(s))
    with pytest.raises(ValueError):
        poststratify(s, groups, {"g": 100.0, "missing": 50.0})
    with pytest.raises(ValueError):
        poststratify(s, groups, {"other": 10.0})


# -- weight CV design effect -----------------------------------------------------

def test_weight_cv_examples():
    cv, deff = weight_cv_deff([2.0, 2.0, 2.0])
    assert (cv, deff) == (0.0, 1.0)
    cv, deff = weight_cv_deff([1.0, 3.0])
    assert cv == pytest.approx(0.5)
    assert deff == pytest.approx(1.25)
    with pytest.raises(ValueError):
        weight_cv_deff([1.0])
    with pytest.raises(ValueError):
        weight_cv_deff([1.0, -1.0])


def test_weight_cv_variance_inflation_monte_carlo():
    # iid outcomes: Var(weighted mean) / Var(unweighted mean) equals
    # 1 + CV^2 up to Monte Carlo noise
    rng = np.random.default_rng(7)
    n, reps, p = 60, 40_000, 0.3
    w = np.concatenate([np.full(n // 2, 0.7), np.full(n // 2, 1.3)])
    cv, deff = weight_cv_deff(w)
    y = (rng.random((reps, n)) < p)
    weighted = y @ w / w.sum()
    unweighted = y.mean(axis=1)
    ratio = weighted.var(ddof=1) / unweighted.var(ddof=1)
    assert abs(ratio - deff) / deff < 0.15


# -- adaptive cluster sampling ----------------------------------------------------

def test_adaptive_threshold_above_max_is_initial():
    counts = [3, 1, 4, 1]
    edges = [(0, 1), (1, 2), (2, 3)]
    assert adaptive_cluster_sample(counts, edges, {1, 2}, 10) == [1, 2]


def test_adaptive_low_threshold_fills_connected_graph():
    counts = [1, 1, 1, 1, 1]
    edges = [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert adaptive_cluster_sample(counts, edges, {2}, 0) == [0, 1, 2, 3, 4]


def test_adaptive_line_graph_single_expansion():
    # A pulls in B; B is below the threshold so C stays out
    counts = [5, 0, 5]
    edges = [(0, 1), (1, 2)]
    assert adaptive_cluster_sample(counts, edges, {0}, 1) == [0, 1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_adaptive_closure_idempotent(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 25))
    counts = rng.integers(0, 6, n)
    edges = [(int(i), int(j))
             for i in range(n) for j in range(i + 1, n)
             if rng.random() < 0.15]
    initial = set(int(i) for i in rng.choice(n, size=max(1, n // 4),
                                             replace=False))
    thr = int(rng.integers(0, 5))
    once = adaptive_cluster_sample(counts, edges, initial, thr)
    twice = adaptive_cluster_sample(counts, edges, set(once), thr)
    assert once == twice
    assert initial <= set(once)
