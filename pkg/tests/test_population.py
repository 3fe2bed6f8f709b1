import numpy as np
import pytest

from saekit.population import (Cluster, FinitePopulation, PopulationConfig,
                               SamplingFrame, finite_population_mean,
                               generate_population,
                               urban_fractions_from_frame)
from saekit.spatial import build_adjacency, grid_edges, path_edges


def make_config(**kwargs):
    m = kwargs.pop("areas", 4)
    structure = kwargs.pop("adjacency", None)
    if structure is None:
        structure = build_adjacency(path_edges(m))
    defaults = dict(areas=m, adjacency=structure, intercept=0.0, seed=123)
    defaults.update(kwargs)
    return PopulationConfig(**defaults)


def test_flat_config_gives_half_probability_everywhere():
    pop = generate_population(make_config())
    assert all(p == 0.5 for p in pop.cluster_probs.values())


def test_low_prevalence_matches_intercept():
    # ~40k individuals per area; binomial noise is well under 0.01
    cfg = make_config(intercept=float(np.log(0.06 / 0.94)),
                      clusters_per_area=100, households_low=100,
                      households_high=100)
    pop = generate_population(cfg)
    for area, m_i in pop.truth.items():
        assert abs(m_i - 0.06) < 0.01


def test_determinism_bit_identical():
    cfg = make_config(area_effect_sd=0.4, spatial_proportion=0.6,
                      cluster_effect_sd=0.2, urban_log_odds=0.5,
                      urban_cluster_fraction=0.3,
                      covariate_effects=(0.3,))
    p1 = generate_population(cfg)
    p2 = generate_population(cfg)
    assert p1.truth == p2.truth
    for cid in p1.outcomes:
        np.testing.assert_array_equal(p1.outcomes[cid], p2.outcomes[cid])


def test_finite_population_mean_examples():
    frame = SamplingFrame(
        strata=[("s1", "A", False)],
        clusters=[Cluster(0, "s1", "A", False, 4)])
    pop = FinitePopulation(frame=frame,
                           outcomes={0: np.array([1, 0, 0, 1], np.uint8)},
                           truth={"A": 0.5})
    assert finite_population_mean(pop, "A") == 0.5
    pop.outcomes[0] = np.zeros(4, np.uint8)
    assert finite_population_mean(pop, "A") == 0.0
    with pytest.raises(KeyError):
        finite_population_mean(pop, "nope")


def test_truth_matches_brute_force_resum():
    pop = generate_population(make_config(area_effect_sd=0.5,
                                          cluster_effect_sd=0.3))
    for area in pop.frame.area_ids:
        total = count = 0
        for c in pop.frame.clusters:
            if c.area_id == area:
                total += int(pop.outcomes[c.cluster_id].sum())
                count += len(pop.outcomes[c.cluster_id])
        assert pop.truth[area] == total / count
        assert pop.truth[area] == finite_population_mean(pop, area)


def test_total_positives_identity():
    pop = generate_population(make_config(area_effect_sd=0.3))
    total = sum(int(y.sum()) for y in pop.outcomes.values())
    acc = sum(pop.truth[a] * pop.area_outcome_count(a)
              for a in pop.frame.area_ids)
    assert abs(acc - total) < 1e-6


def test_urban_effect_monotone_under_common_random_numbers():
    base = dict(urban_cluster_fraction=0.4, seed=77)
    lo = generate_population(make_config(urban_log_odds=0.2, **base))
    hi = generate_population(make_config(urban_log_odds=0.6, **base))
    urban_ids = [c.cluster_id for c in lo.frame.clusters if c.urban]
    p_lo = np.array([lo.cluster_probs[c] for c in urban_ids])
    p_hi = np.array([hi.cluster_probs[c] for c in urban_ids])
    assert np.all(p_hi > p_lo)


def test_persons_per_household():
    pop = generate_population(make_config(persons_per_household=3,
                                          clusters_per_area=2,
                                          households_low=5,
                                          households_high=5))
    for c in pop.frame.clusters:
        assert len(pop.outcomes[c.cluster_id]) == 15


def test_config_validation():
    with pytest.raises(ValueError):
        make_config(spatial_proportion=1.2)
    with pytest.raises(ValueError):
        make_config(area_effect_sd=-0.1)
    with pytest.raises(ValueError):
        make_config(areas=5, adjacency=build_adjacency(path_edges(4)))
    with pytest.raises(ValueError):
        make_config(households_low=10, households_high=5)


def test_covariates_shape_checked():
    with pytest.raises(ValueError):
        generate_population(make_config(covariate_effects=(0.5, 0.2),
                                        covariates=np.zeros((4, 1))))


def test_generated_covariates_recorded():
    pop = generate_population(make_config(covariate_effects=(0.5,)))
    assert pop.covariates.shape == (4, 1)


def test_urban_fractions_from_frame():
    structure = build_adjacency(grid_edges(2, 2))
    cfg = make_config(areas=4, adjacency=structure,
                      urban_cluster_fraction=0.5, clusters_per_area=8,
                      households_low=20, households_high=20)
    pop = generate_population(cfg)
    q = urban_fractions_from_frame(pop.frame)
    for area, val in q.items():
        assert val == pytest.approx(0.5)


def test_frame_invariants():
    with pytest.raises(ValueError):
        SamplingFrame(strata=[("s1", "A", False)],
                      clusters=[Cluster(0, "s1", "A", False, 0)])
    with pytest.raises(ValueError):
        SamplingFrame(strata=[("s1", "A", False)],
                      clusters=[Cluster(0, "s1", "A", False, 3),
                                Cluster(0, "s1", "A", False, 4)])
    with pytest.raises(ValueError):
        SamplingFrame(strata=[("s1", "A", False), ("s2", "B", False)],
                      clusters=[Cluster(0, "s1", "A", False, 3)])
