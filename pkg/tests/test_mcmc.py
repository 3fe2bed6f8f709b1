import math

import numpy as np
import pytest
from scipy.integrate import quad

from saekit.mcmc import (AdaptiveScalar, ChainConfig, PcPrior, PhiPcPrior,
                         PosteriorNaNError, continue_chain, gelman_rubin,
                         pc_prior_phi_logdensity, pc_prior_sd_logdensity,
                         run_chains)
from saekit.spatial import build_adjacency, grid_edges


def test_chain_config_validation():
    with pytest.raises(ValueError):
        ChainConfig(n_iter=100, burn_in=100)
    with pytest.raises(ValueError):
        ChainConfig(thin=0)
    with pytest.raises(ValueError):
        ChainConfig(n_chains=0)
    cfg = ChainConfig(n_iter=1000, burn_in=100, thin=3)
    assert cfg.n_kept == 300
    assert cfg.target_for(1) == 0.44
    assert cfg.target_for(4) == 0.234


def test_retained_count_formula():
    for n_iter, burn, thin in ((1000, 100, 1), (1000, 100, 7),
                               (501, 250, 3), (100, 99, 5)):
        cfg = ChainConfig(n_iter=n_iter, burn_in=burn, thin=thin,
                          n_chains=1, seed=1)
        fit = run_chains(lambda t: -0.5 * float(t @ t), [0.0], cfg=cfg)
        assert fit.chains.shape == (1, (n_iter - burn) // thin, 1)


def test_standard_normal_target_recovered():
    cfg = ChainConfig(n_iter=50_000, burn_in=5_000, n_chains=2, seed=42)
    fit = run_chains(lambda t: -0.5 * float(t @ t), [1.0], cfg=cfg)
    draws = fit.draws[:, 0]
    assert abs(draws.mean()) < 0.02
    assert abs(draws.var() - 1.0) < 0.05
    assert fit.max_rhat < 1.05


def test_conjugate_normal_normal_gate():
    # prior theta ~ N(0, s2), likelihood Z ~ N(theta, V):
    # posterior mean s2*Z/(s2+V), variance s2*V/(s2+V)
    Z, s2, V = 10.0, 1.0, 1.0

    def logpost(t):
        th = t[0]
        return -0.5 * (Z - th) ** 2 / V - 0.5 * th ** 2 / s2

    cfg = ChainConfig(n_iter=50_000, burn_in=5_000, n_chains=2, seed=7)
    fit = run_chains(logpost, [0.0], cfg=cfg)
    draws = fit.draws[:, 0]
    exact_mean = s2 * Z / (s2 + V)
    exact_var = s2 * V / (s2 + V)
    assert abs(draws.mean() - exact_mean) / exact_mean < 0.01
    assert abs(draws.var() - exact_var) / exact_var < 0.05
    assert fit.max_rhat < 1.05


def test_same_seed_identical_runs():
    cfg = ChainConfig(n_iter=2000, burn_in=500, n_chains=2, seed=11)
    f1 = run_chains(lambda t: -0.5 * float(t @ t), [0.5, -0.5], cfg=cfg)
    f2 = run_chains(lambda t: -0.5 * float(t @ t), [0.5, -0.5], cfg=cfg)
    np.testing.assert_array_equal(f1.chains, f2.chains)


def test_block_proposals():
    cfg = ChainConfig(n_iter=5000, burn_in=1000, n_chains=2, seed=3)
    fit = run_chains(lambda t: -0.5 * float(t @ t), np.zeros(3),
                     blocks=[[0, 1], [2]], cfg=cfg)
    assert set(fit.acceptance) == {"block0", "block1"}
    assert fit.chains.shape[-1] == 3


def test_init_must_be_finite():
    with pytest.raises(ValueError, match="finite"):
        run_chains(lambda t: float("nan"), [0.0],
                   cfg=ChainConfig(n_iter=100, burn_in=10, seed=1))


def test_persistent_nan_raises_with_snapshot():
    calls = {"n": 0}

    def logpost(t):
        calls["n"] += 1
        return 0.0 if calls["n"] == 1 else float("nan")

    with pytest.raises(PosteriorNaNError) as err:
        run_chains(logpost, [0.0],
                   cfg=ChainConfig(n_iter=1000, burn_in=100, seed=1,
                                   n_chains=1))
    assert err.value.theta.shape == (1,)


def test_checkpoint_reproduces_retained_segment():
    def logpost(t):
        return -0.5 * float(t @ t)

    cfg = ChainConfig(n_iter=3000, burn_in=1000, n_chains=1, seed=23,
                      thin=2)
    fit = run_chains(logpost, [0.2, -0.1], cfg=cfg, save_checkpoints=True)
    replay = continue_chain(logpost, None, fit.checkpoints[0],
                            n_steps=cfg.n_iter - cfg.burn_in, thin=cfg.thin)
    np.testing.assert_array_equal(fit.chains[0], replay)


def test_gelman_rubin_cases():
    rng = np.random.default_rng(0)
    # zero within-sequence variance: flagged rather than a number
    frozen = np.stack([np.full((100, 1), 1.0), np.full((100, 1), 2.0)])
    assert np.isinf(gelman_rubin(frozen)[0])
    ok = rng.standard_normal((2, 4000, 1))
    assert gelman_rubin(ok)[0] < 1.05
    split = np.stack([rng.standard_normal((500, 1)) - 5,
                      rng.standard_normal((500, 1)) + 5])
    assert gelman_rubin(split)[0] > 1.2
    with pytest.raises(ValueError):
        gelman_rubin(np.zeros((1, 100, 2)))


def test_adaptive_scalar_moves_toward_target():
    st = AdaptiveScalar(target=0.44, window=10)
    for _ in range(50):
        st.record(True, True)  # always accepted: step should grow
    assert st.log_step > 0
    st2 = AdaptiveScalar(target=0.44, window=10)
    for _ in range(50):
        st2.record(False, True)
    assert st2.log_step < 0
    # frozen phase only tracks the rate
    st3 = AdaptiveScalar()
    st3.record(True, False)
    st3.record(False, False)
    assert st3.acceptance == 0.5
    assert st3.log_step == 0.0


# -- PC priors -----------------------------------------------------------------

def test_pc_sd_prior_rate_and_tail():
    rate = PcPrior(1.0, 0.01).rate
    assert rate == pytest.approx(4.60517, abs=1e-5)
    # Pr(sigma > U) = alpha exactly
    U, alpha = 1.0, 0.01
    tail = math.exp(-rate * U)
    assert tail == pytest.approx(alpha, rel=1e-12)
    val = pc_prior_sd_logdensity(0.5, 1.0, 0.01)
    assert val == pytest.approx(math.log(rate) - rate * 0.5)
    assert pc_prior_sd_logdensity(-1.0, 1.0, 0.01) == -math.inf


def test_pc_sd_prior_integrates_to_one():
    total, _ = quad(lambda s: math.exp(pc_prior_sd_logdensity(s, 1.0, 0.01)),
                    0, np.inf)
    assert abs(total - 1.0) < 1e-6


def test_pc_sd_prior_validation():
    with pytest.raises(ValueError):
        pc_prior_sd_logdensity(0.5, -1.0, 0.01)
    with pytest.raises(ValueError):
        pc_prior_sd_logdensity(0.5, 1.0, 1.5)


@pytest.fixture(scope="module")
def malawi_sized_structure():
    return build_adjacency(grid_edges(3, 9))


def test_pc_phi_prior_tail_probability(malawi_sized_structure):
    prior = PhiPcPrior(malawi_sized_structure, U=0.5, alpha=2.0 / 3.0)

    def dens(phi):
        return math.exp(prior.direct_logpdf(phi))

    mass, _ = quad(dens, 0.5, 1.0, limit=300)
    assert abs(mass - 2.0 / 3.0) < 0.01
    total, _ = quad(dens, 0.0, 1.0, limit=300)
    assert abs(total - 1.0) < 0.01


def test_pc_phi_prior_positive_finite_on_grid(malawi_sized_structure):
    prior = PhiPcPrior(malawi_sized_structure, 0.5, 2.0 / 3.0)
    for phi in np.arange(0.01, 1.0, 0.01):
        val = prior.logpdf(float(phi))
        assert np.isfinite(val)
        assert math.exp(val) > 0


def test_pc_phi_tabulation_matches_direct(malawi_sized_structure):
    prior = PhiPcPrior(malawi_sized_structure, 0.5, 2.0 / 3.0)
    rng = np.random.default_rng(9)
    for phi in rng.uniform(0.02, 0.98, 50):
        assert abs(prior.logpdf(float(phi))
                   - prior.direct_logpdf(float(phi))) < 1e-4


def test_pc_phi_functional_wrapper(malawi_sized_structure):
    v = pc_prior_phi_logdensity(0.3, malawi_sized_structure, 0.5, 2 / 3)
    assert np.isfinite(v)


def test_pc_phi_calibration_bad_inputs(malawi_sized_structure):
    with pytest.raises(ValueError):
        PhiPcPrior(malawi_sized_structure, U=1.5, alpha=0.5)
    with pytest.raises(ValueError):
        PhiPcPrior(malawi_sized_structure, U=0.5, alpha=0.0)


def test_posterior_fit_export_rows():
    cfg = ChainConfig(n_iter=60, burn_in=20, n_chains=2, seed=5)
    fit = run_chains(lambda t: -0.5 * float(t @ t), [0.0], cfg=cfg,
                     names=["x"])
    rows = list(fit.draw_rows())
    assert len(rows) == 2 * 40
    assert rows[0][2] == "x"
