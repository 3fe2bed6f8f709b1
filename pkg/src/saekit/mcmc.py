"""Adaptive Metropolis-within-Gibbs engine, convergence diagnostics, and
penalized-complexity priors.

The engine runs independent chains of blocked random-walk updates.  Step
sizes adapt toward a target acceptance rate in batches during burn-in and
are frozen afterward, so the retained draws come from a valid
(non-adaptive) Markov chain; a checkpoint taken at the freeze point can
reproduce the retained segment exactly.

The same machinery drives model-specific samplers: scalar hyperparameter
updates reuse AdaptiveScalar, and structured latent-field sweeps (see the
unit-level models) consume the identical batch adaptation rule.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

TARGET_SCALAR = 0.44
TARGET_BLOCK = 0.234


@dataclass
class ChainConfig:
    """Sampler settings shared by all model fits."""

    n_iter: int = 3000
    burn_in: int = 1000
    thin: int = 1
    n_chains: int = 2
    seed: int = 0
    target_acceptance: float = None   # default 0.44 scalar / 0.234 block
    adapt_window: int = 50

    def __post_init__(self):
        if self.burn_in >= self.n_iter:
            raise ValueError("burn_in must be smaller than n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_chains < 1:
            raise ValueError("need at least one chain")
        if self.adapt_window < 1:
            raise ValueError("adapt_window must be >= 1")

    @property
    def n_kept(self):
        return (self.n_iter - self.burn_in) // self.thin

    def target_for(self, block_size):
        if self.target_acceptance is not None:
            return self.target_acceptance
        return TARGET_SCALAR if block_size == 1 else TARGET_BLOCK


def chain_rngs(seed, n_chains):
    """Independent generators for each chain, split from a root seed."""
    seq = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in seq.spawn(n_chains)]


class AdaptiveScalar:
    """Batch step-size adaptation toward a target acceptance rate.

    Every `window` recorded proposals during adaptation, the log step
    moves by min(0.25, 1/sqrt(batch)) up or down depending on the batch
    acceptance rate.  Once adaptation ends the step is frozen and
    acceptance is tracked for reporting.
    """

    __slots__ = ("target", "window", "log_step", "_count", "_accepts",
                 "_batch", "post_count", "post_accepts")

    def __init__(self, target=TARGET_SCALAR, window=50, log_step=0.0):
        self.target = target
        self.window = window
        self.log_step = log_step
        self._count = 0
        self._accepts = 0
        self._batch = 0
        self.post_count = 0
        self.post_accepts = 0

    @property
    def step(self):
        return math.exp(self.log_step)

    def record(self, accepted, adapting):
        if adapting:
            self._count += 1
            self._accepts += accepted
            if self._count == self.window:
                self._batch += 1
                rate = self._accepts / self._count
                delta = min(0.25, 1.0 / math.sqrt(self._batch))
                self.log_step += delta if rate > self.target else -delta
                self._count = 0
                self._accepts = 0
        else:
            self.post_count += 1
            self.post_accepts += accepted

    @property
    def acceptance(self):
        if self.post_count == 0:
            return float("nan")
        return self.post_accepts / self.post_count


@dataclass
class ChainCheckpoint:
    """State at the end of burn-in, sufficient to replay retention."""

    theta: np.ndarray
    logp: float
    log_steps: np.ndarray
    rng_state: dict


@dataclass
class PosteriorFit:
    """Retained draws with diagnostics.

    chains has shape (n_chains, n_kept, n_params); prevalence, when a
    model fills it, has shape (n_chains * n_kept, n_areas) on the
    probability scale.
    """

    names: list
    chains: np.ndarray
    acceptance: dict
    rhat: np.ndarray
    config: ChainConfig
    prevalence: np.ndarray = None
    area_ids: list = None
    checkpoints: list = None
    extras: dict = field(default_factory=dict)

    @property
    def draws(self):
        """All chains stacked: (n_chains * n_kept, n_params)."""
        return self.chains.reshape(-1, self.chains.shape[-1])

    def param(self, name):
        return self.draws[:, self.names.index(name)]

    @property
    def max_rhat(self):
        finite = self.rhat[np.isfinite(self.rhat)]
        return float(finite.max()) if finite.size else float("nan")

    def draw_rows(self):
        """Yield (iteration, chain, parameter, value) for CSV export."""
        for c in range(self.chains.shape[0]):
            for it in range(self.chains.shape[1]):
                for j, name in enumerate(self.names):
                    yield it, c, name, self.chains[c, it, j]


class PosteriorNaNError(RuntimeError):
    """Log posterior evaluated to NaN repeatedly; carries a snapshot."""

    def __init__(self, message, theta):
        super().__init__(message)
        self.theta = np.array(theta)


_MAX_CONSECUTIVE_NAN = 100


def _sweep(log_posterior, theta, logp, blocks, steppers, rng, adapting,
           nan_streak):
    """One full pass over all blocks; returns the updated log posterior."""
    for j, idx in enumerate(blocks):
        st = steppers[j]
        z = rng.standard_normal(len(idx))
        old = theta[idx].copy()
        theta[idx] = old + st.step * z
        lp_new = log_posterior(theta)
        if math.isnan(lp_new):
            nan_streak[0] += 1
            if nan_streak[0] > _MAX_CONSECUTIVE_NAN:
                raise PosteriorNaNError(
                    f"log posterior NaN for {nan_streak[0]} consecutive "
                    "proposals", theta)
            lp_new = -math.inf
        else:
            nan_streak[0] = 0
        if lp_new >= logp:
            accept = True
        else:
            accept = rng.random() < math.exp(lp_new - logp)
        if accept:
            logp = lp_new
        else:
            theta[idx] = old
        st.record(accept, adapting)
    return logp


def _resolve_blocks(blocks, dim):
    if blocks is None:
        return [np.array([i]) for i in range(dim)]
    out = []
    for b in blocks:
        idx = np.atleast_1d(np.asarray(b, dtype=int))
        if np.any(idx < 0) or np.any(idx >= dim):
            raise ValueError(f"block {b} out of range for dim {dim}")
        out.append(idx)
    return out


def run_chains(log_posterior, init, blocks=None, cfg: ChainConfig = None,
               names=None, save_checkpoints=False) -> PosteriorFit:
    """Sample a log posterior with adaptive blocked random-walk proposals.

    blocks groups parameter indices that are proposed jointly (default:
    one scalar block per parameter).  Adaptation runs during burn-in only;
    two runs with the same config produce identical draws.
    """
    if cfg is None:
        cfg = ChainConfig()
    init = np.asarray(init, dtype=float).ravel()
    dim = init.size
    blocks = _resolve_blocks(blocks, dim)
    if names is None:
        names = [f"p{i}" for i in range(dim)]
    if len(names) != dim:
        raise ValueError("names must match parameter dimension")

    lp0 = log_posterior(init.copy())
    if not np.isfinite(lp0):
        raise ValueError(f"log posterior not finite at init ({lp0})")

    all_chains = np.empty((cfg.n_chains, cfg.n_kept, dim))
    checkpoints = []
    block_acc = np.zeros(len(blocks))
    for c, rng in enumerate(chain_rngs(cfg.seed, cfg.n_chains)):
        theta = init.copy()
        logp = lp0
        steppers = [AdaptiveScalar(cfg.target_for(len(idx)),
                                   cfg.adapt_window) for idx in blocks]
        nan_streak = [0]
        kept = 0
        for it in range(cfg.n_iter):
            adapting = it < cfg.burn_in
            if it == cfg.burn_in and save_checkpoints:
                checkpoints.append(ChainCheckpoint(
                    theta=theta.copy(), logp=logp,
                    log_steps=np.array([s.log_step for s in steppers]),
                    rng_state=copy.deepcopy(rng.bit_generator.state)))
            logp = _sweep(log_posterior, theta, logp, blocks, steppers,
                          rng, adapting, nan_streak)
            if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0:
                all_chains[c, kept] = theta
                kept += 1
        block_acc += np.array([s.acceptance for s in steppers])

    block_acc /= cfg.n_chains
    acceptance = {f"block{j}": block_acc[j] for j in range(len(blocks))}
    rhat = (gelman_rubin(all_chains) if cfg.n_chains >= 2
            else np.full(dim, np.nan))
    return PosteriorFit(names=list(names), chains=all_chains,
                        acceptance=acceptance, rhat=rhat, config=cfg,
                        checkpoints=checkpoints or None)


def continue_chain(log_posterior, blocks, checkpoint: ChainCheckpoint,
                   n_steps, thin=1):
    """Replay/extend the frozen (post-burn-in) phase from a checkpoint.

    With the original post-burn-in length and thinning this reproduces the
    retained draws of the original run exactly.
    """
    theta = checkpoint.theta.copy()
    blocks = _resolve_blocks(blocks, theta.size)
    rng = np.random.default_rng()
    rng.bit_generator.state = copy.deepcopy(checkpoint.rng_state)
    steppers = []
    for j, idx in enumerate(blocks):
        s = AdaptiveScalar(log_step=float(checkpoint.log_steps[j]))
        steppers.append(s)
    logp = checkpoint.logp
    nan_streak = [0]
    kept = []
    for it in range(n_steps):
        logp = _sweep(log_posterior, theta, logp, blocks, steppers, rng,
                      False, nan_streak)
        if (it + 1) % thin == 0:
            kept.append(theta.copy())
    return np.array(kept)


def gelman_rubin(chains):
    """Split-Rhat per parameter.

    chains: array (n_chains, n_draws, n_params) with n_chains >= 2.  Each
    chain is split in half; Rhat = sqrt(((L-1)/L * W + B/L) / W).  A zero
    within-sequence variance (e.g. identical chains) yields inf as a
    degenerate-case flag.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim == 2:
        chains = chains[:, :, None]
    n_chains, n_draws, dim = chains.shape
    if n_chains < 2:
        raise ValueError("split-Rhat needs at least two chains")
    L = n_draws // 2
    if L < 2:
        raise ValueError("chains too short to split")
    halves = np.concatenate(
        [chains[:, :L, :], chains[:, n_draws - L:, :]], axis=0)
    means = halves.mean(axis=1)
    variances = halves.var(axis=1, ddof=1)
    W = variances.mean(axis=0)
    B_over_L = means.var(axis=0, ddof=1)
    out = np.empty(dim)
    for k in range(dim):
        if W[k] <= 0:
            out[k] = np.inf if B_over_L[k] > 0 else np.nan
        else:
            var_plus = (L - 1) / L * W[k] + B_over_L[k]
            out[k] = math.sqrt(var_plus / W[k])
    return out


# ---------------------------------------------------------------------------
# Penalized-complexity priors

@dataclass(frozen=True)
class PcPrior:
    """Tail statement Pr(theta > U) = alpha."""

    U: float
    alpha: float

    def __post_init__(self):
        if self.U <= 0:
            raise ValueError("U must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def rate(self):
        return -math.log(self.alpha) / self.U


@dataclass
class SmoothingPriors:
    """Hyperprior bundle for the smoothing models."""

    sd: PcPrior = PcPrior(1.0, 0.01)
    phi: PcPrior = PcPrior(0.5, 2.0 / 3.0)
    phi_uniform: bool = False
    fixed_effect_sd: float = 31.6
    overdispersion: PcPrior = PcPrior(0.5, 0.01)  # tail on sqrt(lambda)
    overdispersion_uniform: bool = False


def pc_prior_sd_logdensity(sigma, U, alpha):
    """Exponential PC prior on a standard deviation.

    Rate lambda = -ln(alpha)/U gives Pr(sigma > U) = alpha exactly.
    Returns -inf for sigma <= 0.
    """
    rate = PcPrior(U, alpha).rate
    if sigma <= 0:
        return -math.inf
    return math.log(rate) - rate * sigma


class PhiPcPrior:
    """PC prior for the BYM2 spatial proportion, computed numerically.

    The flexible model N(0, (1-phi) I + phi G) (G the scaled structure's
    generalized inverse) is measured against the base phi = 0 through the
    distance d(phi) = sqrt(2 KLD(phi)), with the comparison restricted to
    the sum-to-zero subspace (the structure's null direction is excluded,
    keeping d(1) finite).  The prior is the exponential family on
    d in (0, d(1)), truncated and normalized, with the rate calibrated by
    one-dimensional root finding so that Pr(phi > U) = alpha holds
    exactly; strong statements (large alpha at high U) can calibrate to a
    negative rate, i.e. a density increasing in d.  The log density is
    tabulated once per graph and linearly interpolated; direct evaluation
    is kept for verification.
    """

    def __init__(self, structure, U=0.5, alpha=2.0 / 3.0, grid_size=4097):
        if not 0.0 < U < 1.0:
            raise ValueError("U must lie in (0, 1)")
        if not 0.0 < alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        _, g = structure.gamma_eigen
        g = np.asarray(g, dtype=float)
        tol = g.max() * 1e-12
        self._g = g[g > tol]
        self._trace_term = float(self._g.sum() - self._g.size)
        self.U = U
        self.alpha = alpha
        self.d_max = self._dist(1.0)
        d_u = self._dist(U)
        if not np.isfinite(d_u) or d_u <= 0 or d_u >= self.d_max:
            raise ValueError(f"distance at U={U} not usable: {d_u}")

        def tail(theta):
            # Pr(d > d(U)) under the truncated exponential, stable for
            # either sign of theta.
            if abs(theta) < 1e-12:
                return 1.0 - d_u / self.d_max
            if theta > 0:
                a = -math.expm1(-theta * d_u)      # 1 - exp(-theta d_u)
                b = -math.expm1(-theta * self.d_max)
                return 1.0 - a / b
            num = (math.exp(theta * (self.d_max - d_u))
                   * -math.expm1(theta * d_u))
            den = -math.expm1(theta * self.d_max)
            return 1.0 - num / den

        lo, hi = -1.0 / self.d_max, 1.0 / self.d_max
        while tail(hi) > alpha:
            hi *= 2.0
            if hi > 1e8:
                raise ValueError("PC prior calibration failed (rate -> inf)")
        while tail(lo) < alpha:
            lo *= 2.0
            if lo < -1e8:
                raise ValueError("PC prior calibration failed (rate -> -inf)")
        try:
            self.rate = brentq(lambda r: tail(r) - alpha, lo, hi)
        except ValueError as exc:
            raise ValueError(
                f"PC prior calibration failed for U={U}, alpha={alpha}: "
                f"{exc}")
        # log of the truncated-exponential normalizer theta/(1-e^{-theta*dmax})
        if abs(self.rate) < 1e-12:
            self._log_norm = -math.log(self.d_max)
        elif self.rate > 0:
            self._log_norm = (math.log(self.rate)
                              - math.log(-math.expm1(-self.rate
                                                     * self.d_max)))
        else:
            # |r| / (e^{|r| dmax} - 1)
            r = -self.rate
            self._log_norm = (math.log(r) - r * self.d_max
                              - math.log1p(-math.exp(-r * self.d_max)))
        eps = 1e-7
        self._grid = np.linspace(eps, 1.0 - eps, grid_size)
        self._grid_logpdf = np.array(
            [self._direct_logpdf(p) for p in self._grid])

    def _kld(self, phi):
        return 0.5 * (phi * self._trace_term
                      - np.sum(np.log1p(phi * (self._g - 1.0))))

    def _dist(self, phi):
        return math.sqrt(max(2.0 * self._kld(phi), 0.0))

    def _ddist(self, phi):
        dkld = 0.5 * (self._trace_term
                      - np.sum((self._g - 1.0)
                               / (1.0 + phi * (self._g - 1.0))))
        d = self._dist(phi)
        if d == 0.0:
            # limit sqrt(K''(0)) at the base model
            k2 = 0.5 * np.sum((self._g - 1.0) ** 2)
            return math.sqrt(k2)
        return dkld / d

    def _direct_logpdf(self, phi):
        if not 0.0 < phi < 1.0:
            return -math.inf
        d = self._dist(phi)
        dd = self._ddist(phi)
        if dd <= 0:
            return -math.inf
        return self._log_norm - self.rate * d + math.log(dd)

    def logpdf(self, phi):
        """Tabulated (interpolated) log density."""
        if not 0.0 < phi < 1.0:
            return -math.inf
        return float(np.interp(phi, self._grid, self._grid_logpdf))

    def direct_logpdf(self, phi):
        """Exact evaluation, independent of the tabulation."""
        return self._direct_logpdf(phi)


def pc_prior_phi_logdensity(phi, structure, U, alpha):
    """PC prior log density for the spatial proportion (tabulated)."""
    return PhiPcPrior(structure, U, alpha).logpdf(phi)
