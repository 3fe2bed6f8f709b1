"""Area-level smoothed-direct model.

Logit-scale direct estimates are treated as Gaussian observations of the
latent area means with their design-based variances fixed and known:

    Z_i ~ N(theta_i, V_i),   theta_i = x_i' beta + b_i,

with b the BYM2 composite (overall SD sigma_b, spatial proportion phi).
The sampler is collapsed: the adaptive engine explores only
(log sigma_b, logit phi) against the marginal likelihood with beta and b
integrated out, and each retained hyperparameter draw is completed with
an exact draw of (beta, b) from their joint Gaussian conditional.  Areas
excluded from the likelihood (no sample, boundary estimate, no variance)
still receive theta draws through that conditional, i.e. through the
spatial prior given their neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit

from .direct import AreaDirectEstimates
from .mcmc import (ChainConfig, PhiPcPrior, PosteriorFit, SmoothingPriors,
                   gelman_rubin, pc_prior_sd_logdensity, run_chains)
from .spatial import SpatialStructure


@dataclass
class SmoothedDirectSpec:
    """Inputs for one smoothed-direct fit.

    X is the area covariate matrix including the intercept column, in
    structure node order; None means intercept only.
    """

    data: AreaDirectEstimates
    structure: SpatialStructure
    X: np.ndarray = None
    priors: SmoothingPriors = field(default_factory=SmoothingPriors)
    mcmc: ChainConfig = field(default_factory=ChainConfig)


@dataclass
class AreaSummaries:
    """Per-area posterior summaries on the probability scale."""

    area_ids: list
    median: np.ndarray
    sd: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.9


def _observed_indices(spec):
    """Structure-order indices entering the likelihood, with (Z, V)."""
    data = spec.data
    nodes = spec.structure.nodes
    pos = {a: i for i, a in enumerate(nodes)}
    idx, z, v = [], [], []
    for k, area in enumerate(data.area_ids):
        if area not in pos:
            raise ValueError(f"area {area!r} missing from the spatial graph")
        if data.status[k] != "ok":
            continue
        if not np.isfinite(data.z_var[k]):
            raise ValueError(f"non-finite logit variance for area {area!r}")
        if data.z_var[k] <= 0:
            raise ValueError(f"zero logit variance for area {area!r}; "
                             "it cannot enter the Gaussian likelihood")
        idx.append(pos[area])
        z.append(data.z[k])
        v.append(data.z_var[k])
    if not idx:
        raise ValueError("no usable direct estimates "
                         "(all areas boundary or missing)")
    if len(idx) < 3:
        raise ValueError(f"need >= 3 areas with usable estimates, "
                         f"have {len(idx)}")
    order = np.argsort(idx)
    return (np.array(idx)[order], np.array(z)[order], np.array(v)[order])


def fit_smoothed_direct(spec: SmoothedDirectSpec) -> PosteriorFit:
    """Posterior for (beta, sigma_b, phi, b) with theta and prevalence
    draws materialized for every area in the graph."""
    structure = spec.structure
    m = structure.n_areas
    X = spec.X
    if X is None:
        X = np.ones((m, 1))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] != m:
        raise ValueError(f"X must have one row per graph area ({m})")
    p = X.shape[1]
    if np.linalg.matrix_rank(X) < p:
        raise ValueError("covariate matrix is rank deficient")

    obs, Z, V = _observed_indices(spec)
    priors = spec.priors
    tau2 = priors.fixed_effect_sd ** 2
    gamma = structure.generalized_inverse
    gamma_oo = gamma[np.ix_(obs, obs)]
    X_o = X[obs]
    ZZ = np.asarray(Z)
    D = np.diag(V)
    eye_o = np.eye(len(obs))
    phi_prior = (None if priors.phi_uniform
                 else PhiPcPrior(structure, priors.phi.U, priors.phi.alpha))

    def marginal_logpost(psi):
        sigma = np.exp(psi[0])
        phi = expit(psi[1])
        one_m_phi = expit(-psi[1])
        C = (tau2 * (X_o @ X_o.T)
             + sigma ** 2 * (one_m_phi * eye_o + phi * gamma_oo) + D)
        try:
            fac = cho_factor(C, lower=True)
        except np.linalg.LinAlgError:
            return -np.inf
        logdet = 2.0 * np.sum(np.log(np.diag(fac[0])))
        quad = float(ZZ @ cho_solve(fac, ZZ))
        lp = -0.5 * (logdet + quad)
        lp += pc_prior_sd_logdensity(sigma, priors.sd.U, priors.sd.alpha)
        lp += psi[0]  # Jacobian of log sigma
        if phi_prior is not None:
            lp += phi_prior.logpdf(phi)
        lp += np.log(phi) + np.log(one_m_phi)  # Jacobian of logit phi
        return lp

    cfg = spec.mcmc
    hyper = run_chains(marginal_logpost, init=np.array([np.log(0.5), 0.0]),
                       blocks=[[0], [1]], cfg=cfg,
                       names=["log_sigma_b", "logit_phi"])

    # Complete each retained draw with (beta, b) | hypers, Z.
    seq = np.random.SeedSequence(cfg.seed)
    cond_rng = np.random.default_rng(seq.spawn(cfg.n_chains + 1)[-1])
    n_kept = hyper.chains.shape[1]
    dim = p + 2 + m
    chains = np.empty((cfg.n_chains, n_kept, dim))
    theta_draws = np.empty((cfg.n_chains, n_kept, m))
    sel = np.zeros((len(obs), m))
    sel[np.arange(len(obs)), obs] = 1.0
    A = np.hstack([X_o, sel])          # (n_obs, p + m)
    for c in range(cfg.n_chains):
        for t in range(n_kept):
            log_sigma, logit_phi = hyper.chains[c, t]
            sigma = float(np.exp(log_sigma))
            phi = float(expit(logit_phi))
            one_m_phi = float(expit(-logit_phi))
            sigma_b2 = sigma ** 2 * (one_m_phi * np.eye(m) + phi * gamma)
            sig_u = np.zeros((p + m, p + m))
            sig_u[:p, :p] = tau2 * np.eye(p)
            sig_u[p:, p:] = sigma_b2
            SA = sig_u @ A.T
            C = A @ SA + D
            fac = cho_factor(C, lower=True)
            mean_u = SA @ cho_solve(fac, ZZ)
            cov_u = sig_u - SA @ cho_solve(fac, SA.T)
            cov_u = 0.5 * (cov_u + cov_u.T)
            jitter = 1e-10 * max(1.0, np.trace(cov_u) / (p + m))
            L = np.linalg.cholesky(cov_u + jitter * np.eye(p + m))
            u = mean_u + L @ cond_rng.standard_normal(p + m)
            beta, b = u[:p], u[p:]
            theta = X @ beta + b
            chains[c, t, :p] = beta
            chains[c, t, p] = sigma
            chains[c, t, p + 1] = phi
            chains[c, t, p + 2:] = b
            theta_draws[c, t] = theta

    names = ([f"beta{j}" for j in range(p)] + ["sigma_b", "phi"]
             + [f"b[{a}]" for a in structure.nodes])
    rhat = (gelman_rubin(chains) if cfg.n_chains >= 2
            else np.full(dim, np.nan))
    prevalence = expit(theta_draws.reshape(-1, m))
    return PosteriorFit(
        names=names, chains=chains, acceptance=dict(hyper.acceptance),
        rhat=rhat, config=cfg, prevalence=prevalence,
        area_ids=list(structure.nodes),
        extras={"theta": theta_draws.reshape(-1, m),
                "observed_areas": [structure.nodes[i] for i in obs],
                "hyper_rhat": hyper.rhat})


def posterior_prevalence(fit: PosteriorFit, level=0.9) -> AreaSummaries:
    """Median, SD and central credible interval of the per-area prevalence
    draws (inclusive linear-interpolation quantiles)."""
    if fit.prevalence is None:
        raise ValueError("fit carries no prevalence draws")
    draws = fit.prevalence
    alpha = (1.0 - level) / 2.0
    qs = np.quantile(draws, [alpha, 0.5, 1.0 - alpha], axis=0,
                     method="linear")
    return AreaSummaries(area_ids=list(fit.area_ids), median=qs[1],
                         sd=draws.std(axis=0), lower=qs[0], upper=qs[2],
                         level=level)
