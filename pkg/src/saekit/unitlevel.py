"""Unit-level models on cluster count data.

Two latent-field models share one Metropolis-within-Gibbs sweep (the
compiled kernel, or its pure-Python twin):

* a beta-binomial cluster model with BYM2 area effects, an urban/rural
  stratum effect, optional area covariates, and stratum-weighted
  aggregation to area prevalence;
* a dense Matern Gaussian-process model on cluster coordinates with a
  nugget, binomial likelihood, and continuous (pixel-weighted)
  aggregation with the nugget excluded.

Scalar hyperparameters are updated in Python between kernel sweeps using
the same adaptation rule as the generic engine; an extra translation move
(intercept up, field down) decorrelates the intercept from the field
mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit, gammaln, logit

from . import _kernels as kernels
from .mcmc import (AdaptiveScalar, ChainConfig, PcPrior, PhiPcPrior,
                   PosteriorFit, SmoothingPriors, chain_rngs, gelman_rubin,
                   pc_prior_sd_logdensity)
from .population import urban_fractions_from_frame
from .sampling import SurveySample
from .spatial import (MaternParams, SpatialStructure,
                      matern_covariance_matrix, matern_cross_covariance)


@dataclass
class ClusterData:
    """Cluster-level counts: tested persons and positives per cluster,
    with area membership, urban flag, and optional coordinates."""

    cluster_id: np.ndarray
    area_id: np.ndarray
    urban: np.ndarray
    n_tested: np.ndarray
    y_positive: np.ndarray
    lon: np.ndarray = None
    lat: np.ndarray = None

    def __post_init__(self):
        n = len(self.cluster_id)
        if self.lon is None:
            self.lon = np.full(n, np.nan)
        if self.lat is None:
            self.lat = np.full(n, np.nan)
        for name in ("area_id", "urban", "n_tested", "y_positive",
                     "lon", "lat"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        if np.any(self.y_positive > self.n_tested):
            raise ValueError("y_positive cannot exceed n_tested")
        if np.any(self.n_tested < 0):
            raise ValueError("n_tested must be nonnegative")

    def __len__(self):
        return len(self.cluster_id)

    @classmethod
    def from_sample(cls, sample: SurveySample):
        return cls(cluster_id=sample.cluster_id.copy(),
                   area_id=sample.area_id.copy(),
                   urban=sample.urban.copy(),
                   n_tested=sample.n_tested.copy(),
                   y_positive=sample.y_positive.copy())

    def has_coordinates(self):
        return bool(np.all(np.isfinite(self.lon))
                    and np.all(np.isfinite(self.lat)))


@dataclass
class UrbanFractions:
    """Per-area share q_i of the relevant population that is urban."""

    q: dict

    def __post_init__(self):
        for a, v in self.q.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"q for area {a!r} must lie in [0, 1]")

    @classmethod
    def from_frame(cls, frame):
        return cls(urban_fractions_from_frame(frame))

    def vector(self, area_ids):
        out = np.empty(len(area_ids))
        for i, a in enumerate(area_ids):
            if a not in self.q:
                raise ValueError(f"no urban fraction for area {a!r}")
            out[i] = self.q[a]
        return out


@dataclass
class PixelGrid:
    """Aggregation points with population weights and an urban flag."""

    area_id: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    weight: np.ndarray
    urban: np.ndarray

    def __post_init__(self):
        n = len(self.area_id)
        for name in ("lon", "lat", "weight", "urban"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} has wrong length")
        if np.any(self.weight < 0):
            raise ValueError("pixel weights must be nonnegative")

    def normalized(self):
        """Weights scaled to sum to one within each area."""
        w = np.asarray(self.weight, dtype=float).copy()
        for a in np.unique(self.area_id):
            mask = self.area_id == a
            tot = w[mask].sum()
            if tot <= 0:
                raise ValueError(f"area {a!r} has zero total pixel weight")
            w[mask] /= tot
        return PixelGrid(area_id=self.area_id, lon=self.lon, lat=self.lat,
                         weight=w, urban=self.urban)


def betabinomial_logpmf(y, n, p, lam):
    """Beta-binomial log mass with mean p and overdispersion lam.

    Shapes are a = p(1-lam)/lam and b = (1-p)(1-lam)/lam, which give
    Var(Y) = n p (1-p) (1 + (n-1) lam); lam = 0 evaluates the binomial log
    pmf (and tiny lam approaches it continuously).  Uses rising-product
    sums of logs, so extreme shape values stay accurate.
    """
    y, n = int(y), int(n)
    if not 0 <= y <= n:
        raise ValueError(f"need 0 <= y <= n, got y={y}, n={n}")
    if not 0.0 < p < 1.0:
        raise ValueError(f"p={p} outside (0, 1)")
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"lam={lam} outside [0, 1)")
    lchoose = float(gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1))
    if lam == 0.0:
        return lchoose + y * math.log(p) + (n - y) * math.log1p(-p)
    f = (1.0 - lam) / lam
    a = p * f
    b = (1.0 - p) * f
    s = lchoose
    for j in range(y):
        s += math.log(a + j)
    for j in range(n - y):
        s += math.log(b + j)
    ab = a + b
    for j in range(n):
        s -= math.log(ab + j)
    return s


def _lchoose(y, n):
    return np.asarray(gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1),
                      dtype=float)


def _sqrt_pc_logprior(lam, prior: PcPrior, uniform):
    """Prior for the overdispersion: exponential tail on sqrt(lam) (or
    uniform on (0,1) as the sensitivity fallback)."""
    if not 0.0 < lam < 1.0:
        return -math.inf
    if uniform:
        return 0.0
    rate = prior.rate
    s = math.sqrt(lam)
    return math.log(rate) - rate * s - math.log(2.0 * s)


class _Bym2Prior:
    """BYM2 precision bookkeeping for the latent area field."""

    def __init__(self, structure, sigma, phi, one_m_phi):
        self.V, self.g = structure.gamma_eigen
        self.update(sigma, phi, one_m_phi)

    def update(self, sigma, phi, one_m_phi):
        self.sigma = sigma
        self.phi = phi
        self.var = sigma ** 2 * (one_m_phi + phi * self.g)
        self.P = (self.V / self.var) @ self.V.T
        self.P1 = self.P.sum(axis=1)
        self.P1sum = float(self.P1.sum())

    def var_for(self, sigma, phi, one_m_phi):
        return sigma ** 2 * (one_m_phi + phi * self.g)


def _scalar_met(rng, stepper, adapting, logr_fn):
    """Generic scalar Metropolis step; returns (accepted, delta)."""
    delta = stepper.step * rng.standard_normal()
    logr = logr_fn(delta)
    if logr >= 0.0:
        ok = True
    else:
        ok = rng.random() < math.exp(logr)
    stepper.record(ok, adapting)
    return ok, delta


def fit_betabinomial(data: ClusterData, structure: SpatialStructure,
                     q: UrbanFractions = None, X=None, urban_effect=True,
                     priors: SmoothingPriors = None,
                     mcmc: ChainConfig = None,
                     _special_moves=True) -> PosteriorFit:
    """Beta-binomial cluster model with BYM2 area effects.

    The three standard configurations are (1) urban_effect=False, X=None;
    (2) urban_effect=True, X=None; (3) urban_effect=True with an area
    covariate matrix X (no intercept column; the intercept is explicit).
    When q is given, stratum-aggregated prevalence draws are attached to
    the returned fit.
    """
    priors = priors or SmoothingPriors()
    cfg = mcmc or ChainConfig()
    m = structure.n_areas

    area_idx = np.array([structure.index(a) for a in data.area_id])
    order = np.argsort(area_idx, kind="stable")
    area_idx = area_idx[order]
    y = np.ascontiguousarray(data.y_positive[order], dtype=np.int64)
    n = np.ascontiguousarray(data.n_tested[order], dtype=np.int64)
    urban = np.asarray(data.urban[order], dtype=float)
    nC = len(y)
    if nC == 0:
        raise ValueError("no clusters")
    lchoose = np.ascontiguousarray(_lchoose(y, n))
    site_ptr = np.ascontiguousarray(
        np.searchsorted(area_idx, np.arange(m + 1)), dtype=np.int64)
    site_clusters = np.ascontiguousarray(np.arange(nC), dtype=np.int64)

    rows = [np.ones(nC)]
    names = ["beta0"]
    if X is not None:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[0] != m:
            raise ValueError(f"X must have one row per area ({m})")
        full = np.hstack([np.ones((m, 1)), X])
        if np.linalg.matrix_rank(full) < full.shape[1]:
            raise ValueError("covariate matrix is rank deficient")
        for j in range(X.shape[1]):
            rows.append(X[area_idx, j])
            names.append(f"beta_x{j + 1}")
    if urban_effect:
        rows.append(urban)
        names.append("gamma")
    covars = np.ascontiguousarray(np.vstack(rows))
    nf = covars.shape[0]
    prec_fixed = 1.0 / priors.fixed_effect_sd ** 2

    phi_prior = (None if priors.phi_uniform
                 else PhiPcPrior(structure, priors.phi.U, priors.phi.alpha))
    pooled = np.clip(y.sum() / max(n.sum(), 1), 1e-3, 1.0 - 1e-3)

    names_all = names + ["sigma_b", "phi", "lambda"] \
        + [f"b[{a}]" for a in structure.nodes]
    dim = len(names_all)
    chains = np.empty((cfg.n_chains, cfg.n_kept, dim))
    acc_sum = {}

    for chain_i, rng in enumerate(chain_rngs(cfg.seed, cfg.n_chains)):
        theta_fixed = np.zeros(nf)
        theta_fixed[0] = logit(pooled)
        b = np.zeros(m)
        log_sigma, logit_phi, logit_lam = math.log(0.3), 0.0, logit(0.05)
        sigma, phi_v, lam = 0.3, 0.5, 0.05
        one_m_phi = 0.5
        prior_state = _Bym2Prior(structure, sigma, phi_v, one_m_phi)
        qv = prior_state.P @ b
        eta = covars.T @ theta_fixed + b[area_idx]
        cluster_lik = np.empty(nC)
        scratch = np.empty(nC)
        total = kernels.fill_cluster_loglik(1, lam, y, n, lchoose, eta,
                                            cluster_lik)
        st_fixed = [AdaptiveScalar(window=cfg.adapt_window,
                                   log_step=math.log(0.1))
                    for _ in range(nf)]
        st_sites = [AdaptiveScalar(window=cfg.adapt_window,
                                   log_step=math.log(0.4))
                    for _ in range(m)]
        st_sigma = AdaptiveScalar(window=cfg.adapt_window)
        st_phi = AdaptiveScalar(window=cfg.adapt_window)
        st_lam = AdaptiveScalar(window=cfg.adapt_window)
        st_shift = AdaptiveScalar(window=cfg.adapt_window,
                                  log_step=math.log(0.1))
        st_scale = AdaptiveScalar(window=cfg.adapt_window,
                                  log_step=math.log(0.2))
        st_phib = AdaptiveScalar(window=cfg.adapt_window,
                                 log_step=math.log(0.5))
        steps_fixed = np.empty(nf)
        steps_sites = np.empty(m)
        accepts = np.zeros(nf + m, dtype=np.int64)
        kept = 0

        for it in range(cfg.n_iter):
            adapting = it < cfg.burn_in

            # --- sigma_b ---------------------------------------------
            c2 = (prior_state.V.T @ b) ** 2

            def _b_logprior(var):
                return -0.5 * float(np.sum(c2 / var) + np.sum(np.log(var)))

            def _sigma_logr(delta):
                s_new = math.exp(log_sigma + delta)
                var_new = prior_state.var_for(s_new, phi_v, one_m_phi)
                db = _b_logprior(var_new) - _b_logprior(prior_state.var)
                dp = (pc_prior_sd_logdensity(s_new, priors.sd.U,
                                             priors.sd.alpha)
                      - pc_prior_sd_logdensity(sigma, priors.sd.U,
                                               priors.sd.alpha))
                return db + dp + delta  # Jacobian ratio of log scale
            ok, delta = _scalar_met(rng, st_sigma, adapting, _sigma_logr)
            if ok:
                log_sigma += delta
                sigma = math.exp(log_sigma)
                prior_state.update(sigma, phi_v, one_m_phi)
                qv = prior_state.P @ b

            # --- phi --------------------------------------------------
            def _phi_logr(delta):
                lp_new = logit_phi + delta
                p_new = float(expit(lp_new))
                omp_new = float(expit(-lp_new))
                var_new = prior_state.var_for(sigma, p_new, omp_new)
                dv = _b_logprior(var_new) - _b_logprior(prior_state.var)
                if phi_prior is not None:
                    dv += (phi_prior.logpdf(p_new)
                           - phi_prior.logpdf(phi_v))
                dv += (math.log(p_new) + math.log(omp_new)
                       - math.log(phi_v) - math.log(one_m_phi))
                return dv
            ok, delta = _scalar_met(rng, st_phi, adapting, _phi_logr)
            if ok:
                logit_phi += delta
                phi_v = float(expit(logit_phi))
                one_m_phi = float(expit(-logit_phi))
                prior_state.update(sigma, phi_v, one_m_phi)
                qv = prior_state.P @ b

            # --- lambda (full-likelihood recompute) -------------------
            z = rng.standard_normal()
            delta = st_lam.step * z
            ll_new = logit_lam + delta
            lam_new = float(expit(ll_new))
            new_total = kernels.fill_cluster_loglik(1, lam_new, y, n,
                                                    lchoose, eta, scratch)
            logr = (new_total - total
                    + _sqrt_pc_logprior(lam_new, priors.overdispersion,
                                        priors.overdispersion_uniform)
                    - _sqrt_pc_logprior(lam, priors.overdispersion,
                                        priors.overdispersion_uniform)
                    + math.log(lam_new) + math.log1p(-lam_new)
                    - math.log(lam) - math.log1p(-lam))
            ok = logr >= 0 or rng.random() < math.exp(logr)
            st_lam.record(ok, adapting)
            if ok:
                logit_lam, lam, total = ll_new, lam_new, new_total
                np.copyto(cluster_lik, scratch)

            # --- intercept/field translation --------------------------
            if _special_moves:
                def _shift_logr(delta):
                    t0 = theta_fixed[0]
                    dfix = -0.5 * prec_fixed * ((t0 + delta) ** 2 - t0 ** 2)
                    dbp = delta * float(qv.sum()) \
                        - 0.5 * delta * delta * prior_state.P1sum
                    return dfix + dbp
                ok, delta = _scalar_met(rng, st_shift, adapting, _shift_logr)
                if ok:
                    theta_fixed[0] += delta
                    b -= delta
                    qv -= delta * prior_state.P1

            # --- joint field/amplitude scaling -------------------------
            # (b, log sigma) -> (e^d b, log sigma + d): the field prior and
            # the move Jacobian cancel, leaving likelihood + sigma prior.
            if _special_moves:
                delta = st_scale.step * rng.standard_normal()
                grow = math.exp(delta)
                eta_new = covars.T @ theta_fixed + grow * b[area_idx]
                new_total = kernels.fill_cluster_loglik(1, lam, y, n,
                                                        lchoose, eta_new,
                                                        scratch)
                sigma_new = math.exp(log_sigma + delta)
                logr = (new_total - total
                        - priors.sd.rate * (sigma_new - sigma) + delta)
                ok = logr >= 0 or rng.random() < math.exp(logr)
                st_scale.record(ok, adapting)
                if ok:
                    b *= grow
                    log_sigma += delta
                    sigma = sigma_new
                    prior_state.update(sigma, phi_v, one_m_phi)
                    qv = prior_state.P @ b
                    eta = eta_new
                    np.copyto(cluster_lik, scratch)
                    total = new_total

            # --- joint phi/field move ----------------------------------
            # phi moves with the field's eigencoordinates rescaled to the
            # proposed prior SDs; the Gaussian prior and move Jacobian
            # cancel, leaving likelihood, phi prior and logit Jacobian.
            if _special_moves:
                delta = st_phib.step * rng.standard_normal()
                lp_new = logit_phi + delta
                p_new = float(expit(lp_new))
                omp_new = float(expit(-lp_new))
                if 0.0 < p_new < 1.0:
                    var_new = prior_state.var_for(sigma, p_new, omp_new)
                    scale_vec = np.sqrt(var_new / prior_state.var)
                    b_new = prior_state.V @ (scale_vec
                                             * (prior_state.V.T @ b))
                    eta_new = covars.T @ theta_fixed + b_new[area_idx]
                    new_total = kernels.fill_cluster_loglik(
                        1, lam, y, n, lchoose, eta_new, scratch)
                    logr = new_total - total
                    if phi_prior is not None:
                        logr += (phi_prior.logpdf(p_new)
                                 - phi_prior.logpdf(phi_v))
                    logr += (math.log(p_new) + math.log(omp_new)
                             - math.log(phi_v) - math.log(one_m_phi))
                    ok = logr >= 0 or rng.random() < math.exp(logr)
                else:
                    ok = False
                st_phib.record(ok, adapting)
                if ok:
                    logit_phi, phi_v, one_m_phi = lp_new, p_new, omp_new
                    b = b_new
                    prior_state.update(sigma, phi_v, one_m_phi)
                    qv = prior_state.P @ b
                    eta = eta_new
                    np.copyto(cluster_lik, scratch)
                    total = new_total

            # --- fixed effects + latent sites (kernel sweep) ----------
            for j in range(nf):
                steps_fixed[j] = st_fixed[j].step
            for i in range(m):
                steps_sites[i] = st_sites[i].step
            normals = rng.standard_normal(nf + m)
            uniforms = rng.random(nf + m)
            total = kernels.field_iteration(
                1, lam, y, n, lchoose, eta, cluster_lik, scratch, covars,
                theta_fixed, prec_fixed, site_ptr, site_clusters, b,
                prior_state.P, qv, steps_fixed, steps_sites, normals,
                uniforms, accepts, total)
            for j in range(nf):
                st_fixed[j].record(bool(accepts[j]), adapting)
            for i in range(m):
                st_sites[i].record(bool(accepts[nf + i]), adapting)

            if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0:
                row = chains[chain_i, kept]
                row[:nf] = theta_fixed
                row[nf] = sigma
                row[nf + 1] = phi_v
                row[nf + 2] = lam
                row[nf + 3:] = b
                kept += 1

        for key, st in (("sigma_b", st_sigma), ("phi", st_phi),
                        ("lambda", st_lam), ("shift", st_shift),
                        ("scale", st_scale), ("phi_field", st_phib)):
            acc_sum[key] = acc_sum.get(key, 0.0) + st.acceptance
        for j, nm in enumerate(names):
            acc_sum[nm] = acc_sum.get(nm, 0.0) + st_fixed[j].acceptance
        site_acc = float(np.mean([s.acceptance for s in st_sites]))
        acc_sum["sites"] = acc_sum.get("sites", 0.0) + site_acc

    acceptance = {k: v / cfg.n_chains for k, v in acc_sum.items()}
    rhat = (gelman_rubin(chains) if cfg.n_chains >= 2
            else np.full(dim, np.nan))
    fit = PosteriorFit(names=names_all, chains=chains,
                       acceptance=acceptance, rhat=rhat, config=cfg,
                       area_ids=list(structure.nodes),
                       extras={"model": "betabinomial",
                               "urban_effect": bool(urban_effect),
                               "n_covariates": 0 if X is None else X.shape[1],
                               "X": None if X is None else np.array(X)})
    if q is not None:
        fit.prevalence = aggregate_strata(fit, q, X)
    return fit


def aggregate_strata(fit: PosteriorFit, q: UrbanFractions, X=None):
    """Stratum-weighted aggregation to area prevalence, per draw:

        p_i = (1 - q_i) expit(eta_rural_i) + q_i expit(eta_rural_i + gamma)

    where eta_rural_i = beta0 + x_i'beta + b_i.  Area covariates enter
    both strata; the urban effect is the only difference between them.
    """
    area_ids = fit.area_ids
    qvec = q.vector(area_ids)
    draws = fit.draws
    names = fit.names
    m = len(area_ids)
    b_cols = [names.index(f"b[{a}]") for a in area_ids]
    eta_r = draws[:, [names.index("beta0")]] + draws[:, b_cols]
    if X is not None:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        xcols = [names.index(f"beta_x{j + 1}") for j in range(X.shape[1])]
        eta_r = eta_r + draws[:, xcols] @ X.T
    if "gamma" in names:
        gamma = draws[:, [names.index("gamma")]]
    else:
        gamma = 0.0
    return (1.0 - qvec) * expit(eta_r) + qvec * expit(eta_r + gamma)


# ---------------------------------------------------------------------------
# Continuous (Matern GP) unit-level model

@dataclass(frozen=True)
class PcRangePrior:
    """Tail statement Pr(rho < U) = alpha for a spatial range."""

    U: float
    alpha: float

    def __post_init__(self):
        if self.U <= 0:
            raise ValueError("U must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def rate(self):
        return -self.U * math.log(self.alpha)

    def logpdf(self, rho):
        if rho <= 0:
            return -math.inf
        return math.log(self.rate) - 2.0 * math.log(rho) - self.rate / rho


@dataclass
class GpPriors:
    """Hyperpriors for the continuous model."""

    sigma: PcPrior = PcPrior(1.0, 0.01)
    range_: PcRangePrior = PcRangePrior(0.3, 0.05)
    nugget: PcPrior = PcPrior(1.0, 0.01)
    fixed_effect_sd: float = 31.6


def fit_gp_unit(data: ClusterData, nu=1.5, priors: GpPriors = None,
                mcmc: ChainConfig = None, urban_effect=False,
                nugget_fixed=None) -> PosteriorFit:
    """Binomial cluster model with a latent Matern field plus nugget.

    The latent value per cluster is w_c = S(s_c) + eps_c with prior
    covariance K + sigma_eps^2 I; hyperparameters (sigma_S, rho_S,
    sigma_eps) move in one adaptive block, the field and fixed effects in
    the shared sweep kernel.  Dense Cholesky factorizations bound the
    practical size to around a thousand clusters.  `nugget_fixed` pins
    sigma_eps (e.g. to a small floor) instead of sampling it.
    """
    priors = priors or GpPriors()
    cfg = mcmc or ChainConfig()
    if not data.has_coordinates():
        raise ValueError("continuous model needs cluster coordinates")
    pts = np.column_stack([data.lon, data.lat]).astype(float)
    nC = len(data)
    if nC < 3:
        raise ValueError("need at least 3 clusters")
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    if np.any(d2[~np.eye(nC, dtype=bool)] <= 0):
        raise ValueError("cluster coordinates must be distinct")

    y = np.ascontiguousarray(data.y_positive, dtype=np.int64)
    n = np.ascontiguousarray(data.n_tested, dtype=np.int64)
    lchoose = np.ascontiguousarray(_lchoose(y, n))
    rows = [np.ones(nC)]
    names = ["beta0"]
    if urban_effect:
        rows.append(np.asarray(data.urban, dtype=float))
        names.append("gamma")
    covars = np.ascontiguousarray(np.vstack(rows))
    nf = covars.shape[0]
    prec_fixed = 1.0 / priors.fixed_effect_sd ** 2
    site_ptr = np.ascontiguousarray(np.arange(nC + 1), dtype=np.int64)
    site_clusters = np.ascontiguousarray(np.arange(nC), dtype=np.int64)
    pooled = np.clip(y.sum() / max(n.sum(), 1), 1e-3, 1.0 - 1e-3)
    med_dist = float(np.median(np.sqrt(d2[np.triu_indices(nC, 1)])))

    sample_nugget = nugget_fixed is None
    hyper_names = ["sigma_s", "rho_s"] + (["sigma_eps"] if sample_nugget
                                          else [])
    nh = len(hyper_names)
    names_all = names + ["sigma_s", "rho_s", "sigma_eps"] \
        + [f"w[{i}]" for i in range(nC)]
    dim = len(names_all)
    chains = np.empty((cfg.n_chains, cfg.n_kept, dim))
    acc_sum = {}

    def cov_matrix(sigma_s, rho_s, sigma_eps):
        K = matern_covariance_matrix(pts, MaternParams(sigma_s, rho_s, nu),
                                     nugget_var=sigma_eps ** 2)
        return K

    for chain_i, rng in enumerate(chain_rngs(cfg.seed, cfg.n_chains)):
        theta_fixed = np.zeros(nf)
        theta_fixed[0] = logit(pooled)
        w = np.zeros(nC)
        hyper = np.array([math.log(0.5), math.log(max(med_dist, 1e-3)),
                          math.log(0.25 if sample_nugget
                                   else max(nugget_fixed, 1e-8))])
        sigma_s, rho_s, sigma_eps = np.exp(hyper)
        K = cov_matrix(sigma_s, rho_s, sigma_eps)
        fac = cho_factor(K, lower=True)
        logdet = 2.0 * float(np.sum(np.log(np.diag(fac[0]))))
        P = np.ascontiguousarray(cho_solve(fac, np.eye(nC)))
        qv = P @ w
        P1 = P.sum(axis=1)
        P1sum = float(P1.sum())

        eta = covars.T @ theta_fixed + w
        cluster_lik = np.empty(nC)
        scratch = np.empty(nC)
        total = kernels.fill_cluster_loglik(0, 0.0, y, n, lchoose, eta,
                                            cluster_lik)
        st_fixed = [AdaptiveScalar(window=cfg.adapt_window,
                                   log_step=math.log(0.1))
                    for _ in range(nf)]
        st_sites = [AdaptiveScalar(window=cfg.adapt_window,
                                   log_step=math.log(0.4))
                    for _ in range(nC)]
        st_hyper = AdaptiveScalar(target=cfg.target_for(nh),
                                  window=cfg.adapt_window,
                                  log_step=math.log(0.2))
        st_shift = AdaptiveScalar(window=cfg.adapt_window,
                                  log_step=math.log(0.1))
        st_scale = AdaptiveScalar(window=cfg.adapt_window,
                                  log_step=math.log(0.2))
        steps_fixed = np.empty(nf)
        steps_sites = np.empty(nC)
        accepts = np.zeros(nf + nC, dtype=np.int64)
        kept = 0

        def hyper_logprior(h):
            s_s, r_s = math.exp(h[0]), math.exp(h[1])
            lp = pc_prior_sd_logdensity(s_s, priors.sigma.U,
                                        priors.sigma.alpha) + h[0]
            lp += priors.range_.logpdf(r_s) + h[1]
            if sample_nugget:
                s_e = math.exp(h[2])
                lp += pc_prior_sd_logdensity(s_e, priors.nugget.U,
                                             priors.nugget.alpha) + h[2]
            return lp

        for it in range(cfg.n_iter):
            adapting = it < cfg.burn_in

            # --- hyperparameter block ---------------------------------
            z = rng.standard_normal(nh)
            prop = hyper.copy()
            prop[:nh] = hyper[:nh] + st_hyper.step * z
            s_new = np.exp(prop)
            ok = False
            try:
                K_new = cov_matrix(s_new[0], s_new[1], s_new[2])
                fac_new = cho_factor(K_new, lower=True)
                logdet_new = 2.0 * float(
                    np.sum(np.log(np.diag(fac_new[0]))))
                quad_new = float(w @ cho_solve(fac_new, w))
                quad_old = float(w @ qv)
                logr = (-0.5 * (logdet_new + quad_new)
                        + 0.5 * (logdet + quad_old)
                        + hyper_logprior(prop) - hyper_logprior(hyper))
                ok = logr >= 0 or rng.random() < math.exp(logr)
            except np.linalg.LinAlgError:
                ok = False
            st_hyper.record(ok, adapting)
            if ok:
                hyper = prop
                sigma_s, rho_s, sigma_eps = np.exp(hyper)
                logdet = logdet_new
                P = np.ascontiguousarray(
                    cho_solve(fac_new, np.eye(nC)))
                qv = P @ w
                P1 = P.sum(axis=1)
                P1sum = float(P1.sum())

            # --- intercept/field translation --------------------------
            def _shift_logr(delta):
                t0 = theta_fixed[0]
                dfix = -0.5 * prec_fixed * ((t0 + delta) ** 2 - t0 ** 2)
                dbp = delta * float(qv.sum()) - 0.5 * delta * delta * P1sum
                return dfix + dbp
            ok, delta = _scalar_met(rng, st_shift, adapting, _shift_logr)
            if ok:
                theta_fixed[0] += delta
                w -= delta
                qv -= delta * P1

            # --- joint field/amplitude scaling -------------------------
            # (w, sigma_s, sigma_eps) scale together so the Gaussian prior
            # and move Jacobian cancel; needs the nugget to be sampled.
            if sample_nugget:
                delta = st_scale.step * rng.standard_normal()
                grow = math.exp(delta)
                eta_new = covars.T @ theta_fixed + grow * w
                new_total = kernels.fill_cluster_loglik(
                    0, 0.0, y, n, lchoose, eta_new, scratch)
                ss_new = sigma_s * grow
                se_new = sigma_eps * grow
                logr = (new_total - total
                        - priors.sigma.rate * (ss_new - sigma_s)
                        - priors.nugget.rate * (se_new - sigma_eps)
                        + 2.0 * delta)
                ok = logr >= 0 or rng.random() < math.exp(logr)
                st_scale.record(ok, adapting)
                if ok:
                    w *= grow
                    hyper[0] += delta
                    hyper[2] += delta
                    sigma_s, sigma_eps = ss_new, se_new
                    logdet += 2.0 * nC * delta
                    P /= grow * grow
                    qv /= grow
                    P1 /= grow * grow
                    P1sum /= grow * grow
                    eta = eta_new
                    np.copyto(cluster_lik, scratch)
                    total = new_total

            # --- fixed effects + latent field (kernel sweep) ----------
            for j in range(nf):
                steps_fixed[j] = st_fixed[j].step
            for i in range(nC):
                steps_sites[i] = st_sites[i].step
            normals = rng.standard_normal(nf + nC)
            uniforms = rng.random(nf + nC)
            total = kernels.field_iteration(
                0, 0.0, y, n, lchoose, eta, cluster_lik, scratch, covars,
                theta_fixed, prec_fixed, site_ptr, site_clusters, w, P, qv,
                steps_fixed, steps_sites, normals, uniforms, accepts, total)
            for j in range(nf):
                st_fixed[j].record(bool(accepts[j]), adapting)
            for i in range(nC):
                st_sites[i].record(bool(accepts[nf + i]), adapting)

            if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0:
                row = chains[chain_i, kept]
                row[:nf] = theta_fixed
                row[nf] = sigma_s
                row[nf + 1] = rho_s
                row[nf + 2] = sigma_eps
                row[nf + 3:] = w
                kept += 1

        acc_sum["hyper"] = acc_sum.get("hyper", 0.0) + st_hyper.acceptance
        acc_sum["shift"] = acc_sum.get("shift", 0.0) + st_shift.acceptance
        if sample_nugget:
            acc_sum["scale"] = acc_sum.get("scale", 0.0) + st_scale.acceptance
        for j, nm in enumerate(names):
            acc_sum[nm] = acc_sum.get(nm, 0.0) + st_fixed[j].acceptance
        site_acc = float(np.mean([s.acceptance for s in st_sites]))
        acc_sum["sites"] = acc_sum.get("sites", 0.0) + site_acc

    acceptance = {k: v / cfg.n_chains for k, v in acc_sum.items()}
    rhat = (gelman_rubin(chains) if cfg.n_chains >= 2
            else np.full(dim, np.nan))
    return PosteriorFit(names=names_all, chains=chains,
                        acceptance=acceptance, rhat=rhat, config=cfg,
                        area_ids=None,
                        extras={"model": "gp", "points": pts, "nu": nu,
                                "urban_effect": bool(urban_effect),
                                "cluster_area": np.array(data.area_id,
                                                         dtype=object)})


def gp_conditional_draws(fit: PosteriorFit, points, urban=None,
                         include_nugget=False, max_draws=500, rng=None):
    """Field draws at new points by conditional simulation.

    For each retained (sub-sampled) posterior draw, S at the new points is
    simulated from its Gaussian conditional given the latent cluster
    values; the nugget is excluded unless requested.  Returns
    (draw_indices, field_draws) with field_draws of shape
    (n_sel, n_points); fixed effects are not added here.
    """
    if fit.extras.get("model") != "gp":
        raise ValueError("fit is not a continuous-model fit")
    pts_fit = fit.extras["points"]
    nu = fit.extras["nu"]
    new_pts = np.atleast_2d(np.asarray(points, dtype=float))
    draws = fit.draws
    names = fit.names
    nC = pts_fit.shape[0]
    w_cols = [names.index(f"w[{i}]") for i in range(nC)]
    n_draws = draws.shape[0]
    sel = np.unique(np.linspace(0, n_draws - 1,
                                min(max_draws, n_draws)).astype(int))
    if rng is None:
        rng = np.random.default_rng([fit.config.seed, 0xA66])
    out = np.empty((len(sel), new_pts.shape[0]))
    for k, t in enumerate(sel):
        sigma_s = draws[t, names.index("sigma_s")]
        rho_s = draws[t, names.index("rho_s")]
        sigma_eps = draws[t, names.index("sigma_eps")]
        w = draws[t, w_cols]
        params = MaternParams(sigma_s, rho_s, nu)
        K_cc = matern_covariance_matrix(pts_fit, params,
                                        nugget_var=sigma_eps ** 2)
        fac = cho_factor(K_cc, lower=True)
        K_pc = matern_cross_covariance(new_pts, pts_fit, params)
        mu = K_pc @ cho_solve(fac, w)
        K_pp = matern_covariance_matrix(new_pts, params)
        if include_nugget:
            K_pp = K_pp + sigma_eps ** 2 * np.eye(len(new_pts))
        cov = K_pp - K_pc @ cho_solve(fac, K_pc.T)
        cov = 0.5 * (cov + cov.T)
        jitter = 1e-10 * max(1.0, sigma_s ** 2)
        L = np.linalg.cholesky(cov + jitter * np.eye(len(new_pts)))
        out[k] = mu + L @ rng.standard_normal(len(new_pts))
    return sel, out


def aggregate_pixel_risks(pixel_area, weights, risk_draws):
    """Weighted sum of pixel risks within each area.

    weights must already be normalized per area; risk_draws has one row
    per posterior draw and one column per pixel.  Returns (area_ids,
    prevalence draws).
    """
    pixel_area = np.asarray(pixel_area, dtype=object)
    weights = np.asarray(weights, dtype=float)
    risk_draws = np.atleast_2d(np.asarray(risk_draws, dtype=float))
    area_ids = []
    for a in pixel_area:
        if a not in area_ids:
            area_ids.append(a)
    out = np.empty((risk_draws.shape[0], len(area_ids)))
    for j, a in enumerate(area_ids):
        mask = pixel_area == a
        out[:, j] = risk_draws[:, mask] @ weights[mask]
    return area_ids, out


def aggregate_continuous(fit: PosteriorFit, grid: PixelGrid,
                         max_draws=500):
    """Continuous aggregation: population-weighted average of pixel risks.

    Risk at a pixel is expit(beta0 [+ gamma*urban] + S(s)); the nugget is
    excluded (it is read as measurement noise).  Returns (area_ids,
    prevalence draws) with one row per selected posterior draw.
    """
    norm = grid.normalized()
    pts = np.column_stack([norm.lon, norm.lat]).astype(float)
    sel, field = gp_conditional_draws(fit, pts, max_draws=max_draws)
    draws = fit.draws
    names = fit.names
    eta = draws[sel, names.index("beta0")][:, None] + field
    if fit.extras.get("urban_effect") and "gamma" in names:
        z = np.asarray(norm.urban, dtype=float)
        eta = eta + draws[sel, names.index("gamma")][:, None] * z[None, :]
    return aggregate_pixel_risks(norm.area_id, norm.weight, expit(eta))
