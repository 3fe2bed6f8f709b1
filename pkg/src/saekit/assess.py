"""Model assessment: leave-one-area-out cross-validation against the
direct estimates, and posterior ranking distributions.

The held-out comparison treats the direct estimate as a noisy measurement
of the true area mean, so the predictive interval for it convolves the
model's prevalence draws with the design-based sampling noise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .arealevel import SmoothedDirectSpec, fit_smoothed_direct
from .direct import STATUS_OK, AreaDirectEstimates
from .mcmc import ChainConfig
from .unitlevel import ClusterData, fit_betabinomial


@dataclass
class CvRecord:
    area_id: str
    direct_est: float
    direct_se: float
    pred_median: float
    pred_lower: float
    pred_upper: float
    discrepancy: float        # (pred - direct) / sqrt(V_direct + pred var)
    covered: bool


@dataclass
class CvReport:
    records: list
    skipped: dict              # area_id -> reason
    level: float = 0.9

    def coverage(self):
        if not self.records:
            return float("nan")
        return float(np.mean([r.covered for r in self.records]))

    def mean_discrepancy(self):
        return float(np.mean([r.discrepancy for r in self.records]))


def _drop_area_direct(data: AreaDirectEstimates, k):
    status = list(data.status)
    status[k] = "no_sample"
    z = data.z.copy()
    zv = data.z_var.copy()
    z[k] = np.nan
    zv[k] = np.nan
    return AreaDirectEstimates(area_ids=list(data.area_ids),
                               est=data.est.copy(), var=data.var.copy(),
                               n=data.n.copy(),
                               n_clusters=data.n_clusters.copy(),
                               z=z, z_var=zv, status=status)


def _drop_area_clusters(data: ClusterData, area_id):
    keep = data.area_id != area_id
    return ClusterData(cluster_id=data.cluster_id[keep],
                       area_id=data.area_id[keep], urban=data.urban[keep],
                       n_tested=data.n_tested[keep],
                       y_positive=data.y_positive[keep],
                       lon=data.lon[keep], lat=data.lat[keep])


def _cv_one_area(task):
    """Refit with one area removed and score the held-out prediction.

    Module-level so process pools can pickle it; everything needed rides
    in the task dict.
    """
    (k, area, model, direct, structure, X, cluster_data, q, urban_effect,
     priors, cfg, level, seed_entropy) = (
        task["k"], task["area"], task["model"], task["direct"],
        task["structure"], task["X"], task["cluster_data"], task["q"],
        task["urban_effect"], task["priors"], task["cfg"], task["level"],
        task["seed_entropy"])
    seed_seq = np.random.SeedSequence(entropy=seed_entropy)
    cfg_k = replace(cfg, seed=int(seed_seq.generate_state(1)[0]))
    try:
        if model == "smoothed_direct":
            spec = SmoothedDirectSpec(
                data=_drop_area_direct(direct, k), structure=structure,
                X=X, mcmc=cfg_k,
                **({"priors": priors} if priors is not None else {}))
            fit = fit_smoothed_direct(spec)
        else:
            fit = fit_betabinomial(
                _drop_area_clusters(cluster_data, area), structure,
                q=q, X=X, urban_effect=urban_effect, mcmc=cfg_k,
                **({"priors": priors} if priors is not None else {}))
    except Exception as exc:  # per-area failures recorded, not fatal
        return k, None, f"fit failed: {exc}"
    ai = fit.area_ids.index(area)
    p_draws = fit.prevalence[:, ai]
    noise_rng = np.random.default_rng(seed_seq.spawn(1)[0])
    se = float(np.sqrt(direct.var[k]))
    pred = p_draws + se * noise_rng.standard_normal(len(p_draws))
    alpha = (1.0 - level) / 2.0
    lo, med, hi = np.quantile(pred, [alpha, 0.5, 1.0 - alpha])
    disc = ((np.median(p_draws) - direct.est[k])
            / np.sqrt(direct.var[k] + p_draws.var()))
    rec = CvRecord(
        area_id=area, direct_est=float(direct.est[k]), direct_se=se,
        pred_median=float(med), pred_lower=float(lo), pred_upper=float(hi),
        discrepancy=float(disc), covered=bool(lo <= direct.est[k] <= hi))
    return k, rec, None


def loo_area_cv(direct: AreaDirectEstimates, model="smoothed_direct",
                structure=None, X=None, cluster_data=None, q=None,
                urban_effect=True, priors=None, mcmc: ChainConfig = None,
                level=0.9, threads=1) -> CvReport:
    """Refit with one area held out at a time; compare the held-out
    prediction against that area's direct estimate.

    model selects the refitted specification: "smoothed_direct" (drops the
    area's (Z, V) pair) or "betabinomial" (drops the area's clusters;
    needs cluster_data and q).  Per-area refits use seeds derived from the
    configured root seed, so the report is reproducible and independent of
    evaluation order and of `threads` (worker processes).
    """
    if model not in ("smoothed_direct", "betabinomial"):
        raise ValueError(f"unknown model selector {model!r}")
    if structure is None:
        raise ValueError("structure is required")
    if model == "betabinomial" and (cluster_data is None or q is None):
        raise ValueError("betabinomial CV needs cluster_data and q")
    cfg = mcmc or ChainConfig()
    usable = [k for k, s in enumerate(direct.status) if s == STATUS_OK]
    if len(usable) < 3:
        raise ValueError("need at least 3 areas with direct estimates")

    records, skipped = [], {}
    tasks = []
    for k, area in enumerate(direct.area_ids):
        if direct.status[k] != STATUS_OK:
            skipped[area] = f"no direct comparator ({direct.status[k]})"
            continue
        tasks.append({"k": k, "area": area, "model": model,
                      "direct": direct, "structure": structure, "X": X,
                      "cluster_data": cluster_data, "q": q,
                      "urban_effect": urban_effect, "priors": priors,
                      "cfg": cfg, "level": level,
                      "seed_entropy": (int(cfg.seed) & ((1 << 63) - 1), k)})
    if threads > 1 and len(tasks) > 1:
        import concurrent.futures as cf
        with cf.ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_cv_one_area, tasks))
    else:
        results = [_cv_one_area(t) for t in tasks]
    for k, rec, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            skipped[direct.area_ids[k]] = err
        else:
            records.append(rec)
    return CvReport(records=records, skipped=skipped, level=level)


@dataclass
class RankSummary:
    area_ids: list
    median_rank: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.9


def rank_distribution(prevalence_draws, area_ids, level=0.9) -> RankSummary:
    """Posterior ranking distribution; rank 1 is the lowest prevalence.

    Ties within a draw are broken deterministically by area order.
    Summaries are the median rank and a central interval per area.
    """
    draws = np.asarray(prevalence_draws, dtype=float)
    if draws.ndim != 2 or draws.shape[1] != len(area_ids):
        raise ValueError("draws must be (n_draws, n_areas)")
    order = np.argsort(draws, axis=1, kind="stable")
    ranks = np.empty_like(order)
    cols = np.arange(1, draws.shape[1] + 1)
    rows = np.arange(draws.shape[0])[:, None]
    ranks[rows, order] = cols
    alpha = (1.0 - level) / 2.0
    qs = np.quantile(ranks, [alpha, 0.5, 1.0 - alpha], axis=0,
                     method="linear")
    return RankSummary(area_ids=list(area_ids), median_rank=qs[1],
                       lower=qs[0], upper=qs[2], level=level)
