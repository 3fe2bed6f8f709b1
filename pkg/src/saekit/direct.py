"""Design-based direct estimation: per-area weighted (Hajek) proportions,
delete-one-cluster jackknife variances, and the logit transform feeding
the area-level smoothing model.

Clusters are treated as with-replacement PSUs for variance purposes (the
standard convention under systematic PPS, where joint inclusion
probabilities are unavailable).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sampling import SurveySample

STATUS_OK = "ok"
STATUS_NO_SAMPLE = "no_sample"
STATUS_BOUNDARY = "boundary"
STATUS_NO_VARIANCE = "no_variance"


class BoundaryEstimateError(ValueError):
    """Direct estimate is 0 or 1; logit undefined."""


@dataclass
class AreaDirectEstimates:
    """Per-area direct estimates with design-based variances.

    est/var are NaN where unavailable; logit-scale entries (z, z_var) are
    present only for interior estimates with an estimable variance, per
    the status column: 'ok', 'no_sample', 'boundary' (est in {0,1}) or
    'no_variance' (single cluster).
    """

    area_ids: list
    est: np.ndarray
    var: np.ndarray
    n: np.ndarray
    n_clusters: np.ndarray
    z: np.ndarray
    z_var: np.ndarray
    status: list

    def __len__(self):
        return len(self.area_ids)

    @property
    def se(self):
        return np.sqrt(self.var)

    def usable_for_smoothing(self):
        """Indices of areas that enter the area-level likelihood."""
        return [i for i, s in enumerate(self.status) if s == STATUS_OK]

    def record(self, area_id):
        i = self.area_ids.index(area_id)
        return {
            "area_id": area_id, "est": self.est[i], "var": self.var[i],
            "n": self.n[i], "n_clusters": self.n_clusters[i],
            "z": self.z[i], "z_var": self.z_var[i], "status": self.status[i],
        }


def ht_estimate(y, w):
    """Weighted proportion in Hajek ratio form: sum(w*y) / sum(w)."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if y.size == 0:
        raise ValueError("no data in domain")
    if y.shape != w.shape:
        raise ValueError("y and w must have the same length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    return float(np.sum(w * y) / np.sum(w))


def jackknife_variance(y_positive, n_tested, weights):
    """Delete-one-cluster jackknife variance of the Hajek proportion.

    Arguments are per-cluster aggregates for a single area: positive
    counts, tested counts and the (per-person) cluster weights.  With K
    clusters, V = ((K-1)/K) * sum_k (theta_(-k) - theta_bar)^2 where
    theta_bar averages the leave-one-out estimates.
    """
    y = np.asarray(y_positive, dtype=float)
    n = np.asarray(n_tested, dtype=float)
    w = np.asarray(weights, dtype=float)
    K = len(y)
    if K < 2:
        raise ValueError("variance not estimable with a single cluster")
    num = np.sum(w * y)
    den = np.sum(w * n)
    if den <= 0:
        raise ValueError("no tested individuals")
    loo = (num - w * y) / (den - w * n)
    if not np.all(np.isfinite(loo)):
        raise ValueError("leave-one-out estimate undefined "
                         "(a cluster carries all the weight)")
    return float((K - 1) / K * np.sum((loo - loo.mean()) ** 2))


def direct_by_area(sample: SurveySample, areas=None) -> AreaDirectEstimates:
    """Hajek estimate and jackknife variance for every area.

    `areas` fixes the output universe (areas without sampled clusters get
    a missing record); by default the universe is the areas present in
    the sample.
    """
    if areas is None:
        seen = []
        for a in sample.area_id:
            if a not in seen:
                seen.append(a)
        areas = seen
    m = len(areas)
    est = np.full(m, np.nan)
    var = np.full(m, np.nan)
    nn = np.zeros(m, dtype=int)
    ncl = np.zeros(m, dtype=int)
    z = np.full(m, np.nan)
    zv = np.full(m, np.nan)
    status = []
    for i, a in enumerate(areas):
        mask = sample.area_id == a
        if not mask.any():
            status.append(STATUS_NO_SAMPLE)
            continue
        y = sample.y_positive[mask]
        n = sample.n_tested[mask]
        w = sample.adjusted_weight[mask]
        nonempty = n > 0
        if not nonempty.any() or n.sum() == 0:
            status.append(STATUS_NO_SAMPLE)
            continue
        nn[i] = int(n.sum())
        ncl[i] = int(mask.sum())
        est[i] = float(np.sum(w * y) / np.sum(w * n))
        if ncl[i] >= 2:
            var[i] = jackknife_variance(y, n, w)
        if est[i] in (0.0, 1.0):
            status.append(STATUS_BOUNDARY)
            continue
        if ncl[i] < 2 or var[i] == 0.0:
            # a zero jackknife variance (identical clusters) is as
            # unusable for the Gaussian likelihood as a missing one
            status.append(STATUS_NO_VARIANCE)
            continue
        z[i], zv[i] = logit_transform(est[i], var[i])
        status.append(STATUS_OK)
    return AreaDirectEstimates(area_ids=list(areas), est=est, var=var,
                               n=nn, n_clusters=ncl, z=z, z_var=zv,
                               status=status)


def logit_transform(est, var):
    """Logit of a proportion with its delta-method variance.

    Z = log(est/(1-est)); V = var / (est*(1-est))^2.  Raises
    BoundaryEstimateError for est in {0, 1}.
    """
    if not 0.0 < est < 1.0:
        raise BoundaryEstimateError(
            f"logit undefined for boundary estimate {est}")
    if var < 0:
        raise ValueError("variance must be nonnegative")
    Z = float(np.log(est / (1.0 - est)))
    V = float(var / (est * (1.0 - est)) ** 2)
    return Z, V


def pooled_crude(positive, tested):
    """Unweighted pooled proportion and its binomial SE."""
    positive = int(np.sum(positive))
    tested = int(np.sum(tested))
    if tested <= 0:
        raise ValueError("no data in domain")
    p = positive / tested
    se = float(np.sqrt(p * (1.0 - p) / tested))
    return p, se
