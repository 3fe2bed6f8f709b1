"""Classical indirect estimators: pooled weighted regression slopes and
the synthetic, survey-regression, and composite estimators built on them.

All of these trade variance against bias by borrowing a regression fit
across areas; the composite mixes the nearly-unbiased survey-regression
estimate with the low-variance synthetic one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CovariateTable:
    """Unit-level covariates for sampled units plus per-area population
    means, with a consistent column dimension (first column may be an
    all-ones intercept)."""

    unit_area: np.ndarray      # area id per sampled unit
    unit_x: np.ndarray         # (n_units, p)
    area_ids: list
    area_means: np.ndarray     # (n_areas, p)

    def __post_init__(self):
        self.unit_x = np.atleast_2d(np.asarray(self.unit_x, dtype=float))
        self.area_means = np.atleast_2d(
            np.asarray(self.area_means, dtype=float))
        if self.unit_x.shape[1] != self.area_means.shape[1]:
            raise ValueError("unit and area covariate dimensions differ")
        if len(self.area_ids) != self.area_means.shape[0]:
            raise ValueError("area_means must have one row per area id")

    def mean_for(self, area_id):
        return self.area_means[list(self.area_ids).index(area_id)]


def pooled_weighted_slope(x, y, d, cond_limit=1e10):
    """Weighted least-squares slopes pooled across all areas.

    Solves [sum d x x']^{-1} sum d x y.  A near-singular cross-product
    matrix raises with its condition number in the message.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    if len(y) != x.shape[0] or len(d) != x.shape[0]:
        raise ValueError("x, y, d must agree in length")
    xtdx = x.T @ (d[:, None] * x)
    cond = np.linalg.cond(xtdx)
    if not np.isfinite(cond) or cond > cond_limit:
        raise np.linalg.LinAlgError(
            f"weighted cross-product is singular (condition number {cond:.3g})")
    return np.linalg.solve(xtdx, x.T @ (d * y))


def synthetic_estimate(area_means, slopes):
    """Synthetic estimates x_bar_i' B for each area.

    Linear-probability fits can leave [0, 1]; the raw value is returned
    along with a flag array marking such areas (no silent clamping).
    """
    xb = np.atleast_2d(np.asarray(area_means, dtype=float))
    B = np.asarray(slopes, dtype=float)
    est = xb @ B
    outside = (est < 0.0) | (est > 1.0)
    return est, outside


def survey_regression_estimate(y, x, d, area_mean, slopes):
    """Survey-regression estimate for one area.

    Implements the bias-corrected form m_HT + (x_bar - x_bar_HT)' B where
    the Hajek covariate mean uses the same weights as the outcome mean.
    """
    y = np.asarray(y, dtype=float)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = np.asarray(d, dtype=float)
    if y.size == 0:
        raise ValueError("no data in area")
    B = np.asarray(slopes, dtype=float)
    wsum = d.sum()
    m_ht = float(np.sum(d * y) / wsum)
    xbar_ht = (d @ x) / wsum
    return m_ht + float((np.asarray(area_mean) - xbar_ht) @ B)


def composite_estimate(sr, syn, delta):
    """Convex combination delta*sr + (1-delta)*syn."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta={delta} outside [0, 1]")
    return delta * sr + (1.0 - delta) * syn


def default_composite_weight(n_i, n_mean):
    """Heuristic mixing weight n_i / (n_i + mean area sample size).

    Larger samples push delta toward 1 (toward the survey-regression
    estimate); this is a labeled heuristic, not an estimated optimum.
    """
    if n_i < 0 or n_mean <= 0:
        raise ValueError("sample sizes must be positive")
    return n_i / (n_i + n_mean)
