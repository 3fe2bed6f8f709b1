"""saekit: small-area estimation over complex household-survey designs.

Simulates finite populations and stratified two-stage cluster samples,
computes design-based direct and classical indirect estimates, and fits
Bayesian spatial smoothing models (area-level smoothed-direct, unit-level
beta-binomial, and a dense Matern Gaussian-process model) with stratum-
aware aggregation and leave-one-area-out assessment.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
