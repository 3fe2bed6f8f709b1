"""Pure-Python fallback kernels.

These mirror the compiled Cython kernels statement for statement: the same
libm calls (via the math module) in the same order, consuming the same
pre-generated random numbers, so compiled and fallback backends produce
bit-identical chains.  Keep the two files in sync; the equivalence test
exercises them against each other.
"""

from math import exp, log, log1p

NEG_INF = float("-inf")


def _expit(x):
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def _log_expit(x):
    if x >= 0.0:
        return -log1p(exp(-x))
    return x - log1p(exp(x))


def bb_cluster_logpmf(y, n, lchoose, eta, lam):
    """Log pmf of one cluster's count: binomial when lam == 0, else
    beta-binomial with shapes p(1-lam)/lam and (1-p)(1-lam)/lam.

    Uses the rising-product form (sums of logs) so tiny lam evaluates
    without the catastrophic cancellation of a log-gamma difference.
    """
    y = int(y)
    n = int(n)
    if lam <= 0.0:
        return lchoose + y * _log_expit(eta) + (n - y) * _log_expit(-eta)
    p = _expit(eta)
    omp = _expit(-eta)
    f = (1.0 - lam) / lam
    a = p * f
    b = omp * f
    if (a == 0.0 and y > 0) or (b == 0.0 and y < n):
        return NEG_INF
    s = lchoose
    for j in range(y):
        s += log(a + j)
    for j in range(n - y):
        s += log(b + j)
    ab = a + b
    for j in range(n):
        s -= log(ab + j)
    return s


def fill_cluster_loglik(lik_type, lam, y, n, lchoose, eta, out):
    """Per-cluster log likelihood into `out`; returns the total."""
    total = 0.0
    lam_eff = lam if lik_type == 1 else 0.0
    for c in range(len(y)):
        v = bb_cluster_logpmf(y[c], n[c], lchoose[c], eta[c], lam_eff)
        out[c] = v
        total += v
    return total


def field_iteration(lik_type, lam, y, n, lchoose, eta, cluster_lik, scratch,
                    covars, theta_fixed, prior_prec_fixed,
                    site_ptr, site_clusters, b, P, q,
                    steps_fixed, steps_sites, normals, uniforms, accepts,
                    total):
    """One Metropolis-within-Gibbs pass over fixed effects and latent sites.

    Fixed effect j shifts every cluster's linear predictor along
    covars[j]; site i shifts only its own clusters, with the Gaussian
    prior contribution evaluated through the precision matrix P and the
    maintained product q = P @ b.  Arrays eta, cluster_lik, theta_fixed,
    b, q and accepts are updated in place; returns the new total log
    likelihood.
    """
    lam_eff = lam if lik_type == 1 else 0.0
    n_fixed = len(theta_fixed)
    n_clusters = len(y)
    m = len(b)

    for j in range(n_fixed):
        delta = steps_fixed[j] * normals[j]
        new_total = 0.0
        for c in range(n_clusters):
            v = bb_cluster_logpmf(y[c], n[c], lchoose[c],
                                  eta[c] + delta * covars[j, c], lam_eff)
            scratch[c] = v
            new_total += v
        t_old = theta_fixed[j]
        t_new = t_old + delta
        logr = (new_total - total
                - 0.5 * prior_prec_fixed * (t_new * t_new - t_old * t_old))
        if logr >= 0.0:
            ok = True
        else:
            ok = uniforms[j] < exp(logr)
        if ok:
            theta_fixed[j] = t_new
            for c in range(n_clusters):
                eta[c] += delta * covars[j, c]
                cluster_lik[c] = scratch[c]
            total = new_total
            accepts[j] = 1
        else:
            accepts[j] = 0

    for i in range(m):
        delta = steps_sites[i] * normals[n_fixed + i]
        dlik = 0.0
        for k in range(site_ptr[i], site_ptr[i + 1]):
            c = site_clusters[k]
            v = bb_cluster_logpmf(y[c], n[c], lchoose[c], eta[c] + delta,
                                  lam_eff)
            scratch[c] = v
            dlik += v - cluster_lik[c]
        dprior = -delta * q[i] - 0.5 * delta * delta * P[i, i]
        logr = dlik + dprior
        if logr >= 0.0:
            ok = True
        else:
            ok = uniforms[n_fixed + i] < exp(logr)
        if ok:
            b[i] += delta
            for k in range(site_ptr[i], site_ptr[i + 1]):
                c = site_clusters[k]
                eta[c] += delta
                cluster_lik[c] = scratch[c]
            for r in range(m):
                q[r] += delta * P[r, i]
            total += dlik
            accepts[n_fixed + i] = 1
        else:
            accepts[n_fixed + i] = 0

    return total
