# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels for the latent-field samplers.

This file mirrors _reference.py statement for statement; both call the
same libm routines in the same order (the extension is built with
-ffp-contract=off), so the two backends produce bit-identical chains.
Any change here must be replicated in _reference.py.
"""

from libc.math cimport exp, log, log1p
from libc.stdint cimport int64_t

cdef double NEG_INF = float("-inf")


cdef inline double _expit(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _log_expit(double x) noexcept nogil:
    if x >= 0.0:
        return -log1p(exp(-x))
    return x - log1p(exp(x))


cdef double _bb_cluster_logpmf(int64_t y, int64_t n, double lchoose,
                               double eta, double lam) noexcept nogil:
    cdef double p, omp, f, a, b, ab, s
    cdef int64_t j
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


def bb_cluster_logpmf(y, n, lchoose, eta, lam):
    """Log pmf of one cluster's count (binomial when lam == 0)."""
    return _bb_cluster_logpmf(y, n, lchoose, eta, lam)


def fill_cluster_loglik(int lik_type, double lam,
                        int64_t[::1] y, int64_t[::1] n,
                        double[::1] lchoose, double[::1] eta,
                        double[::1] out):
    """Per-cluster log likelihood into `out`; returns the total."""
    cdef double total = 0.0
    cdef double lam_eff = lam if lik_type == 1 else 0.0
    cdef Py_ssize_t c
    cdef double v
    for c in range(y.shape[0]):
        v = _bb_cluster_logpmf(y[c], n[c], lchoose[c], eta[c], lam_eff)
        out[c] = v
        total += v
    return total


def field_iteration(int lik_type, double lam,
                    int64_t[::1] y, int64_t[::1] n,
                    double[::1] lchoose, double[::1] eta,
                    double[::1] cluster_lik, double[::1] scratch,
                    double[:, ::1] covars, double[::1] theta_fixed,
                    double prior_prec_fixed,
                    int64_t[::1] site_ptr, int64_t[::1] site_clusters,
                    double[::1] b, double[:, ::1] P, double[::1] q,
                    double[::1] steps_fixed, double[::1] steps_sites,
                    double[::1] normals, double[::1] uniforms,
                    int64_t[::1] accepts, double total):
    """One Metropolis-within-Gibbs pass over fixed effects and latent
    sites; see the reference implementation for the full contract."""
    cdef double lam_eff = lam if lik_type == 1 else 0.0
    cdef Py_ssize_t n_fixed = theta_fixed.shape[0]
    cdef Py_ssize_t n_clusters = y.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    cdef Py_ssize_t j, c, i, r
    cdef int64_t k
    cdef double delta, new_total, t_old, t_new, logr, v, dlik, dprior
    cdef bint ok

    for j in range(n_fixed):
        delta = steps_fixed[j] * normals[j]
        new_total = 0.0
        for c in range(n_clusters):
            v = _bb_cluster_logpmf(y[c], n[c], lchoose[c],
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
            v = _bb_cluster_logpmf(y[c], n[c], lchoose[c], eta[c] + delta,
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
