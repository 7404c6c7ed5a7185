# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled log-space loss kernels for the fitting hot loop.

Parameter vector layout (length 11):
    log a, alpha, delta, gamma, log b, beta, omega, zeta, log c,
    log e_start, log(e_max - e_start)
"""

from libc.math cimport exp, log, fabs, fmax

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF NPARAM = 11
DEF CACHE = 16


cdef struct EhatCache:
    int size
    double e[CACHE]
    double h[CACHE]
    double dls[CACHE]
    double dlg[CACHE]


cdef inline void _ehat_parts(double e, double es, double em, double* h, double* dh_dls, double* dh_dlg) noexcept nogil:
    cdef double k = 1.0 / (1.0 / es - 1.0 / em)
    cdef double q = e - 1.0 + k
    cdef double u = 1.0 / q + 1.0 / em
    cdef double du_des = -(k * k) / (q * q * es * es)
    cdef double du_dem = ((k * k) / (q * q) - 1.0) / (em * em)
    h[0] = -log(u)
    dh_dls[0] = -(du_des * es + du_dem * es) / u
    dh_dlg[0] = -(du_dem * (em - es)) / u


cdef inline void _ehat_cached(EhatCache* c, double e, double es, double em,
                              double* h, double* dls, double* dlg) noexcept nogil:
    # Datasets hold a handful of distinct expert counts; remember them.
    cdef int k
    for k in range(c.size):
        if c.e[k] == e:
            h[0] = c.h[k]
            dls[0] = c.dls[k]
            dlg[0] = c.dlg[k]
            return
    _ehat_parts(e, es, em, h, dls, dlg)
    if c.size < CACHE:
        k = c.size
        c.e[k] = e
        c.h[k] = h[0]
        c.dls[k] = dls[0]
        c.dlg[k] = dlg[0]
        c.size += 1


cdef inline double _lse3(double t1, double t2, double t3, double* e1, double* e2, double* e3) noexcept nogil:
    """Shifted exponentials of the three terms and ``log(sum)`` relative to their max."""
    cdef double mx = fmax(t1, fmax(t2, t3))
    e1[0] = 1.0 if t1 == mx else exp(t1 - mx)
    e2[0] = 1.0 if t2 == mx else exp(t2 - mx)
    e3[0] = 1.0 if t3 == mx else exp(t3 - mx)
    return mx


def predict(double[::1] theta, double[::1] log_n, double[::1] log_d,
            double[::1] experts, double[::1] out):
    cdef Py_ssize_t i, n = log_n.shape[0]
    cdef double es = exp(theta[9])
    cdef double em = es + exp(theta[10])
    cdef double h, a1, a2, t1, t2, mx, e1, e2, e3
    cdef EhatCache cache
    cache.size = 0
    with nogil:
        for i in range(n):
            _ehat_cached(&cache, experts[i], es, em, &h, &a1, &a2)
            t1 = theta[0] + theta[2] * h + (theta[1] + theta[3] * h) * log_n[i]
            t2 = theta[4] + theta[6] * h + (theta[5] + theta[7] * h) * log_d[i]
            mx = _lse3(t1, t2, theta[8], &e1, &e2, &e3)
            out[i] = mx + log(e1 + e2 + e3)


def objective_grad(double[::1] theta, double[::1] log_n, double[::1] log_d,
                   double[::1] experts, double[::1] log_loss, double[::1] weights,
                   double delta, double[::1] grad):
    """Weighted Huber data term; writes its gradient into ``grad``."""
    cdef Py_ssize_t i, j, n = log_n.shape[0]
    cdef double es = exp(theta[9])
    cdef double em = es + exp(theta[10])
    cdef double h, dh_ls, dh_lg, t1, t2, mx, e1, e2, e3, z, s1, s2, s3
    cdef double r, ar, psi, total = 0.0, dp_dh
    cdef double g[NPARAM]
    cdef EhatCache cache
    cache.size = 0
    for j in range(NPARAM):
        g[j] = 0.0
    with nogil:
        for i in range(n):
            _ehat_cached(&cache, experts[i], es, em, &h, &dh_ls, &dh_lg)
            t1 = theta[0] + theta[2] * h + (theta[1] + theta[3] * h) * log_n[i]
            t2 = theta[4] + theta[6] * h + (theta[5] + theta[7] * h) * log_d[i]
            mx = _lse3(t1, t2, theta[8], &e1, &e2, &e3)
            z = e1 + e2 + e3
            r = mx + log(z) - log_loss[i]
            ar = fabs(r)
            if ar <= delta:
                total += weights[i] * 0.5 * r * r
                psi = weights[i] * r
            else:
                total += weights[i] * delta * (ar - 0.5 * delta)
                psi = weights[i] * delta * (1.0 if r > 0 else -1.0)
            s1 = psi * e1 / z
            s2 = psi * e2 / z
            s3 = psi * e3 / z
            g[0] += s1
            g[1] += s1 * log_n[i]
            g[2] += s1 * h
            g[3] += s1 * h * log_n[i]
            g[4] += s2
            g[5] += s2 * log_d[i]
            g[6] += s2 * h
            g[7] += s2 * h * log_d[i]
            g[8] += s3
            dp_dh = s1 * (theta[2] + theta[3] * log_n[i]) + s2 * (theta[6] + theta[7] * log_d[i])
            g[9] += dp_dh * dh_ls
            g[10] += dp_dh * dh_lg
    for j in range(NPARAM):
        grad[j] = g[j]
    return total
