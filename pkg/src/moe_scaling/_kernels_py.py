"""Pure-numpy twin of ``_kernels.pyx``; same signatures, same layout."""

import numpy as np


def _ehat_parts(experts, es, em):
    k = 1.0 / (1.0 / es - 1.0 / em)
    q = experts - 1.0 + k
    u = 1.0 / q + 1.0 / em
    du_des = -(k * k) / (q * q * es * es)
    du_dem = ((k * k) / (q * q) - 1.0) / (em * em)
    h = -np.log(u)
    return h, -(du_des + du_dem) * es / u, -du_dem * (em - es) / u


def _terms(theta, log_n, log_d, h):
    t1 = theta[0] + theta[2] * h + (theta[1] + theta[3] * h) * log_n
    t2 = theta[4] + theta[6] * h + (theta[5] + theta[7] * h) * log_d
    t3 = np.full_like(t1, theta[8])
    return t1, t2, t3


def predict(theta, log_n, log_d, experts, out):
    es = np.exp(theta[9])
    em = es + np.exp(theta[10])
    h, _, _ = _ehat_parts(experts, es, em)
    t1, t2, t3 = _terms(theta, log_n, log_d, h)
    out[:] = np.logaddexp(np.logaddexp(t1, t2), t3)


def objective_grad(theta, log_n, log_d, experts, log_loss, weights, delta, grad):
    es = np.exp(theta[9])
    em = es + np.exp(theta[10])
    h, dh_ls, dh_lg = _ehat_parts(experts, es, em)
    t1, t2, t3 = _terms(theta, log_n, log_d, h)
    mx = np.maximum(t1, np.maximum(t2, t3))
    e1, e2, e3 = np.exp(t1 - mx), np.exp(t2 - mx), np.exp(t3 - mx)
    z = e1 + e2 + e3
    r = mx + np.log(z) - log_loss
    ar = np.abs(r)
    quad = ar <= delta
    total = np.sum(weights * np.where(quad, 0.5 * r * r, delta * (ar - 0.5 * delta)))
    psi = weights * np.where(quad, r, delta * np.sign(r))
    s1, s2, s3 = psi * e1 / z, psi * e2 / z, psi * e3 / z
    dp_dh = s1 * (theta[2] + theta[3] * log_n) + s2 * (theta[6] + theta[7] * log_d)
    grad[:] = (
        s1.sum(),
        (s1 * log_n).sum(),
        (s1 * h).sum(),
        (s1 * h * log_n).sum(),
        s2.sum(),
        (s2 * log_d).sum(),
        (s2 * h).sum(),
        (s2 * h * log_d).sum(),
        s3.sum(),
        (dp_dh * dh_ls).sum(),
        (dp_dh * dh_lg).sum(),
    )
    return float(total)
