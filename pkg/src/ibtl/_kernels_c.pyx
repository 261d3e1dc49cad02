# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Mirrors ``_kernels_py`` function for function."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, isfinite, pow

cnp.import_array()


cdef void _row_probs(const double[::1] theta, const double[:, ::1] X, Py_ssize_t i,
                     Py_ssize_t K, double* z, double* lse_out) noexcept nogil:
    cdef Py_ssize_t d = X.shape[1], j, k
    cdef double zmax, s, acc
    for k in range(K):
        acc = theta[d * K + k]
        for j in range(d):
            acc += X[i, j] * theta[j * K + k]
        z[k] = acc
    zmax = z[0]
    for k in range(1, K):
        if z[k] > zmax:
            zmax = z[k]
    s = 0.0
    for k in range(K):
        z[k] = z[k] - zmax
        s += exp(z[k])
    lse_out[0] = zmax + log(s)
    for k in range(K):
        z[k] = exp(z[k]) / s


def softmax_linear_loss_grad(const double[::1] theta, const double[:, ::1] X,
                             const cnp.int64_t[::1] y, Py_ssize_t K):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], p = (d + 1) * K
    cdef Py_ssize_t i, j, k
    losses_arr = np.empty(n)
    G_arr = np.empty((n, p))
    cdef double[::1] losses = losses_arr
    cdef double[:, ::1] G = G_arr
    cdef double[::1] z = np.empty(K)
    cdef double lse, zy, dk
    with nogil:
        for i in range(n):
            zy = theta[d * K + y[i]]
            for j in range(d):
                zy += X[i, j] * theta[j * K + y[i]]
            _row_probs(theta, X, i, K, &z[0], &lse)
            losses[i] = lse - zy
            for k in range(K):
                dk = z[k] - (1.0 if k == y[i] else 0.0)
                for j in range(d):
                    G[i, j * K + k] = X[i, j] * dk
                G[i, d * K + k] = dk
    return losses_arr, G_arr


def softmax_linear_mean_grad(const double[::1] theta, const double[:, ::1] X,
                             const cnp.int64_t[::1] y, Py_ssize_t K):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], p = (d + 1) * K
    cdef Py_ssize_t i, j, k
    g_arr = np.zeros(p)
    cdef double[::1] g = g_arr
    cdef double[::1] z = np.empty(K)
    cdef double lse, zy, dk, total = 0.0, inv_n = 1.0 / n
    with nogil:
        for i in range(n):
            zy = theta[d * K + y[i]]
            for j in range(d):
                zy += X[i, j] * theta[j * K + y[i]]
            _row_probs(theta, X, i, K, &z[0], &lse)
            total += lse - zy
            for k in range(K):
                dk = z[k] - (1.0 if k == y[i] else 0.0)
                for j in range(d):
                    g[j * K + k] += X[i, j] * dk
                g[d * K + k] += dk
        for k in range(p):
            g[k] *= inv_n
    return total * inv_n, g_arr


cdef void _hvp_rows(const double[:, ::1] P, const double[:, ::1] X, const cnp.int64_t* rows,
                    Py_ssize_t m, const double* v, double* out, Py_ssize_t K,
                    double* r) noexcept nogil:
    # out <- (1/m) sum over rows of H_i v  (data term only)
    cdef Py_ssize_t d = X.shape[1], p = (d + 1) * K
    cdef Py_ssize_t a, i, j, k
    cdef double pr, inv_m = 1.0 / m
    for k in range(p):
        out[k] = 0.0
    for a in range(m):
        i = rows[a]
        for k in range(K):
            r[k] = v[d * K + k]
            for j in range(d):
                r[k] += X[i, j] * v[j * K + k]
        pr = 0.0
        for k in range(K):
            pr += P[i, k] * r[k]
        for k in range(K):
            r[k] = P[i, k] * (r[k] - pr)
            for j in range(d):
                out[j * K + k] += X[i, j] * r[k]
            out[d * K + k] += r[k]
    for k in range(p):
        out[k] *= inv_m


def _all_probs(const double[::1] theta, const double[:, ::1] X, Py_ssize_t K):
    cdef Py_ssize_t n = X.shape[0], i, k
    P_arr = np.empty((n, K))
    cdef double[:, ::1] P = P_arr
    cdef double lse
    with nogil:
        for i in range(n):
            _row_probs(theta, X, i, K, &P[i, 0], &lse)
    return P_arr


def softmax_linear_hvp(const double[::1] theta, const double[:, ::1] X,
                       const double[::1] v, Py_ssize_t K):
    cdef Py_ssize_t n = X.shape[0], p = v.shape[0]
    cdef double[:, ::1] P = _all_probs(theta, X, K)
    rows_arr = np.arange(n, dtype=np.int64)
    cdef const cnp.int64_t[::1] rows = rows_arr
    out_arr = np.empty(p)
    cdef double[::1] out = out_arr
    cdef double[::1] r = np.empty(K)
    with nogil:
        _hvp_rows(P, X, &rows[0], n, &v[0], &out[0], K, &r[0])
    return out_arr


def lissa_softmax_linear(const double[::1] theta, const double[:, ::1] X,
                         const double[::1] b, const cnp.int64_t[:, ::1] batches,
                         const double[::1] reg, double damping, double scale,
                         double blowup):
    cdef Py_ssize_t d = X.shape[1], p = b.shape[0], K = p // (d + 1)
    cdef Py_ssize_t T = batches.shape[0], B = batches.shape[1], t, k
    cdef double[:, ::1] P = _all_probs(theta, X, K)
    s_arr = np.array(b, copy=True)
    cdef double[::1] s = s_arr
    cdef double[::1] hv = np.empty(p)
    cdef double[::1] r = np.empty(K)
    cdef double nrm, inv_scale = 1.0 / scale, lim = blowup * blowup
    cdef Py_ssize_t fail = -1
    with nogil:
        for t in range(T):
            _hvp_rows(P, X, &batches[t, 0], B, &s[0], &hv[0], K, &r[0])
            nrm = 0.0
            for k in range(p):
                s[k] = b[k] + s[k] - (hv[k] + (reg[k] + damping) * s[k]) * inv_scale
                nrm += s[k] * s[k]
            if not isfinite(nrm) or nrm > lim:
                fail = t
                break
    return s_arr, fail


def adam_step(double[::1] theta, const double[::1] g, double[::1] m, double[::1] v,
              double lr, double beta1, double beta2, double eps, cnp.int64_t t,
              const double[::1] mask):
    cdef Py_ssize_t i, n = theta.shape[0]
    cdef double c1 = 1.0 - pow(beta1, <double>t), c2 = 1.0 - pow(beta2, <double>t)
    with nogil:
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            if mask[i] != 0.0:
                theta[i] -= lr * (m[i] / c1) / (sqrt(v[i] / c2) + eps)
