# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; semantics match ``_fallback`` exactly (float64)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh, M_PI

cnp.import_array()

cdef double GELU_C = sqrt(2.0 / M_PI)
cdef double GELU_A = 0.044715


def softmax_forward(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        s = 1.0 / s
        for j in range(m):
            y[i, j] *= s
    return out


def softmax_backward(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] gx = out
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += y[i, j] * gy[i, j]
        for j in range(m):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def layernorm_forward(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m))
    xhat_arr = np.empty((n, m))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xh = xhat_arr
    cdef double[::1] rs = rstd_arr
    cdef double mean, var, d, r
    for i in range(n):
        mean = 0.0
        for j in range(m):
            mean += x[i, j]
        mean /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mean
            var += d * d
        var /= m
        r = 1.0 / sqrt(var + eps)
        rs[i] = r
        for j in range(m):
            xh[i, j] = (x[i, j] - mean) * r
            y[i, j] = xh[i, j] * gamma[j] + beta[j]
    return out, xhat_arr, rstd_arr


def layernorm_backward(double[:, ::1] gy, double[:, ::1] xhat, double[::1] rstd, double[::1] gamma):
    cdef Py_ssize_t n = gy.shape[0], m = gy.shape[1], i, j
    dx_arr = np.empty((n, m))
    dgamma_arr = np.zeros(m)
    dbeta_arr = np.zeros(m)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dg = dgamma_arr
    cdef double[::1] db = dbeta_arr
    cdef double mg, mgx, g
    for i in range(n):
        mg = 0.0
        mgx = 0.0
        for j in range(m):
            g = gy[i, j] * gamma[j]
            mg += g
            mgx += g * xhat[i, j]
            dg[j] += gy[i, j] * xhat[i, j]
            db[j] += gy[i, j]
        mg /= m
        mgx /= m
        for j in range(m):
            dx[i, j] = (gy[i, j] * gamma[j] - mg - xhat[i, j] * mgx) * rstd[i]
    return dx_arr, dgamma_arr, dbeta_arr


def gelu_forward(double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    t_arr = np.empty(n)
    cdef double[::1] y = out
    cdef double[::1] th = t_arr
    cdef double v
    for i in range(n):
        v = x[i]
        th[i] = tanh(GELU_C * (v + GELU_A * v * v * v))
        y[i] = 0.5 * v * (1.0 + th[i])
    return out, t_arr


def gelu_backward(double[::1] x, double[::1] th, double[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n)
    cdef double[::1] gx = out
    cdef double v, t
    for i in range(n):
        v = x[i]
        t = th[i]
        gx[i] = gy[i] * (0.5 * (1.0 + t)
                         + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
    return out


def conv3x3_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] kernels, double[::1] bias):
    cdef Py_ssize_t nb = x.shape[0], n = x.shape[1], m = x.shape[2], d = x.shape[3]
    cdef Py_ssize_t nc = kernels.shape[0]
    cdef Py_ssize_t b, i, j, c, di, dj, ii, jj, k
    out = np.empty((nb, n, m, nc))
    cdef double[:, :, :, ::1] y = out
    cdef double acc
    for b in range(nb):
        for i in range(n):
            for j in range(m):
                for c in range(nc):
                    acc = bias[c]
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= n:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= m:
                                continue
                            for k in range(d):
                                acc += x[b, ii, jj, k] * kernels[c, di, dj, k]
                    y[b, i, j, c] = acc
    return out


def conv3x3_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] kernels, double[:, :, :, ::1] gy):
    cdef Py_ssize_t nb = x.shape[0], n = x.shape[1], m = x.shape[2], d = x.shape[3]
    cdef Py_ssize_t nc = kernels.shape[0]
    cdef Py_ssize_t b, i, j, c, di, dj, ii, jj, k
    dx_arr = np.zeros((nb, n, m, d))
    dk_arr = np.zeros((nc, 3, 3, d))
    db_arr = np.zeros(nc)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double[:, :, :, ::1] dk = dk_arr
    cdef double[::1] dbias = db_arr
    cdef double g
    for b in range(nb):
        for i in range(n):
            for j in range(m):
                for c in range(nc):
                    g = gy[b, i, j, c]
                    dbias[c] += g
                    for di in range(3):
                        ii = i + di - 1
                        if ii < 0 or ii >= n:
                            continue
                        for dj in range(3):
                            jj = j + dj - 1
                            if jj < 0 or jj >= m:
                                continue
                            for k in range(d):
                                dx[b, ii, jj, k] += g * kernels[c, di, dj, k]
                                dk[c, di, dj, k] += g * x[b, ii, jj, k]
    return dx_arr, dk_arr, db_arr


def confusion_counts(pred, truth, Py_ssize_t n_labels):
    cdef cnp.int64_t[::1] p = np.ascontiguousarray(pred, dtype=np.int64).ravel()
    cdef cnp.int64_t[::1] t = np.ascontiguousarray(truth, dtype=np.int64).ravel()
    out = np.zeros((n_labels, n_labels), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] counts = out
    cdef Py_ssize_t i
    for i in range(p.shape[0]):
        counts[t[i], p[i]] += 1
    return out
