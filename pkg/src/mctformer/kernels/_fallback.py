"""Pure-numpy implementations of the hot kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature
and the same float64 semantics.  Inputs are 2-D (rows, features) for the
row-wise kernels and (B, N, N, D) for the convolution.
"""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def softmax_forward(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y, gy):
    dot = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_backward(gy, xhat, rstd, gamma):
    """Return (dx, dgamma, dbeta)."""
    dgamma = (gy * xhat).sum(axis=0)
    dbeta = gy.sum(axis=0)
    g = gy * gamma
    mg = g.mean(axis=1, keepdims=True)
    mgx = (g * xhat).mean(axis=1, keepdims=True)
    dx = (g - mg - xhat * mgx) * rstd[:, None]
    return dx, dgamma, dbeta


def gelu_forward(x):
    """Return (gelu(x), tanh term) so the backward pass can reuse the tanh."""
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return 0.5 * x * (1.0 + t), t


def gelu_backward(x, t, gy):
    dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _im2col(x):
    # x: (B, N, N, D) -> (B, N, N, 9*D), zero padding of width 1
    b, n, m, d = x.shape
    xp = np.zeros((b, n + 2, m + 2, d))
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, n, m, 9, d))
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di * 3 + dj, :] = xp[:, di:di + n, dj:dj + m, :]
    return cols.reshape(b, n, m, 9 * d)


def conv3x3_forward(x, kernels, bias):
    c = kernels.shape[0]
    cols = _im2col(x)
    w = kernels.reshape(c, -1).T
    return cols @ w + bias


def conv3x3_backward(x, kernels, gy):
    """Return (dx, dkernels, dbias) for a stride-1, pad-1 3x3 convolution."""
    b, n, m, d = x.shape
    c = kernels.shape[0]
    cols = _im2col(x).reshape(-1, 9 * d)
    g2 = gy.reshape(-1, c)
    dkernels = (g2.T @ cols).reshape(kernels.shape)
    dbias = g2.sum(axis=0)
    dcols = (g2 @ kernels.reshape(c, -1)).reshape(b, n, m, 3, 3, d)
    dxp = np.zeros((b, n + 2, m + 2, d))
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + n, dj:dj + m, :] += dcols[:, :, :, di, dj, :]
    return dxp[:, 1:-1, 1:-1, :], dkernels, dbias


def confusion_counts(pred, truth, n_labels):
    """Counts[t, p] of truth label t predicted as p, over flat int arrays."""
    idx = truth.astype(np.int64) * n_labels + pred.astype(np.int64)
    return np.bincount(idx, minlength=n_labels * n_labels).reshape(n_labels, n_labels)
