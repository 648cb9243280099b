"""Pure-numpy implementations of the convolution hot kernels.

The forward pass lowers the 3x3 convolution to one im2col GEMM per call so
BLAS does the arithmetic; the column matrix is kept as the backward context
because the weight gradient is a single GEMM against it.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _pad1(x):
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:h + 1, 1:w + 1, :] = x
    return xp


def _im2col(xp, h, w):
    b = xp.shape[0]
    c = xp.shape[3]
    s = xp.strides
    win = as_strided(xp, shape=(b, h, w, 3, 3, c),
                     strides=(s[0], s[1], s[2], s[1], s[2], s[3]))
    return win.reshape(b * h * w, 9 * c)  # forces the copy


def conv3x3_forward(x, w):
    b, h, ww, ci = x.shape
    co = w.shape[3]
    col = _im2col(_pad1(x), h, ww)
    y = col @ w.reshape(9 * ci, co)
    return y.reshape(b, h, ww, co), col


def silu_forward(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def silu_backward(g, x, sig):
    return g * (sig * (1.0 + x * (1.0 - sig)))


def layernorm_forward(x2, gain, bias, eps):
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1) + eps)
    xhat = xc * inv[:, None]
    return xhat * gain + bias, xhat, inv


def layernorm_backward(g2, xhat, inv, gain):
    gy = g2 * gain
    m1 = gy.mean(axis=1, keepdims=True)
    m2 = (gy * xhat).mean(axis=1, keepdims=True)
    return (gy - m1 - xhat * m2) * inv[:, None]


def conv3x3_backward(ctx, x, w, gy, need_gx, need_gw):
    b, h, ww, ci = x.shape
    co = w.shape[3]
    col = ctx if ctx is not None else _im2col(_pad1(x), h, ww)
    g2 = gy.reshape(b * h * ww, co)
    gw = gxv = None
    if need_gw:
        gw = (col.T @ g2).reshape(3, 3, ci, co)
    if need_gx:
        dcol = (g2 @ w.reshape(9 * ci, co).T).reshape(b, h, ww, 3, 3, ci)
        gxp = np.zeros((b, h + 2, ww + 2, ci), dtype=gy.dtype)
        for ky in range(3):
            for kx in range(3):
                gxp[:, ky:ky + h, kx:kx + ww, :] += dcol[:, :, :, ky, kx, :]
        gxv = np.ascontiguousarray(gxp[:, 1:h + 1, 1:ww + 1, :])
    return gxv, gw
