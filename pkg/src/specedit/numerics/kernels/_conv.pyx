# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Channels-last 3x3 convolution and layer-norm hot kernels.

Parallel loops split only over disjoint output slices and every output
element is accumulated by exactly one thread in a fixed order, so results
are bit-reproducible run to run regardless of scheduling.

The per-row work lives in cdef helper functions: their stack accumulators
are genuinely thread-private (a local C array in a prange body would be
shared between OpenMP threads), and processing four output pixels at once
gives the compiler independent fused-multiply-add chains to hide latency.
"""

from cython.parallel import prange

from libc.math cimport sqrt

ctypedef fused real:
    float
    double

DEF MAXC = 64  # channel-count ceiling for stack accumulators


cdef void _fwd_row(const real *xr0, const real *xr1, const real *xr2,
                   const real *w, real *orow,
                   Py_ssize_t W, Py_ssize_t CI, Py_ssize_t CO) noexcept nogil:
    """One output row: out[x, co] = sum over (ky, kx, ci) taps."""
    cdef Py_ssize_t x, ky, j, co, p, nci = 3 * CI, wb = W - (W % 4)
    cdef real v0, v1, v2, v3, val
    cdef real acc[4][MAXC]
    cdef const real *xr
    cdef const real *wrow
    for x in range(0, wb, 4):
        for p in range(4):
            for co in range(CO):
                acc[p][co] = 0
        for ky in range(3):
            xr = xr0 if ky == 0 else (xr1 if ky == 1 else xr2)
            xr = xr + x * CI
            for j in range(nci):
                v0 = xr[j]
                v1 = xr[j + CI]
                v2 = xr[j + 2 * CI]
                v3 = xr[j + 3 * CI]
                wrow = w + (ky * nci + j) * CO
                for co in range(CO):
                    acc[0][co] += v0 * wrow[co]
                    acc[1][co] += v1 * wrow[co]
                    acc[2][co] += v2 * wrow[co]
                    acc[3][co] += v3 * wrow[co]
        for p in range(4):
            for co in range(CO):
                orow[(x + p) * CO + co] = acc[p][co]
    for x in range(wb, W):  # tail when W is not a multiple of 4
        for co in range(CO):
            acc[0][co] = 0
        for ky in range(3):
            xr = xr0 if ky == 0 else (xr1 if ky == 1 else xr2)
            xr = xr + x * CI
            for j in range(nci):
                val = xr[j]
                if val != 0:
                    wrow = w + (ky * nci + j) * CO
                    for co in range(CO):
                        acc[0][co] += val * wrow[co]
        for co in range(CO):
            orow[x * CO + co] = acc[0][co]


def forward(real[:, :, :, ::1] xp, real[:, :, :, ::1] w, real[:, :, :, ::1] out):
    """out[b,y,x,co] = sum over ky,kx,ci of xp[b,y+ky,x+kx,ci] * w[ky,kx,ci,co].

    xp is the zero-padded input (B, H+2, W+2, Ci). Also serves as the
    input-gradient kernel when fed flipped/transposed weights.
    """
    cdef Py_ssize_t B = out.shape[0], H = out.shape[1], W = out.shape[2]
    cdef Py_ssize_t CO = out.shape[3], CI = w.shape[2]
    cdef Py_ssize_t idx, b, y
    if CO > MAXC:
        raise ValueError("channel count exceeds compiled kernel limit")
    for idx in prange(B * H, nogil=True, schedule='static'):
        b = idx / H
        y = idx - b * H
        _fwd_row(&xp[b, y, 0, 0], &xp[b, y + 1, 0, 0], &xp[b, y + 2, 0, 0],
                 &w[0, 0, 0, 0], &out[b, y, 0, 0], W, CI, CO)


cdef void _gw_row(const real *xr0, const real *xr1, const real *xr2,
                  const real *grow, real *part,
                  Py_ssize_t W, Py_ssize_t CI, Py_ssize_t CO) noexcept nogil:
    """Accumulate one (b, y) row into a weight-gradient partial buffer."""
    cdef Py_ssize_t x, ky, j, co, nci = 3 * CI, wb = W - (W % 4)
    cdef real v0, v1, v2, v3, val
    cdef const real *xr
    cdef const real *g0
    cdef real *wrow
    for x in range(0, wb, 4):
        g0 = grow + x * CO
        for ky in range(3):
            xr = xr0 if ky == 0 else (xr1 if ky == 1 else xr2)
            xr = xr + x * CI
            for j in range(nci):
                v0 = xr[j]
                v1 = xr[j + CI]
                v2 = xr[j + 2 * CI]
                v3 = xr[j + 3 * CI]
                wrow = part + (ky * nci + j) * CO
                for co in range(CO):
                    wrow[co] += (v0 * g0[co] + v1 * g0[CO + co]
                                 + v2 * g0[2 * CO + co] + v3 * g0[3 * CO + co])
    for x in range(wb, W):
        g0 = grow + x * CO
        for ky in range(3):
            xr = xr0 if ky == 0 else (xr1 if ky == 1 else xr2)
            xr = xr + x * CI
            for j in range(nci):
                val = xr[j]
                if val != 0:
                    wrow = part + (ky * nci + j) * CO
                    for co in range(CO):
                        wrow[co] += val * g0[co]


def grad_weight(real[:, :, :, ::1] xp, real[:, :, :, ::1] gy,
                real[:, :, :, :, ::1] gw_parts, real[:, :, :, ::1] gw):
    """Weight gradient via per-slot partial buffers reduced in fixed order.

    gw_parts is (nparts, 3, 3, Ci, Co) zero-filled scratch; batch items are
    assigned round-robin to slots so the final sequential reduction is
    deterministic no matter how threads were scheduled.
    """
    cdef Py_ssize_t B = gy.shape[0], H = gy.shape[1], W = gy.shape[2]
    cdef Py_ssize_t CO = gy.shape[3], CI = xp.shape[3]
    cdef Py_ssize_t NP = gw_parts.shape[0]
    cdef Py_ssize_t part, nb, bi, b, y, i, n = 9 * CI * CO
    cdef real *dst
    cdef const real *src
    for part in prange(NP, nogil=True, schedule='static'):
        nb = (B - part + NP - 1) / NP
        for bi in range(nb):
            b = part + bi * NP
            for y in range(H):
                _gw_row(&xp[b, y, 0, 0], &xp[b, y + 1, 0, 0], &xp[b, y + 2, 0, 0],
                        &gy[b, y, 0, 0], &gw_parts[part, 0, 0, 0, 0], W, CI, CO)
    dst = &gw[0, 0, 0, 0]
    for part in range(NP):
        src = &gw_parts[part, 0, 0, 0, 0]
        for i in range(n):
            dst[i] += src[i]


cdef void _ln_fwd_row(const real *x, const real *g, const real *b, real *y,
                      real *xhat, real *inv, Py_ssize_t C, double eps) noexcept nogil:
    cdef Py_ssize_t c
    cdef real mu = 0, var = 0, d, iv
    for c in range(C):
        mu += x[c]
    mu = mu / C
    for c in range(C):
        d = x[c] - mu
        var += d * d
    iv = <real> (1.0 / sqrt(var / C + eps))
    inv[0] = iv
    for c in range(C):
        d = (x[c] - mu) * iv
        xhat[c] = d
        y[c] = d * g[c] + b[c]


def layernorm_forward(real[:, ::1] x, real[::1] gain, real[::1] bias,
                      real[:, ::1] y, real[:, ::1] xhat, real[::1] inv, double eps):
    """Row-wise layer norm over the last axis of a (N, C) view."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], i
    for i in prange(N, nogil=True, schedule='static'):
        _ln_fwd_row(&x[i, 0], &gain[0], &bias[0], &y[i, 0], &xhat[i, 0], &inv[i], C, eps)


cdef void _ln_bwd_row(const real *g, const real *xhat, real iv, const real *gain,
                      real *gx, Py_ssize_t C) noexcept nogil:
    cdef Py_ssize_t c
    cdef real m1 = 0, m2 = 0, gyv
    for c in range(C):
        gyv = g[c] * gain[c]
        m1 += gyv
        m2 += gyv * xhat[c]
    m1 = m1 / C
    m2 = m2 / C
    for c in range(C):
        gx[c] = (g[c] * gain[c] - m1 - xhat[c] * m2) * iv


def layernorm_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] inv,
                       real[::1] gain, real[:, ::1] gx):
    """Input gradient rows; gain/bias gradients are cheap reductions in numpy."""
    cdef Py_ssize_t N = g.shape[0], C = g.shape[1], i
    for i in prange(N, nogil=True, schedule='static'):
        _ln_bwd_row(&g[i, 0], &xhat[i, 0], inv[i], &gain[0], &gx[i, 0], C)
