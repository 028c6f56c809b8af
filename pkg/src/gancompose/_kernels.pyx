# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the synthesis networks.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``gancompose.kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef _edge_pad(const double[:, :, ::1] x):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t c, i, j, si, sj
    xp_arr = np.empty((C, H + 2, W + 2), dtype=np.float64)
    cdef double[:, :, ::1] xp = xp_arr
    for c in range(C):
        for i in range(H + 2):
            si = i - 1
            if si < 0:
                si = 0
            elif si >= H:
                si = H - 1
            for j in range(W + 2):
                sj = j - 1
                if sj < 0:
                    sj = 0
                elif sj >= W:
                    sj = W - 1
                xp[c, i, j] = x[c, si, sj]
    return xp_arr


cdef void _fold_pad(double[:, :, ::1] gp, double[:, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t C = out.shape[0], H = out.shape[1], W = out.shape[2]
    cdef Py_ssize_t c, i, j
    for c in range(C):
        for j in range(W + 2):
            gp[c, 1, j] += gp[c, 0, j]
            gp[c, H, j] += gp[c, H + 1, j]
        for i in range(1, H + 1):
            gp[c, i, 1] += gp[c, i, 0]
            gp[c, i, W] += gp[c, i, W + 1]
        for i in range(H):
            for j in range(W):
                out[c, i, j] = gp[c, i + 1, j + 1]


def dwconv3x3(const double[:, :, ::1] x, const double[:, :, ::1] k):
    """Per-channel 3x3 correlation with edge-replicated borders."""
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t c, i, j
    cdef double[:, :, ::1] xp = _edge_pad(x)
    out = np.empty((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    _dw(xp, k, o)
    return out


cdef void _dw(const double[:, :, ::1] xp, const double[:, :, ::1] k,
              double[:, :, ::1] o) noexcept nogil:
    cdef Py_ssize_t C = o.shape[0], H = o.shape[1], W = o.shape[2]
    cdef Py_ssize_t c, i, j
    cdef double k00, k01, k02, k10, k11, k12, k20, k21, k22
    for c in range(C):
        k00 = k[c, 0, 0]; k01 = k[c, 0, 1]; k02 = k[c, 0, 2]
        k10 = k[c, 1, 0]; k11 = k[c, 1, 1]; k12 = k[c, 1, 2]
        k20 = k[c, 2, 0]; k21 = k[c, 2, 1]; k22 = k[c, 2, 2]
        for i in range(H):
            for j in range(W):
                o[c, i, j] = (k00 * xp[c, i, j] + k01 * xp[c, i, j + 1] + k02 * xp[c, i, j + 2]
                              + k10 * xp[c, i + 1, j] + k11 * xp[c, i + 1, j + 1]
                              + k12 * xp[c, i + 1, j + 2]
                              + k20 * xp[c, i + 2, j] + k21 * xp[c, i + 2, j + 1]
                              + k22 * xp[c, i + 2, j + 2])


cdef void _dw_adjoint(const double[:, :, ::1] g, const double[:, :, ::1] k,
                      double[:, :, ::1] gp) noexcept nogil:
    cdef Py_ssize_t C = g.shape[0], H = g.shape[1], W = g.shape[2]
    cdef Py_ssize_t c, i, j, di, dj
    cdef double gv
    for c in range(C):
        for di in range(3):
            for dj in range(3):
                gv = k[c, di, dj]
                for i in range(H):
                    for j in range(W):
                        gp[c, i + di, j + dj] += gv * g[c, i, j]


def dwconv3x3_backward(const double[:, :, ::1] g, const double[:, :, ::1] k):
    """Adjoint of :func:`dwconv3x3` with respect to its input."""
    cdef Py_ssize_t C = g.shape[0], H = g.shape[1], W = g.shape[2]
    gp_arr = np.zeros((C, H + 2, W + 2), dtype=np.float64)
    out = np.empty((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] gp = gp_arr
    cdef double[:, :, ::1] o = out
    _dw_adjoint(g, k, gp)
    _fold_pad(gp, o)
    return out


def smooth_leaky(const double[::1] x, double slope):
    """Return (y, dy/dx) for y = slope*x + (1-slope)*(x + sqrt(x*x + 1) - 1)/2."""
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, r, a = 0.5 * (1.0 - slope)
    y = np.empty(n, dtype=np.float64)
    d = np.empty(n, dtype=np.float64)
    cdef double[::1] yv = y
    cdef double[::1] dv = d
    for i in range(n):
        v = x[i]
        r = sqrt(v * v + 1.0)
        yv[i] = slope * v + a * (v + r - 1.0)
        dv[i] = slope + a * (1.0 + v / r)
    return y, d


def modconv_forward(const double[:, :, ::1] x, const double[::1] scale,
                    const double[::1] shift, const double[:, :, ::1] k,
                    const double[:, :, ::1] field, const double[:, ::1] mix,
                    const double[:, :, ::1] bias, double gain, double slope):
    """Fused modulate, depthwise 3x3, channel mix, bias and activation.

    ``field`` is the depthwise-filtered shift pattern, so the modulated input
    ``x * scale + shift * pattern`` filters to ``scale * dw(x) + shift * field``.
    Returns the activation and its derivative (both already scaled by gain).
    """
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t c, o, i, j
    cdef double v, r, a = 0.5 * (1.0 - slope)
    tmp = np.empty((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] t = tmp
    _dw(_edge_pad(x), k, t)
    for c in range(C):
        for i in range(H):
            for j in range(W):
                t[c, i, j] = scale[c] * t[c, i, j] + shift[c] * field[c, i, j]
    y = np.empty((mix.shape[0], H, W), dtype=np.float64)
    d = np.empty((mix.shape[0], H, W), dtype=np.float64)
    cdef double[:, :, ::1] yv = y
    cdef double[:, :, ::1] dv = d
    cdef double mc
    for o in range(mix.shape[0]):
        for i in range(H):
            for j in range(W):
                yv[o, i, j] = bias[o, i, j]
        for c in range(C):
            mc = mix[o, c]
            for i in range(H):
                for j in range(W):
                    yv[o, i, j] = yv[o, i, j] + mc * t[c, i, j]
        for i in range(H):
            for j in range(W):
                v = yv[o, i, j]
                r = sqrt(v * v + 1.0)
                yv[o, i, j] = gain * (slope * v + a * (v + r - 1.0))
                dv[o, i, j] = gain * (slope + a * (1.0 + v / r))
    return y, d


def modconv_backward(const double[:, :, ::1] g, const double[:, :, ::1] x,
                     const double[::1] scale, const double[:, :, ::1] k,
                     const double[:, :, ::1] field, const double[:, ::1] mix,
                     const double[:, :, ::1] d):
    """Gradients of :func:`modconv_forward` w.r.t. x, scale and shift."""
    cdef Py_ssize_t O = g.shape[0], H = g.shape[1], W = g.shape[2]
    cdef Py_ssize_t C = x.shape[0]
    cdef Py_ssize_t c, o, i, j
    gt_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] gt = gt_arr
    cdef double mc
    for o in range(O):
        for c in range(C):
            mc = mix[o, c]
            for i in range(H):
                for j in range(W):
                    gt[c, i, j] = gt[c, i, j] + mc * g[o, i, j] * d[o, i, j]
    gp_arr = np.zeros((C, H + 2, W + 2), dtype=np.float64)
    gx_arr = np.empty((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] gp = gp_arr
    cdef double[:, :, ::1] gx = gx_arr
    _dw_adjoint(gt, k, gp)
    _fold_pad(gp, gx)
    gscale_arr = np.zeros(C, dtype=np.float64)
    gshift_arr = np.zeros(C, dtype=np.float64)
    cdef double[::1] gsc = gscale_arr
    cdef double[::1] gsh = gshift_arr
    cdef double acc, tot
    for c in range(C):
        tot = 0.0
        acc = 0.0
        for i in range(H):
            for j in range(W):
                tot = tot + gt[c, i, j] * field[c, i, j]
                acc = acc + gx[c, i, j] * x[c, i, j]
                gx[c, i, j] = gx[c, i, j] * scale[c]
        gsh[c] = tot
        gsc[c] = acc
    return gx_arr, gscale_arr, gshift_arr
