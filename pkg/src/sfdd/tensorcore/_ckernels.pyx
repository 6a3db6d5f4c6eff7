# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Same contract as ``_pykernels``."""

import numpy as np
cimport cython

ctypedef fused real:
    float
    double


def im2col3x3(const real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c * 9, h * w), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, ch, y, xx, ky, kx, row, sy, sx, x0, x1
    with nogil:
        for i in range(n):
            for ch in range(c):
                for ky in range(3):
                    for kx in range(3):
                        row = ch * 9 + ky * 3 + kx
                        # valid output columns for this horizontal shift
                        x0 = 1 if kx == 0 else 0
                        x1 = w - 1 if kx == 2 else w
                        for y in range(h):
                            sy = y + ky - 1
                            if sy < 0 or sy >= h:
                                for xx in range(w):
                                    out[i, row, y * w + xx] = 0
                                continue
                            if x0 == 1:
                                out[i, row, y * w] = 0
                            if x1 == w - 1:
                                out[i, row, y * w + w - 1] = 0
                            for xx in range(x0, x1):
                                out[i, row, y * w + xx] = x[i, ch, sy, xx + kx - 1]
    return out_arr


def avgpool2x2(const real[:, :, :, :] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h2 = x.shape[2] // 2, w2 = x.shape[3] // 2
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, h2, w2), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, ch, y, xx
    cdef real q = 0.25
    with nogil:
        for i in range(n):
            for ch in range(c):
                for y in range(h2):
                    for xx in range(w2):
                        out[i, ch, y, xx] = (x[i, ch, 2 * y, 2 * xx] + x[i, ch, 2 * y, 2 * xx + 1]
                                             + x[i, ch, 2 * y + 1, 2 * xx] + x[i, ch, 2 * y + 1, 2 * xx + 1]) * q
    return out_arr


def avgpool2x2_adjoint(const real[:, :, :, :] g, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], h2 = g.shape[2], w2 = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, ch, y, xx
    cdef real v
    with nogil:
        for i in range(n):
            for ch in range(c):
                for y in range(h2):
                    for xx in range(w2):
                        v = g[i, ch, y, xx] * 0.25
                        out[i, ch, 2 * y, 2 * xx] = v
                        out[i, ch, 2 * y, 2 * xx + 1] = v
                        out[i, ch, 2 * y + 1, 2 * xx] = v
                        out[i, ch, 2 * y + 1, 2 * xx + 1] = v
    return out_arr


from libc.math cimport sqrt


def instance_norm_fwd(const real[:, :, :, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, c, h, w), dtype=dtype)
    inv_arr = np.empty((n, c, 1, 1), dtype=dtype)
    cdef real[:, :, :, ::1] y = y_arr
    cdef real[:, :, :, ::1] inv = inv_arr
    cdef Py_ssize_t i, ch, a, b
    cdef double s, mu, d, hw = h * w
    cdef real mu_r, iv
    with nogil:
        for i in range(n):
            for ch in range(c):
                s = 0
                for a in range(h):
                    for b in range(w):
                        s = s + x[i, ch, a, b]
                mu_r = <real>(s / hw)
                s = 0
                for a in range(h):
                    for b in range(w):
                        d = <double>(x[i, ch, a, b] - mu_r)
                        s = s + d * d
                iv = <real>(1.0 / sqrt(s / hw + eps))
                inv[i, ch, 0, 0] = iv
                for a in range(h):
                    for b in range(w):
                        y[i, ch, a, b] = (x[i, ch, a, b] - mu_r) * iv
    return y_arr, inv_arr


def instance_norm_bwd(const real[:, :, :, ::1] g, const real[:, :, :, ::1] y, const real[:, :, :, ::1] inv):
    cdef Py_ssize_t n = g.shape[0], c = g.shape[1], h = g.shape[2], w = g.shape[3]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, ch, a, b
    cdef double sg, sgy, hw = h * w
    cdef real gm, gy, iv
    with nogil:
        for i in range(n):
            for ch in range(c):
                sg = 0
                sgy = 0
                for a in range(h):
                    for b in range(w):
                        sg = sg + g[i, ch, a, b]
                        sgy = sgy + <double>g[i, ch, a, b] * <double>y[i, ch, a, b]
                gm = <real>(sg / hw)
                gy = <real>(sgy / hw)
                iv = inv[i, ch, 0, 0]
                for a in range(h):
                    for b in range(w):
                        out[i, ch, a, b] = (g[i, ch, a, b] - gm - y[i, ch, a, b] * gy) * iv
    return out_arr
