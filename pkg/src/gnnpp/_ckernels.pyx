# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled graph kernels. Signatures mirror ``_pykernels`` exactly."""

import numpy as np
from libc.math cimport exp, fabs, INFINITY
from libc.stdint cimport int64_t


def scatter_add(const double[:, ::1] values, const int64_t[::1] index, Py_ssize_t n):
    cdef Py_ssize_t E = values.shape[0], D = values.shape[1], e, k, i
    out_arr = np.zeros((n, D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for e in range(E):
        i = index[e]
        for k in range(D):
            out[i, k] += values[e, k]
    return out_arr


def segment_softmax(const double[:, ::1] scores, const int64_t[::1] index, Py_ssize_t n):
    cdef Py_ssize_t E = scores.shape[0], H = scores.shape[1], e, h, i
    mx_arr = np.full((n, H), -INFINITY, dtype=np.float64)
    den_arr = np.zeros((n, H), dtype=np.float64)
    out_arr = np.empty((E, H), dtype=np.float64)
    cdef double[:, ::1] mx = mx_arr
    cdef double[:, ::1] den = den_arr
    cdef double[:, ::1] out = out_arr
    cdef double v
    for e in range(E):
        i = index[e]
        for h in range(H):
            if scores[e, h] > mx[i, h]:
                mx[i, h] = scores[e, h]
    for e in range(E):
        i = index[e]
        for h in range(H):
            v = exp(scores[e, h] - mx[i, h])
            out[e, h] = v
            den[i, h] += v
    for e in range(E):
        i = index[e]
        for h in range(H):
            out[e, h] /= den[i, h]
    return out_arr


def segment_softmax_backward(const double[:, ::1] alpha, const double[:, ::1] grad,
                             const int64_t[::1] index, Py_ssize_t n):
    cdef Py_ssize_t E = alpha.shape[0], H = alpha.shape[1], e, h, i
    dot_arr = np.zeros((n, H), dtype=np.float64)
    out_arr = np.empty((E, H), dtype=np.float64)
    cdef double[:, ::1] dot = dot_arr
    cdef double[:, ::1] out = out_arr
    for e in range(E):
        i = index[e]
        for h in range(H):
            dot[i, h] += alpha[e, h] * grad[e, h]
    for e in range(E):
        i = index[e]
        for h in range(H):
            out[e, h] = alpha[e, h] * (grad[e, h] - dot[i, h])
    return out_arr


def gatv2_scores(const double[:, ::1] xt, const double[:, ::1] xs, const double[::1] dist,
                 const double[::1] we, const double[:, ::1] att,
                 const int64_t[::1] src, const int64_t[::1] dst, double slope):
    cdef Py_ssize_t E = src.shape[0], H = att.shape[0], C = att.shape[1], HC, e, h, c, k, i, j
    HC = H * C
    out_arr = np.empty((E, H), dtype=np.float64)
    buf_arr = np.empty(HC, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] buf = buf_arr
    cdef double z, s, d
    for e in range(E):
        i = dst[e]
        j = src[e]
        d = dist[e]
        for k in range(HC):
            z = xt[i, k] + xs[j, k] + d * we[k]
            buf[k] = z if z > 0.0 else z * slope
        for h in range(H):
            s = 0.0
            for c in range(C):
                s += att[h, c] * buf[h * C + c]
            out[e, h] = s
    return out_arr


def gatv2_scores_backward(const double[:, ::1] grad, const double[:, ::1] xt,
                          const double[:, ::1] xs, const double[::1] dist,
                          const double[::1] we, const double[:, ::1] att,
                          const int64_t[::1] src, const int64_t[::1] dst, double slope):
    cdef Py_ssize_t E = src.shape[0], H = att.shape[0], C = att.shape[1], e, h, c, k, i, j
    cdef Py_ssize_t V = xt.shape[0], VS = xs.shape[0]
    g_xt_arr = np.zeros((V, H * C), dtype=np.float64)
    g_xs_arr = np.zeros((VS, H * C), dtype=np.float64)
    g_we_arr = np.zeros(H * C, dtype=np.float64)
    g_att_arr = np.zeros((H, C), dtype=np.float64)
    cdef double[:, ::1] g_xt = g_xt_arr
    cdef double[:, ::1] g_xs = g_xs_arr
    cdef double[::1] g_we = g_we_arr
    cdef double[:, ::1] g_att = g_att_arr
    cdef double z, act, dz, g, d
    for e in range(E):
        i = dst[e]
        j = src[e]
        d = dist[e]
        for h in range(H):
            g = grad[e, h]
            if g == 0.0:
                continue
            for c in range(C):
                k = h * C + c
                z = xt[i, k] + xs[j, k] + d * we[k]
                if z < 0.0:
                    act = z * slope
                    dz = g * att[h, c] * slope
                else:
                    act = z
                    dz = g * att[h, c]
                g_att[h, c] += g * act
                g_xt[i, k] += dz
                g_xs[j, k] += dz
                g_we[k] += dz * d
    return g_xt_arr, g_xs_arr, g_we_arr, g_att_arr


def attend(const double[:, ::1] alpha, const double[:, ::1] v,
           const int64_t[::1] src, const int64_t[::1] dst, Py_ssize_t n):
    cdef Py_ssize_t E = src.shape[0], H = alpha.shape[1], HC = v.shape[1], C, e, h, c, k, i, j
    C = HC // H
    out_arr = np.zeros((n, HC), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double a
    for e in range(E):
        i = dst[e]
        j = src[e]
        for h in range(H):
            a = alpha[e, h]
            for c in range(C):
                k = h * C + c
                out[i, k] += a * v[j, k]
    return out_arr


def attend_backward(const double[:, ::1] grad, const double[:, ::1] alpha,
                    const double[:, ::1] v, const int64_t[::1] src, const int64_t[::1] dst):
    cdef Py_ssize_t E = src.shape[0], H = alpha.shape[1], HC = v.shape[1], C, e, h, c, k, i, j
    C = HC // H
    g_alpha_arr = np.zeros((E, H), dtype=np.float64)
    g_v_arr = np.zeros((v.shape[0], HC), dtype=np.float64)
    cdef double[:, ::1] g_alpha = g_alpha_arr
    cdef double[:, ::1] g_v = g_v_arr
    cdef double a, s
    for e in range(E):
        i = dst[e]
        j = src[e]
        for h in range(H):
            a = alpha[e, h]
            s = 0.0
            for c in range(C):
                k = h * C + c
                s += grad[i, k] * v[j, k]
                g_v[j, k] += a * grad[i, k]
            g_alpha[e, h] = s
    return g_alpha_arr, g_v_arr


cdef double _fsum(const double *x, Py_ssize_t n, Py_ssize_t stride):
    # Shewchuk partials with CPython's final half-even correction; finite inputs only.
    cdef double partials[128]
    cdef Py_ssize_t m = 0, i, p, q
    cdef double xv, y, t, hi, lo, yr
    for p in range(n):
        xv = x[p * stride]
        i = 0
        for q in range(m):
            y = partials[q]
            if fabs(xv) < fabs(y):
                t = xv
                xv = y
                y = t
            hi = xv + y
            lo = y - (hi - xv)
            if lo != 0.0:
                partials[i] = lo
                i += 1
            xv = hi
        m = i
        partials[m] = xv
        m += 1
    hi = 0.0
    if m > 0:
        m -= 1
        hi = partials[m]
        lo = 0.0
        while m > 0:
            xv = hi
            m -= 1
            y = partials[m]
            hi = xv + y
            yr = hi - xv
            lo = y - yr
            if lo != 0.0:
                break
        if m > 0 and ((lo < 0.0 and partials[m - 1] < 0.0) or (lo > 0.0 and partials[m - 1] > 0.0)):
            y = lo * 2.0
            xv = hi + y
            yr = xv - hi
            if y == yr:
                hi = xv
    return hi


def set_sum(const double[:, :, ::1] x):
    """Correctly rounded sum over axis 1 of a (G, N, D) array."""
    cdef Py_ssize_t G = x.shape[0], N = x.shape[1], D = x.shape[2], g, d
    out_arr = np.empty((G, D), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    if N == 0:
        out_arr[:] = 0.0
        return out_arr
    for g in range(G):
        for d in range(D):
            out[g, d] = _fsum(&x[g, 0, d], N, D)
    return out_arr
