# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

cnp.import_array()

cdef double SQRT_2_OVER_PI = 0.7978845608028654
cdef double GELU_C = 0.044715
cdef double MASK_FILL = -1e30


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gain,
                   const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    xhat = np.empty((n, d), dtype=np.float64)
    rstd = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[:, ::1] xh = xhat
    cdef double[::1] rs = rstd
    cdef double mean, var, r, v
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                v = x[i, j] - mean
                var += v * v
            var /= d
            r = 1.0 / sqrt(var + eps)
            rs[i] = r
            for j in range(d):
                v = (x[i, j] - mean) * r
                xh[i, j] = v
                o[i, j] = v * gain[j] + bias[j]
    return out, xhat, rstd


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    gx = np.empty((n, d), dtype=np.float64)
    ggain = np.zeros(d, dtype=np.float64)
    gbias = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gxv = gx
    cdef double[::1] gg = ggain
    cdef double[::1] gb = gbias
    cdef double s1, s2, gh
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                gh = g[i, j] * gain[j]
                s1 += gh
                s2 += gh * xhat[i, j]
                gg[j] += g[i, j] * xhat[i, j]
                gb[j] += g[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                gh = g[i, j] * gain[j]
                gxv[i, j] = rstd[i] * (gh - s1 - xhat[i, j] * s2)
    return gx, ggain, gbias


def softmax_fwd(const double[:, ::1] x, const unsigned char[:, ::1] valid):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double m, s, e
    cdef int any_valid
    with nogil:
        for i in range(n):
            m = MASK_FILL
            any_valid = 0
            for j in range(d):
                if valid[i, j]:
                    any_valid = 1
                    if x[i, j] > m:
                        m = x[i, j]
            if not any_valid:
                continue
            s = 0.0
            for j in range(d):
                if valid[i, j]:
                    e = exp(x[i, j] - m)
                    o[i, j] = e
                    s += e
            for j in range(d):
                o[i, j] = o[i, j] / s
    return out


def softmax_bwd(const double[:, ::1] g, const double[:, ::1] y):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    gx = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gv = gx
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += g[i, j] * y[i, j]
            for j in range(d):
                gv[i, j] = y[i, j] * (g[i, j] - dot)
    return gx


def gelu_fwd(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            o[i] = 0.5 * v * (1.0 + tanh(SQRT_2_OVER_PI * (v + GELU_C * v * v * v)))
    return out


def gelu_bwd(const double[::1] g, const double[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double v, t, dt
    with nogil:
        for i in range(n):
            v = x[i]
            t = tanh(SQRT_2_OVER_PI * (v + GELU_C * v * v * v))
            dt = (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * v * v)
            o[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt)
    return out


def social_integrate(const double[:, ::1] pos0, const double[:, ::1] vel0,
                     Py_ssize_t n_steps, double dt, double strength, double cap):
    """Explicit Euler with capped pairwise inverse-square repulsion."""
    cdef Py_ssize_t n = pos0.shape[0], s, i, j
    traj = np.empty((n_steps + 1, n, 2), dtype=np.float64)
    cdef double[:, :, ::1] tr = traj
    p_arr = np.array(pos0, dtype=np.float64)
    v_arr = np.array(vel0, dtype=np.float64)
    a_arr = np.zeros((n, 2), dtype=np.float64)
    cdef double[:, ::1] p = p_arr
    cdef double[:, ::1] v = v_arr
    cdef double[:, ::1] a = a_arr
    cdef double dx, dy, d2, dist, mag
    with nogil:
        for i in range(n):
            tr[0, i, 0] = p[i, 0]
            tr[0, i, 1] = p[i, 1]
        for s in range(n_steps):
            for i in range(n):
                a[i, 0] = 0.0
                a[i, 1] = 0.0
                for j in range(n):
                    if j == i:
                        continue
                    dx = p[i, 0] - p[j, 0]
                    dy = p[i, 1] - p[j, 1]
                    d2 = dx * dx + dy * dy
                    if d2 <= 0.0:
                        continue
                    dist = sqrt(d2)
                    mag = strength / d2
                    if mag > cap:
                        mag = cap
                    a[i, 0] += mag * dx / dist
                    a[i, 1] += mag * dy / dist
            for i in range(n):
                p[i, 0] += dt * v[i, 0]
                p[i, 1] += dt * v[i, 1]
                v[i, 0] += dt * a[i, 0]
                v[i, 1] += dt * a[i, 1]
                tr[s + 1, i, 0] = p[i, 0]
                tr[s + 1, i, 1] = p[i, 1]
    return traj
