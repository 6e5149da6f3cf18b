# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops mirrored by ``b2r._fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, floor, exp, sqrt
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

cdef double GRID = 4294967296.0  # 2**32
cdef double INV53 = 1.0 / 9007199254740992.0  # 2**-53
cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t TRIAL_MUL = 0xD1B54A32D192ED03ULL


cdef inline uint64_t _splitmix64(uint64_t x) nogil:
    cdef uint64_t z = x + GOLDEN
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline double _uniform(uint64_t key, uint64_t t) nogil:
    return <double>(_splitmix64(key + t) >> 11) * INV53


def counter_uniforms(uint64_t seed, Py_ssize_t n_trials, Py_ssize_t horizon):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n_trials, horizon))
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, t
    cdef uint64_t key
    with nogil:
        for i in range(n_trials):
            key = _splitmix64(seed ^ (<uint64_t>i * TRIAL_MUL))
            for t in range(horizon):
                ov[i, t] = _uniform(key, <uint64_t>t)
    return out


def suffix_sum(const double[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n)
    cdef double[::1] ov = out
    cdef double acc = 0.0
    cdef Py_ssize_t t
    for t in range(n - 1, -1, -1):
        acc = acc + x[t]
        ov[t] = acc
    return out


def budget_paths(const double[::1] planned, double half_width, double c_max,
                 double kappa, uint64_t seed, Py_ssize_t n_trials):
    cdef Py_ssize_t horizon = planned.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] total = np.zeros(n_trials)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] final_ctg = np.empty(n_trials)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cum_err = np.zeros(n_trials)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] abs_err = np.zeros(n_trials)
    cdef double[::1] tv = total, fv = final_ctg, dv = cum_err, av = abs_err
    cdef Py_ssize_t i, t
    cdef uint64_t key
    cdef double e, c, r, tot, ctg, d, a
    cdef bint small = c_max * GRID < 4.0e18
    with nogil:
        for i in range(n_trials):
            key = _splitmix64(seed ^ (<uint64_t>i * TRIAL_MUL))
            tot = 0.0
            ctg = kappa
            d = 0.0
            a = 0.0
            for t in range(horizon):
                e = (2.0 * _uniform(key, <uint64_t>t) - 1.0) * half_width
                if e > c_max:
                    e = c_max
                elif e < -c_max:
                    e = -c_max
                c = planned[t] + e
                if c < 0.0:
                    c = 0.0
                elif c > c_max:
                    c = c_max
                if small:  # c >= 0, so truncation is floor without a libm call
                    c = <double>(<int64_t>(c * GRID + 0.5)) / GRID
                else:
                    c = floor(c * GRID + 0.5) / GRID
                r = c - planned[t]
                tot = tot + c
                ctg = ctg - c
                d = d + r
                a = a + fabs(r)
            tv[i] = tot
            fv[i] = ctg
            dv[i] = d
            av[i] = a
    return total, final_ctg, cum_err, abs_err


def velocity_rollouts(const double[:, ::1] targets, const double[:, ::1] noise, double gain,
                      double dt, double v_max, double v_limit, double v0):
    cdef Py_ssize_t n = targets.shape[0], horizon = targets.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] vel = np.empty((n, horizon))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] act = np.empty((n, horizon))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] rew = np.empty((n, horizon))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] cost = np.empty((n, horizon))
    cdef double[:, ::1] vv = vel, av = act, rv = rew, cv = cost
    cdef Py_ssize_t i, t
    cdef double v, a, nv
    with nogil:
        for i in range(n):
            v = v0
            for t in range(horizon):
                vv[i, t] = v
                a = gain * (targets[i, t] - v) + noise[i, t]
                if a > 1.0:
                    a = 1.0
                elif a < -1.0:
                    a = -1.0
                nv = v + a * dt
                if nv < 0.0:
                    nv = 0.0
                elif nv > v_max:
                    nv = v_max
                av[i, t] = a
                rv[i, t] = nv * dt
                cv[i, t] = 1.0 if nv > v_limit else 0.0
                v = nv
    return vel, act, rew, cost


# ---------------------------------------------------------------------------
# fused elementwise kernels for the policy network

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_fwd(const double[::1] x):
    # numpy's vectorised tanh is several times faster than libm's, so the
    # fused passes sit on either side of it
    cdef Py_ssize_t n = x.shape[0], i
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] deriv = np.empty(n)
    cdef double[::1] ov = out, dv = deriv
    cdef double u, u2, th
    with nogil:
        for i in range(n):
            u = x[i]
            ov[i] = GELU_C * u * (1.0 + 0.044715 * u * u)
    np.tanh(out, out=out)
    with nogil:
        for i in range(n):
            u = x[i]
            u2 = u * u
            th = ov[i]
            ov[i] = 0.5 * u * (1.0 + th)
            dv[i] = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * (GELU_C * (1.0 + 3 * 0.044715 * u2))
    return out, deriv


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma, const double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xhat = np.empty((n, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] inv = np.empty(n)
    cdef double[:, ::1] ov = out, hv = xhat
    cdef double[::1] iv = inv
    cdef double mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu = mu + x[i, j]
            mu = mu / d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var = var + c * c
            var = var / d
            r = 1.0 / sqrt(var + eps)
            iv[i] = r
            for j in range(d):
                c = (x[i, j] - mu) * r
                hv[i, j] = c
                ov[i, j] = c * gamma[j] + beta[j]
    return out, xhat, inv


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat, const double[::1] inv,
                   const double[::1] gamma):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gx = np.empty((n, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dgamma = np.zeros(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dbeta = np.zeros(d)
    cdef double[:, ::1] gv = gx
    cdef double[::1] dg = dgamma, db = dbeta
    cdef double m1, m2, gh
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                gh = g[i, j] * gamma[j]
                m1 = m1 + gh
                m2 = m2 + gh * xhat[i, j]
                dg[j] = dg[j] + g[i, j] * xhat[i, j]
                db[j] = db[j] + g[i, j]
            m1 = m1 / d
            m2 = m2 / d
            for j in range(d):
                gv[i, j] = (g[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * inv[i]
    return gx, dgamma, dbeta


def rope_rotate(const double[:, :, ::1] x, const double[:, ::1] cos, const double[:, ::1] sin, double sign):
    """x is (N, T, dim); pairs (2i, 2i+1) at row t rotate by sign * angle[t, i]."""
    cdef Py_ssize_t n = x.shape[0], T = x.shape[1], dim = x.shape[2], half = dim // 2
    cdef cnp.ndarray[cnp.float64_t, ndim=3] out = np.empty((n, T, dim))
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t a, t, i
    cdef double c, s, xe, xo
    with nogil:
        for a in range(n):
            for t in range(T):
                for i in range(half):
                    c = cos[t, i]
                    s = sign * sin[t, i]
                    xe = x[a, t, 2 * i]
                    xo = x[a, t, 2 * i + 1]
                    ov[a, t, 2 * i] = xe * c - xo * s
                    ov[a, t, 2 * i + 1] = xe * s + xo * c
    return out


def softmax_masked(const double[:, :, :, ::1] x, const double[:, :, ::1] mask):
    """Row softmax of x (B, H, T, S) + mask (B, T, S) broadcast over heads."""
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], T = x.shape[2], S = x.shape[3]
    cdef cnp.ndarray[cnp.float64_t, ndim=4] out = np.empty((B, H, T, S))
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, h, t, s
    cdef double m, z, tot
    with nogil:
        for b in range(B):
            for h in range(H):
                for t in range(T):
                    m = x[b, h, t, 0] + mask[b, t, 0]
                    for s in range(1, S):
                        z = x[b, h, t, s] + mask[b, t, s]
                        if z > m:
                            m = z
                    tot = 0.0
                    for s in range(S):
                        z = exp(x[b, h, t, s] + mask[b, t, s] - m)
                        ov[b, h, t, s] = z
                        tot = tot + z
                    for s in range(S):
                        ov[b, h, t, s] = ov[b, h, t, s] / tot
    return out


def softmax_bwd(const double[:, ::1] g, const double[:, ::1] y):
    cdef Py_ssize_t n = g.shape[0], S = g.shape[1], i, s
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gx = np.empty((n, S))
    cdef double[:, ::1] gv = gx
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for s in range(S):
                dot = dot + g[i, s] * y[i, s]
            for s in range(S):
                gv[i, s] = y[i, s] * (g[i, s] - dot)
    return gx
