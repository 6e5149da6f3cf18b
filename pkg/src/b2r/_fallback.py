"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

The RNG, budget and rollout kernels are bit-identical to their compiled
twins: the floating point operations run in the same order, only
vectorised across trials instead of looped. The network kernels agree to
rounding (libm versus numpy transcendental functions, summation order).
"""

import numpy as np

GRID = 4294967296.0  # 2**32
INV53 = 1.0 / 9007199254740992.0  # 2**-53
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_TRIAL_MUL = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _trial_keys(seed, n_trials):
    trials = np.arange(n_trials, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _splitmix64(np.uint64(seed) ^ (trials * _TRIAL_MUL))


def _uniform(keys, t):
    with np.errstate(over="ignore"):
        bits = _splitmix64(keys + np.uint64(t))
    return (bits >> np.uint64(11)).astype(np.float64) * INV53


def counter_uniforms(seed, n_trials, horizon):
    keys = _trial_keys(seed, n_trials)
    out = np.empty((n_trials, horizon))
    for t in range(horizon):
        out[:, t] = _uniform(keys, t)
    return out


def suffix_sum(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    acc = 0.0
    for t in range(len(x) - 1, -1, -1):
        acc = acc + float(x[t])
        out[t] = acc
    return out


def budget_paths(planned, half_width, c_max, kappa, seed, n_trials):
    planned = np.asarray(planned, dtype=np.float64)
    keys = _trial_keys(seed, n_trials)
    total = np.zeros(n_trials)
    ctg = np.full(n_trials, float(kappa))
    cum_err = np.zeros(n_trials)
    abs_err = np.zeros(n_trials)
    for t in range(len(planned)):
        e = (2.0 * _uniform(keys, t) - 1.0) * half_width
        e = np.clip(e, -c_max, c_max)
        c = np.clip(planned[t] + e, 0.0, c_max)
        c = np.floor(c * GRID + 0.5) / GRID
        r = c - planned[t]
        total = total + c
        ctg = ctg - c
        cum_err = cum_err + r
        abs_err = abs_err + np.abs(r)
    return total, ctg, cum_err, abs_err


def velocity_rollouts(targets, noise, gain, dt, v_max, v_limit, v0):
    targets = np.asarray(targets, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    n, horizon = targets.shape
    vel = np.empty((n, horizon))
    act = np.empty((n, horizon))
    rew = np.empty((n, horizon))
    cost = np.empty((n, horizon))
    v = np.full(n, float(v0))
    for t in range(horizon):
        vel[:, t] = v
        a = np.clip(gain * (targets[:, t] - v) + noise[:, t], -1.0, 1.0)
        nv = np.clip(v + a * dt, 0.0, v_max)
        act[:, t] = a
        rew[:, t] = nv * dt
        cost[:, t] = np.where(nv > v_limit, 1.0, 0.0)
        v = nv
    return vel, act, rew, cost


# ---------------------------------------------------------------------------
# fused elementwise kernels for the policy network

GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu_fwd(x):
    u = np.asarray(x)
    u2 = u * u
    th = np.tanh(GELU_C * u * (1.0 + 0.044715 * u * u))
    out = 0.5 * u * (1.0 + th)
    deriv = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * (GELU_C * (1.0 + 3 * 0.044715 * u2))
    return out, deriv


def layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1) + eps)
    xhat = xc * inv[:, None]
    return xhat * gamma + beta, xhat, inv


def layer_norm_bwd(g, xhat, inv, gamma):
    gh = g * gamma
    gx = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
    gx *= inv[:, None]
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def rope_rotate(x, cos, sin, sign):
    s = sign * sin
    out = np.empty_like(x)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * s
    out[..., 1::2] = xe * s + xo * cos
    return out


def softmax_masked(x, mask):
    z = x + mask[:, None]
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(g, y):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))
