"""Time each compiled kernel against its numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from b2r import _fallback

try:
    from b2r import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    targets = rng.uniform(3, 13, (2000, 200))
    noise = rng.normal(size=(2000, 200)) * 0.2
    x = rng.normal(size=(64 * 12 * 256,))
    ln = rng.normal(size=(64 * 12, 64))
    gamma, beta = rng.normal(size=64), rng.normal(size=64)
    rope_x = rng.normal(size=(64 * 4, 12, 16))
    ang = np.arange(12)[:, None] * 10000.0 ** (-np.arange(0, 16, 2) / 16)
    cos, sin = np.cos(ang), np.sin(ang)
    scores = rng.normal(size=(64, 4, 12, 12))
    mask = np.where(np.tril(np.ones((12, 12))) > 0, 0.0, -1e30)
    mask = np.ascontiguousarray(np.broadcast_to(mask, (64, 12, 12)))
    g2 = rng.normal(size=(64 * 4 * 12, 12))
    y2 = np.abs(rng.normal(size=(64 * 4 * 12, 12)))
    _, xhat, inv = _fallback.layer_norm_fwd(ln, gamma, beta, 1e-5)
    return {
        "suffix_sum (n=200)": ("suffix_sum", (rng.normal(size=200),)),
        "counter_uniforms (1e4 x 100)": ("counter_uniforms", (0, 10_000, 100)),
        "budget_paths (1e5 x 100)": ("budget_paths", (np.full(100, 0.08), 0.02, 1.0, 10.0, 0, 100_000)),
        "velocity_rollouts (2000 x 200)": ("velocity_rollouts", (targets, noise, 0.5, 0.1, 15.0, 10.0, 0.0)),
        "gelu_fwd (196k)": ("gelu_fwd", (x,)),
        "layer_norm_fwd (768 x 64)": ("layer_norm_fwd", (ln, gamma, beta, 1e-5)),
        "layer_norm_bwd (768 x 64)": ("layer_norm_bwd", (ln, xhat, inv, gamma)),
        "rope_rotate (256 x 12 x 16)": ("rope_rotate", (rope_x, cos, sin, 1.0)),
        "softmax_masked (64x4x12x12)": ("softmax_masked", (scores, mask)),
        "softmax_bwd (3072 x 12)": ("softmax_bwd", (g2, y2)),
    }


def bench(fn, args, repeat):
    n, _ = timeit.Timer(lambda: fn(*args)).autorange()
    return min(timeit.repeat(lambda: fn(*args), number=n, repeat=repeat)) / n


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    table = cases(np.random.default_rng(0))
    print(f"{'kernel':34s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for label, (name, a) in table.items():
        tp = bench(getattr(_fallback, name), a, args.repeat)
        if _kernels is None:
            print(f"{label:34s} {tp * 1e3:10.3f} {'n/a':>10s} {'':>8s}")
            continue
        tc = bench(getattr(_kernels, name), a, args.repeat)
        print(f"{label:34s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
