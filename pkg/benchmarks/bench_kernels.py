"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both backends must agree bitwise; the script checks that before timing.
"""
import argparse
import timeit

import numpy as np

from textteacher import _fallback, kernels
from textteacher.rng import lane_streams, seed_state


def cases():
    single = np.array([seed_state(1)], dtype=np.uint64)
    lanes = lane_streams(7, 256)
    r = np.random.default_rng(0)
    m = r.normal(size=(64, 64))
    sym = m + m.T
    text = b"magenta diamond at middle center"

    def jacobi(mod):
        a, v = sym.copy(), np.eye(64)
        mod.jacobi_eig(a, v, 1e-12, 100)
        return a, v

    return {
        "xoshiro 1 lane x 100k": lambda mod: mod.xoshiro_fill(single.copy(), 100_000),
        "xoshiro 256 lanes x 1k": lambda mod: mod.xoshiro_fill(lanes.copy(), 1_000),
        "jacobi 64x64": jacobi,
        "fnv1a64 x 10k": lambda mod: [mod.fnv1a64(text, s) for s in range(10_000)],
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    if isinstance(a, list):
        return a == b
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if kernels.BACKEND != "cython":
        raise SystemExit("compiled extension not built; run `pip install -e .` first")
    compiled = kernels._impl
    print(f"{'case':26s} {'compiled ms':>12s} {'python ms':>12s} {'speedup':>9s}")
    for name, fn in cases().items():
        if not same(fn(compiled), fn(_fallback)):
            raise SystemExit(f"{name}: backends disagree")
        tc = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        tp = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:26s} {tc:12.2f} {tp:12.2f} {tp / tc:8.1f}x")


if __name__ == "__main__":
    main()
