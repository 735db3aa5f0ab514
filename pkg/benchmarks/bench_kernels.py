#!/usr/bin/env python3
"""Time every kernel's numba path against its numpy path.

    python benchmarks/bench_kernels.py [--repeat 20]

Outputs agree to 1e-10 (checked before timing); the first numba call is
excluded so compile time does not count.
"""
import argparse
import time

import numpy as np

from ctskit import kernels
from ctskit._accel import NUMBA_AVAILABLE


def cases(rng):
    w = np.array([0.3, 0.7])
    mu = rng.normal(size=(2, 2))
    var = rng.uniform(0.05, 0.5, size=(2, 2))
    x = rng.normal(size=(4096, 2))
    cf, cl = rng.random((256, 256, 4)), rng.random((256, 256, 4))
    df, dl = rng.integers(0, 5, (256, 256)).astype(float), rng.integers(0, 5, (256, 256)).astype(float)
    lo = rng.uniform(0, 5, size=(200, 3))
    hi = lo + rng.uniform(0.1, 1, size=(200, 3))
    table = rng.normal(size=(65, 65, 8))
    uv = rng.random((8192, 2))
    grad = rng.normal(size=(8192, 8))
    return {
        "gm_eps": (x, 0.6, 0.8, w, mu, var),
        "gm_logpdf": (x, 0.6, 0.8, w, mu, var),
        "composite": (cf, df, cl, dl),
        "overlap_matrix": (lo, hi),
        "overlap_against": (lo[0], hi[0], lo, hi),
        "bilinear_gather": (table, uv),
        "bilinear_scatter": (grad, uv, 64),
    }


def timeit(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, a in cases(np.random.default_rng(args.seed)).items():
        f_np = getattr(kernels, f"{name}_numpy")
        f_nb = getattr(kernels, f"{name}_numba")
        ref, got = f_np(*a), f_nb(*a)  # also triggers compilation
        if not np.allclose(ref, got, rtol=1e-10, atol=1e-10):
            raise SystemExit(f"{name}: backends disagree")
        t_np = timeit(f_np, a, args.repeat)
        t_nb = timeit(f_nb, a, args.repeat)
        print(f"{name:<18}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
