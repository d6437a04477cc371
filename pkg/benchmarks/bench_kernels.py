"""Time the numba and numpy variants of each hot kernel on the same inputs.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]

The first numba call (compilation, or loading from the on-disk cache) is
excluded from the timings.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from sgdm_volterra import kernels


def cases(rng: np.random.Generator) -> dict:
    m, horizon = 512, 2000
    l2 = rng.uniform(0.5, 0.99, m) + 0j
    l3 = rng.uniform(0.0, 0.5, m) + 0j
    b = rng.normal(size=m) + 0j
    c = rng.normal(size=m) + 0j
    forcing = 0.98 ** np.arange(horizon + 1)
    kern = 0.05 * 0.9 ** np.arange(horizon + 1)
    cw = rng.uniform(0.0, 1e-3, m)
    om2 = rng.uniform(0.1, 1.0, m)
    pool = np.arange(20000, dtype=np.int64)
    draws = np.array([rng.integers(i, pool.size) for i in range(10000)], dtype=np.int64)
    return {
        "power_series (512 modes, T=2000)": (
            kernels.power_series_np, kernels.power_series_nb,
            (0.3, 0.5, b, l2, c, l3, horizon)),
        "volterra (T=2000)": (
            kernels.volterra_np, kernels.volterra_nb, (forcing, kern, 1.0)),
        "bisect (512 modes)": (
            kernels.bisect_np, kernels.bisect_nb, (1.0, 1.5, cw, om2, 0.3, 200, 1e-12)),
        "fisher_yates (10000 of 20000)": (
            kernels.fisher_yates_np, kernels.fisher_yates_nb, (pool, draws)),
    }


def bench(func, args, repeat: int) -> float:
    def call():
        func(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])

    call()
    return min(timeit.repeat(call, number=1, repeat=repeat))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    print(f"{'kernel':34s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for name, (np_fn, nb_fn, call_args) in cases(np.random.default_rng(args.seed)).items():
        t_np = bench(np_fn, call_args, args.repeat)
        t_nb = bench(nb_fn, call_args, args.repeat)
        print(f"{name:34s} {1e3 * t_np:11.3f} {1e3 * t_nb:11.3f} {t_np / t_nb:8.1f}x")


if __name__ == "__main__":
    main()
