#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Covers the three hot paths: attention (training forward), row softmax
(attention/contrastive internals) and true-match ranking (retrieval
evaluation). Sizes mirror the desk-scale experiments plus a larger regime.

Usage: python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from avva.kernels import _pykernels

try:
    from avva.kernels import _ckernels
except ImportError:
    _ckernels = None


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench(name, make_args, call, repeat):
    args = make_args()
    t_py = timeit(lambda: call(_pykernels, *args), repeat)
    row = f"{name:<42} numpy {t_py * 1e3:9.3f} ms"
    if _ckernels is not None:
        t_cy = timeit(lambda: call(_ckernels, *args), repeat)
        row += f"   cython {t_cy * 1e3:9.3f} ms   speedup {t_py / t_cy:5.2f}x"
    print(row)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5, help="take the best of N runs")
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    if _ckernels is None:
        print("compiled extension not built; showing numpy fallback only\n")

    print("attention forward (batch, Tq, Tk, dim, heads)")
    for b, tq, tk, dim, heads in [(16, 6, 4, 768, 8), (64, 6, 4, 768, 8), (8, 32, 32, 768, 8)]:
        q = rng.standard_normal((b, tq, dim))
        k = rng.standard_normal((b, tk, dim))
        v = rng.standard_normal((b, tk, dim))
        bench(
            f"  attend_batch ({b}, {tq}, {tk}, {dim}, h{heads})",
            lambda q=q, k=k, v=v: (q, k, v, heads),
            lambda impl, q, k, v, h: impl.attend_batch(q, k, v, h),
            args.repeat,
        )

    print("\nrow softmax (rows, cols)")
    for rows, cols in [(1024, 4), (4096, 32), (100, 100)]:
        x = rng.standard_normal((rows, cols))
        bench(
            f"  softmax_rows ({rows}, {cols})",
            lambda x=x: (x,),
            lambda impl, x: impl.softmax_rows(x),
            args.repeat,
        )

    print("\nretrieval ranking (N x N similarity, 100 repetitions)")
    for n in [100, 400]:
        sims = [rng.standard_normal((n, n)) for _ in range(100)]
        bench(
            f"  true_match_ranks ({n}x{n} x100)",
            lambda sims=sims: (sims,),
            lambda impl, sims: [impl.true_match_ranks(s) for s in sims],
            args.repeat,
        )


if __name__ == "__main__":
    main()
