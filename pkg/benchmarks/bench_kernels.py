"""Compare the compiled and numpy posterior kernels.

Usage: python benchmarks/bench_kernels.py [--patches 32] [--hypotheses 64800] [--repeat 5]

The default hypothesis count is K * (2L)^2 for K=200 rotations and L=9, the
desk-scale reconstruction setting; 32 patches is the E-step chunk size.
"""

import argparse
import time

import numpy as np

from patchem.kernels import backends


def _inputs(n, J, seed=0):
    rng = np.random.default_rng(seed)
    corr = rng.normal(size=(n, J)) * 3.0
    energy = rng.uniform(0.0, 4.0, J)
    logprior = np.full(J, -np.log(J))
    norms = rng.uniform(50.0, 100.0, n)
    return corr, energy, logprior, norms


def time_backend(fn, n, J, repeat):
    corr0, energy, logprior, norms = _inputs(n, J)
    best = np.inf
    for _ in range(repeat):
        corr = corr0.copy()
        wsum, logev, qval = np.zeros(J), np.empty(n), np.empty(n)
        t = time.perf_counter()
        fn(corr, energy, logprior, norms, 0.7, -1.0, wsum, logev, qval)
        best = min(best, time.perf_counter() - t)
    return best, corr, logev, qval


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--patches", type=int, default=32)
    ap.add_argument("--hypotheses", type=int, default=200 * 18 * 18)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    impls = backends()
    results = {name: time_backend(fn, args.patches, args.hypotheses, args.repeat) for name, fn in impls.items()}
    ref = results["python"]
    print(f"posterior_rows on {args.patches} x {args.hypotheses} (best of {args.repeat})")
    for name, (t, post, logev, qval) in results.items():
        err = max(np.abs(post - ref[1]).max(), np.abs(logev - ref[2]).max(), np.abs(qval - ref[3]).max())
        print(f"  {name:8s} {t * 1e3:9.2f} ms   speedup {ref[0] / t:5.2f}x   max |diff| vs python {err:.1e}")
    if "cython" not in impls:
        print("  (compiled extension not built; only the numpy fallback was timed)")


if __name__ == "__main__":
    main()
