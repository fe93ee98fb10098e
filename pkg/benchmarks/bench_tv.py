"""Benchmark the compiled TV kernel against the pure-numpy fallback.

Run::

    python3 benchmarks/bench_tv.py [--size 128] [--iters 200] [--repeats 5]

Both backends implement the identical dual-projection iteration and return
bitwise-equal results; the benchmark reports wall time and the speedup.
"""

import argparse
import time

import numpy as np

from pnpinc import _tv_numpy

try:
    from pnpinc import _tv_core
except ImportError:
    _tv_core = None


def bench(fn, f, lam, iters, repeats):
    best = np.inf
    for _ in range(repeats):
        g = f.copy()
        t0 = time.perf_counter()
        fn(g, lam, 0.25, iters, 0.0)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--iters", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    f = rng.uniform(0, 255, size=(args.size, args.size))
    lam = 25.0

    t_np = bench(_tv_numpy.tv_dual_iterate, f, lam, args.iters, args.repeats)
    print(f"numpy  backend: {t_np * 1e3:8.2f} ms "
          f"({args.iters} dual iterations, {args.size}x{args.size})")
    if _tv_core is None:
        print("cython backend: not built (PNPINC_PURE=1 or missing compiler)")
        return
    t_cy = bench(_tv_core.tv_dual_iterate, f, lam, args.iters, args.repeats)
    print(f"cython backend: {t_cy * 1e3:8.2f} ms")
    print(f"speedup: {t_np / t_cy:.2f}x")

    xn, _, _ = _tv_numpy.tv_dual_iterate(f.copy(), lam, 0.25, 50, 0.0)
    xc, _, _ = _tv_core.tv_dual_iterate(f.copy(), lam, 0.25, 50, 0.0)
    assert np.array_equal(xn, xc), "backends diverged"
    print("outputs bitwise identical: yes")


if __name__ == "__main__":
    main()
