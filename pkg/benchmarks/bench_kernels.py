"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and size with the best-of-N wall time of each
backend and the speedup. The compiled column is skipped when the
extension is not built.
"""

import argparse
import time

import numpy as np

from cascade_spk import _backend
from cascade_spk.numerics import JACOBI_MAX_SWEEPS, JACOBI_TOL


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def affinity_like(n, rng):
    x = rng.normal(size=(n, 8))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    a = np.maximum(x @ x.T, 0.0)
    return np.ascontiguousarray(np.diag(a.sum(1)) - a)


def kmeans_like(n, k, rng):
    centers = rng.normal(size=(k, 16)) * 3
    pts = centers[rng.integers(0, k, size=n)] + rng.normal(size=(n, 16))
    return np.ascontiguousarray(pts), np.ascontiguousarray(pts[:k].copy())


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    backends = [("python", _backend.fallback)]
    if _backend.compiled is not None:
        backends.append(("cython", _backend.compiled))
    else:
        print("compiled extension not built; timing the fallback only")

    cases = []
    for n in (8, 24, 64):
        a = affinity_like(n, rng)
        cases.append((f"jacobi_eigh n={n}",
                       lambda k, a=a: k.jacobi_eigh(a.copy(), JACOBI_TOL, JACOBI_MAX_SWEEPS)))
    for n, k in ((24, 3), (200, 8), (2000, 8)):
        pts, init = kmeans_like(n, k, rng)
        cases.append((f"lloyd n={n} k={k}",
                      lambda kern, pts=pts, init=init: kern.lloyd(pts, init.copy(), 100)))

    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for label, fn in cases:
        times = [best_of(lambda k=k: fn(k), args.repeat) for _, k in backends]
        row = f"{label:<22}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) == 2:
            row += f"  {times[0] / times[1]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
