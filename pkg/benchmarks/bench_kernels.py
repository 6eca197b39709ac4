"""Time the path simulator on the compiled and numpy backends and compare outputs.

    python3 benchmarks/bench_kernels.py [--paths N] [--steps K] [--repeat R]
"""

import argparse
import time

import numpy as np

from regimehedge import kernels
from regimehedge.market import simulate_paths, table1_market


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=100_000)
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    m = table1_market()
    results = {}
    for backend in kernels.available():
        best = np.inf
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            paths = simulate_paths(m, n_steps=args.steps, n_paths=args.paths, seed=1, backend=backend)
            best = min(best, time.perf_counter() - t0)
        results[backend] = paths
        print(f"{backend:>9}: {best:7.3f} s  ({args.paths / best:,.0f} paths/s)")
    if len(results) == 2:
        a, b = results["compiled"], results["python"]
        print(f"max |dS| between backends: {np.max(np.abs(a.s - b.s)):.3g}; "
              f"regimes identical: {bool(np.array_equal(a.regime, b.regime))}")


if __name__ == "__main__":
    main()
