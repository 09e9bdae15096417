"""Compare the compiled and pure-Python level kernels.

Times ``sample_batch`` on both backends for each method/payoff pair, checks
that the two agree on the same paths, and prints paths per second and the
speed-up.  The Python backend is slow, so it runs fewer paths.

Usage::

    python benchmarks/bench_kernels.py --level 6 --paths 20000 --python-paths 5000
"""

import argparse
import csv
import sys
import time

import numpy as np

from mlmc_greeks import estimators
from mlmc_greeks.estimators import MethodSpec, sample_batch
from mlmc_greeks.sde import MarketParams

CASES = [
    ("pathwise", "call", {}),
    ("pathwise", "lookback", {}),
    ("pathwise", "barrier", {}),
    ("pathwise", "barrier_smooth", {"h_star": 1 / 64}),
    ("cond_exp", "call", {}),
    ("cond_exp", "digital", {}),
    ("split", "call", {}),
    ("vibrato", "call", {}),
    ("vibrato", "digital", {}),
]


def time_backend(name, spec, params, level, n, repeat):
    estimators.set_backend(name)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        batch = sample_batch(spec, params, level, 1, 0, n)
        best = min(best, time.perf_counter() - t0)
    return n / best, batch


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    parser.add_argument("--level", type=int, default=6)
    parser.add_argument("--paths", type=int, default=20_000, help="paths per timing on the compiled backend")
    parser.add_argument("--python-paths", type=int, default=5000, help="paths per timing on the Python backend")
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--csv", help="also write the table to this file")
    args = parser.parse_args(argv)

    if estimators._compiled is None:
        print("compiled kernels are not built; only the Python backend is available", file=sys.stderr)
        return 1
    params = MarketParams(B=85.0)
    previous = estimators.backend()
    rows = []
    try:
        for method, payoff, kw in CASES:
            spec = MethodSpec(method, payoff, **kw)
            fast, cy = time_backend("cython", spec, params, args.level, args.paths, args.repeat)
            slow, py = time_backend("python", spec, params, args.level, args.python_paths, args.repeat)
            m = args.python_paths
            err = float(np.max(np.abs(cy.y[:m] - py.y) / np.maximum(1.0, np.abs(py.y))))
            rows.append((f"{method}/{payoff}", fast, slow, fast / slow, err))
    finally:
        estimators.set_backend(previous)

    print(f"level {args.level}: paths per second")
    print(f"{'case':<26}{'cython':>12}{'python':>12}{'speed-up':>10}{'max diff':>11}")
    for case, fast, slow, ratio, err in rows:
        print(f"{case:<26}{fast:>12.0f}{slow:>12.0f}{ratio:>10.1f}{err:>11.1e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "cython_paths_per_s", "python_paths_per_s", "speedup", "max_rel_diff"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
