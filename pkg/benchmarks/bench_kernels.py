#!/usr/bin/env python
"""Benchmark the numba kernels against their pure-numpy twins.

Each kernel runs on random patch clouds of N atoms in 9 dimensions (3x3
patches) and both backends are checked to agree before timing.

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --sizes 16 64 256 --repeat 20
    python benchmarks/bench_kernels.py --output bench.json
"""

import argparse
import json
import time

import numpy as np

from iwd import kernels


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(n, rng):
    P = rng.random((n, 9))
    Q = rng.random((n, 9))
    C = kernels.l1_cost(P, Q)
    w = np.full(n, 1.0 / n)
    eps = 0.05 * C.max()
    return {
        "l1_cost": lambda: kernels.l1_cost(P, Q),
        "assignment": lambda: kernels.assignment(C),
        "transport_flow": lambda: kernels.transport_flow(C, w, w),
        "sinkhorn_log": lambda: kernels.sinkhorn_log(C, np.log(w), np.log(w), eps, max_iter=500),
    }


def _value(name, out):
    return out[0] if name in ("transport_flow", "sinkhorn_log") else out


def run(sizes, repeat, seed):
    rows = []
    for n in sizes:
        timings = {}
        outputs = {}
        for backend in ("numpy", "numba"):
            if backend == "numba" and not kernels.NUMBA_AVAILABLE:
                continue
            kernels.USE_NUMBA = backend == "numba"
            kernels.warmup()
            for name, fn in cases(n, np.random.default_rng([seed, n])).items():
                outputs[(name, backend)] = _value(name, fn())
                timings[(name, backend)] = _time(fn, repeat)
        for name in ("l1_cost", "assignment", "transport_flow", "sinkhorn_log"):
            row = {"kernel": name, "n": n, "numpy_s": timings[(name, "numpy")]}
            if (name, "numba") in timings:
                agree = np.allclose(outputs[(name, "numpy")], outputs[(name, "numba")], atol=1e-9)
                row.update(numba_s=timings[(name, "numba")], agree=bool(agree),
                           speedup=timings[(name, "numpy")] / timings[(name, "numba")])
            rows.append(row)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 144])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--output", default=None)
    args = ap.parse_args()

    default = kernels.USE_NUMBA
    try:
        rows = run(args.sizes, args.repeat, args.seed)
    finally:
        kernels.USE_NUMBA = default

    print(f"{'kernel':<16}{'n':>6}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  agree")
    for r in rows:
        nb = f"{1e3 * r['numba_s']:12.3f}" if "numba_s" in r else f"{'-':>12}"
        sp = f"{r['speedup']:10.1f}" if "speedup" in r else f"{'-':>10}"
        print(f"{r['kernel']:<16}{r['n']:>6}{1e3 * r['numpy_s']:12.3f}{nb}{sp}  {r.get('agree', '-')}")
    if args.output:
        with open(args.output, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
