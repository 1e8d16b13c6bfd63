#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-Python fallback.

The hot paths of a large experiment are (a) the per-round assignment loops
of the online policies and (b) the solver's bid-update iterations.  This
script times both implementations on identical inputs and reports the
speedup.  Run after `pip install -e .`:

    python3 benchmarks/bench_kernels.py [--rounds 1000000] [--repeats 5]
"""

import argparse
import time

import numpy as np

from fairdiv import _pure

try:
    from fairdiv import _kernels
except ImportError:
    _kernels = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_pocr(T, repeats):
    rng = np.random.Generator(np.random.Philox(key=1))
    m, n = 6, 5
    cliques = [(0, 1, 2), (3,), (4,)]
    weights = rng.random((len(cliques), m))
    weights /= weights.sum(axis=0)
    clique_cdf = np.ascontiguousarray(np.cumsum(weights, axis=0).T)
    members = np.concatenate([np.asarray(c, dtype=np.int64) for c in cliques])
    offsets = np.array([0, 3, 4, 5], dtype=np.int64)
    leader_values = np.ascontiguousarray(rng.random((len(cliques), m)))
    dropped = np.zeros(m, dtype=np.uint8)
    arrivals = rng.integers(0, m, T).astype(np.int64)
    u = rng.random(T)
    args = (clique_cdf, members, offsets, leader_values, dropped, arrivals, u, n)
    return {
        "pure": best_of(lambda: _pure.assign_pocr(*args), repeats),
        "compiled": best_of(lambda: _kernels.assign_pocr(*args), repeats)
        if _kernels else None,
        "check": _kernels is None or np.array_equal(
            _pure.assign_pocr(*args), _kernels.assign_pocr(*args)),
    }


def bench_utilitarian(T, repeats):
    rng = np.random.Generator(np.random.Philox(key=2))
    values = np.ascontiguousarray(rng.random((T, 5)))
    values[::11] = 0.25  # plant ties
    u = rng.random(T)
    return {
        "pure": best_of(lambda: _pure.assign_utilitarian(values, u), repeats),
        "compiled": best_of(lambda: _kernels.assign_utilitarian(values, u), repeats)
        if _kernels else None,
        "check": _kernels is None or np.array_equal(
            _pure.assign_utilitarian(values, u),
            _kernels.assign_utilitarian(values, u)),
    }


def bench_pr(iters, repeats):
    rng = np.random.Generator(np.random.Philox(key=3))
    V = np.ascontiguousarray(rng.random((5, 10)))
    e = np.ascontiguousarray(rng.random(5) + 0.5)
    b0 = np.ascontiguousarray(e[:, None] * V / V.sum(axis=1)[:, None])

    def run_pure():
        b = b0.copy()
        _pure.pr_run(V, e, b, iters)
        return b

    def run_compiled():
        b = b0.copy()
        _kernels.pr_run(V, e, b, iters)
        return b

    return {
        "pure": best_of(run_pure, repeats),
        "compiled": best_of(run_compiled, repeats) if _kernels else None,
        "check": _kernels is None or np.allclose(run_pure(), run_compiled(),
                                                 atol=1e-12),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rounds", type=int, default=1_000_000,
                        help="horizon for the assignment kernels")
    parser.add_argument("--iters", type=int, default=20_000,
                        help="solver iterations to time")
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if _kernels is None:
        print("compiled kernels not importable; timing the fallback only\n")
    rows = [
        ("pocr assignment", bench_pocr(args.rounds, args.repeats)),
        ("utilitarian assignment", bench_utilitarian(args.rounds, args.repeats)),
        (f"solver bid updates x{args.iters}", bench_pr(args.iters, args.repeats)),
    ]
    width = max(len(name) for name, _ in rows)
    print(f"{'kernel':<{width}}  {'pure':>10}  {'compiled':>10}  {'speedup':>8}  match")
    for name, r in rows:
        pure_ms = r["pure"] * 1e3
        if r["compiled"] is None:
            print(f"{name:<{width}}  {pure_ms:9.1f}ms  {'-':>10}  {'-':>8}  -")
        else:
            comp_ms = r["compiled"] * 1e3
            print(f"{name:<{width}}  {pure_ms:9.1f}ms  {comp_ms:9.1f}ms  "
                  f"{r['pure'] / r['compiled']:7.1f}x  {r['check']}")


if __name__ == "__main__":
    main()
