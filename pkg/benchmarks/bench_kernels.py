"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times the two hot paths of outlier rejection on inputs drawn from the
standard scenario: the all-pairs cycle distance matrix for one robot pair,
and exact maximum clique on random graphs that fit the compiled bitset
kernel.  Both backends must return identical results; the script exits
non-zero if they do not.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from distslam import config, kernels
from distslam.pcm import ConsistencyGraph, consistency_distances, group_by_pair, max_clique
from distslam.runner import derive_seed, simulate_frontend


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def bench_distances(repeat):
    cfg = config.builtin("standard")
    _, mission = simulate_frontend(cfg, derive_seed(cfg.seed, 0))
    graphs = mission.graphs()
    groups = group_by_pair([c.edge for c in mission.candidates])
    pair, cands = max(groups.items(), key=lambda kv: len(kv[1]))
    rows = []
    for backend in ("python", "compiled"):
        t, d2 = best_of(lambda: consistency_distances(cands, graphs, backend=backend), repeat)
        rows.append((backend, t, d2))
    label = f"cycle distances, robots {pair[0]}-{pair[1]}, {len(cands)} candidates"
    return label, rows, lambda a, b: np.allclose(a, b, rtol=1e-9, atol=1e-9)


def bench_cliques(repeat):
    rng = np.random.default_rng(0)
    graphs = []
    for _ in range(20):
        n = 60
        upper = np.triu(rng.random((n, n)) < 0.5, 1)
        graphs.append(ConsistencyGraph.from_adjacency(upper | upper.T))
    rows = []
    for backend in ("python", "compiled"):
        t, out = best_of(lambda: [max_clique(g, backend=backend).members for g in graphs], repeat)
        rows.append((backend, t, out))
    return "exact max clique, 20 graphs, 60 nodes, density 0.5", rows, lambda a, b: a == b


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if kernels.BACKEND != "compiled":
        print("compiled extension not available; build it with `pip install -e . --no-build-isolation`")
        return 1
    status = 0
    for bench in (bench_distances, bench_cliques):
        label, rows, same = bench(args.repeat)
        (_, tp, py), (_, tc, cy) = rows
        agree = same(py, cy)
        status |= not agree
        print(f"{label}: python {tp * 1e3:.1f} ms, compiled {tc * 1e3:.1f} ms, "
              f"speed-up {tp / tc:.1f}x, identical={agree}")
    return status


if __name__ == "__main__":
    sys.exit(main())
