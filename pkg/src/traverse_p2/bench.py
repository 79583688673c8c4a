"""Radius-count benchmark: hash-grid index (numba and numpy kernels) vs linear scan.

The linear scan costs O(N) per query, so it is timed on a subset of the
queries and reported as per-query throughput; the speedups compare per-query
times.  Counts on that subset are checked for exact agreement.
"""

import time
from typing import NamedTuple

import numpy as np

from . import _accel
from .spatial import build_index, count_brute_batch, count_within_batch


class BenchResult(NamedTuple):
    n_points: int
    n_queries: int
    radius: float
    cell_size: float
    build_s: float
    numba_s: float  # nan without numba
    numpy_s: float
    brute_queries: int
    brute_s: float
    brute_per_query_s: float
    speedup_numba: float
    speedup_numpy: float
    counts_agree: bool
    mean_count: float


def _timed(fn, repeats=1):
    best, out = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run_benchmark(
    n_points=1_000_000,
    n_queries=10_000,
    radius=0.3,
    cell_size=None,
    brute_queries=200,
    extent=(100.0, 30.0, 3.0),
    seed=0,
    repeats=3,
) -> BenchResult:
    """Uniform points in a box of ``extent`` meters; queries drawn the same way."""
    rng = np.random.default_rng(seed)
    ext = np.asarray(extent, dtype=np.float64)
    pts = rng.random((n_points, 3)) * ext
    queries = rng.random((n_queries, 3)) * ext
    cell = radius if cell_size is None else cell_size

    build_s, index = _timed(lambda: build_index(pts, cell))
    if _accel.HAVE_NUMBA:
        count_within_batch(index, queries[:4], radius, backend="numba")  # compile
        numba_s, counts = _timed(lambda: count_within_batch(index, queries, radius, backend="numba"), repeats)
    else:
        numba_s, counts = float("nan"), None
    numpy_s, counts_np = _timed(lambda: count_within_batch(index, queries, radius, backend="numpy"), repeats)
    if counts is None:
        counts = counts_np

    nb = min(brute_queries, n_queries)
    brute_s, brute = _timed(lambda: count_brute_batch(pts, queries[:nb], radius))
    per_query = brute_s / max(nb, 1)
    agree = bool(np.array_equal(brute, counts[:nb]) and np.array_equal(counts, counts_np))
    brute_total = per_query * n_queries
    return BenchResult(
        n_points,
        n_queries,
        radius,
        cell,
        build_s,
        numba_s,
        numpy_s,
        nb,
        brute_s,
        per_query,
        brute_total / numba_s if numba_s == numba_s else float("nan"),
        brute_total / numpy_s,
        agree,
        float(counts.mean()) if n_queries else 0.0,
    )


def format_result(res: BenchResult) -> str:
    lines = [
        f"points={res.n_points} queries={res.n_queries} r={res.radius} cell={res.cell_size}",
        f"build            {res.build_s:10.4f} s",
        f"index (numba)    {res.numba_s:10.4f} s   speedup x{res.speedup_numba:,.1f}",
        f"index (numpy)    {res.numpy_s:10.4f} s   speedup x{res.speedup_numpy:,.1f}",
        f"brute ({res.brute_queries} q)  {res.brute_s:10.4f} s   "
        f"({res.brute_per_query_s * 1e3:.3f} ms/query)",
        f"counts agree: {res.counts_agree}   mean count {res.mean_count:.2f}",
    ]
    return "\n".join(lines)


if __name__ == "__main__":
    print(format_result(run_benchmark()))
