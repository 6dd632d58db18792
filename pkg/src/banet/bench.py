"""Timing of factored linear attention against the explicit O(N^2) form."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .fusion import linear_attention_dense, linear_attention_factored

DEFAULT_SIZES = (256, 512, 1024, 2048, 4096)
MAX_EXPONENT = 1.5
AGREE_TOL = 1e-5


@dataclass
class BenchRow:
    n: int
    factored_s: float
    dense_s: float
    max_abs_diff: float


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_linear_attention(sizes=DEFAULT_SIZES, channels: int = 32, key_channels: int = 4,
                           repeats: int = 3, seed: int = 0) -> list[BenchRow]:
    """Best-of-`repeats` wall time for both paths at each length N (float32 inputs)."""
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        q = rng.normal(size=(1, key_channels, n)).astype(np.float32)
        k = rng.normal(size=(1, key_channels, n)).astype(np.float32)
        v = rng.normal(size=(1, channels, n)).astype(np.float32)
        fac = linear_attention_factored(q, k, v)
        dense = linear_attention_dense(q, k, v)
        diff = float(np.abs(fac.astype(np.float64) - dense).max())
        rows.append(BenchRow(n, _best_time(lambda: linear_attention_factored(q, k, v), repeats),
                             _best_time(lambda: linear_attention_dense(q, k, v), repeats), diff))
    return rows


def fit_exponent(sizes, times) -> float:
    """Least-squares slope of log(time) against log(N)."""
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def format_table(rows: list[BenchRow]) -> str:
    lines = [f"{'N':>7}  {'factored_ms':>11}  {'dense_ms':>9}  {'max_abs_diff':>12}"]
    for r in rows:
        lines.append(f"{r.n:>7}  {1e3 * r.factored_s:11.3f}  {1e3 * r.dense_s:9.3f}  {r.max_abs_diff:12.2e}")
    return "\n".join(lines)
