"""Deterministic parallel map over independent work items.

Results are returned in submission order, so aggregations downstream are
identical at every worker count. ELFUSE_THREADS caps the pool size;
the default is the logical core count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Optional


def worker_count(workers: Optional[int] = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("ELFUSE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def parallel_map(fn: Callable, items: Iterable, workers: Optional[int] = None) -> list:
    items = list(items)
    n_workers = min(worker_count(workers), len(items)) if items else 1
    if n_workers <= 1:
        return [fn(item) for item in items]
    chunksize = max(1, len(items) // (4 * n_workers))
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
