"""Fixed-chunk sample parallelism with order-stable reductions.

Samples are always split into the same chunks regardless of the worker
count, and partial results are combined in chunk order, so outputs do not
depend on how many threads ran them.
"""

from __future__ import annotations

import contextlib
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

from threadpoolctl import threadpool_limits

T = TypeVar("T")

CHUNK = 16


def default_threads() -> int:
    env = os.environ.get("LRNS_THREADS")
    if env:
        return max(1, int(env))
    return 1


def chunks(count: int, size: int = CHUNK) -> list[range]:
    return [range(i, min(i + size, count)) for i in range(0, count, size)]


def map_chunks(fn: Callable[[range], T], count: int, threads: int | None = None,
               size: int = CHUNK) -> list[T]:
    """Apply ``fn`` to each fixed chunk of ``range(count)``; results in chunk order."""
    parts = chunks(count, size)
    threads = default_threads() if threads is None else threads
    if threads <= 1 or len(parts) <= 1:
        return [fn(c) for c in parts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, parts))


def ordered_sum(parts: Sequence):
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total


@contextlib.contextmanager
def reproducible_blas(enabled: bool = True):
    """Pin BLAS to one thread so kernels give bitwise-stable results."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1, user_api="blas"):
        yield
