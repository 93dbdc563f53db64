"""Ordered data-parallel map.

Results always come back in input order, so a reduce over them is
independent of the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def default_workers() -> int:
    value = os.environ.get("NOWCAST_WORKERS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"NOWCAST_WORKERS must be an integer, got {value!r}") from None
    return max(n, 1)


def ordered_map(
    fn: Callable[[T], R],
    items: Iterable[T],
    workers: int = 1,
    processes: bool = False,
) -> list[R]:
    """``list(map(fn, items))`` spread over up to ``workers`` workers.

    Threads suit numpy-heavy callables that release the GIL; pass
    ``processes=True`` for pure-Python work (``fn`` must then be picklable).
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    pool_cls = ProcessPoolExecutor if processes else ThreadPoolExecutor
    with pool_cls(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def blocks(n: int, size: int) -> list[tuple[int, int]]:
    """Fixed-size ``[lo, hi)`` ranges covering ``range(n)``."""
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]
