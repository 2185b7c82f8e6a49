"""Ordered thread pool for GIL-free kernels.

Work items carry their own random streams and counter offsets, so results
do not depend on the number of workers; merging follows item order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_THREADS = "THERMO_BILLIARDS_THREADS"
_threads: int | None = None


def set_threads(n: int | None) -> None:
    global _threads
    if n is not None and int(n) < 1:
        raise ValueError("thread count must be positive")
    _threads = None if n is None else int(n)


def get_threads() -> int:
    if _threads is not None:
        return _threads
    env = os.environ.get(ENV_THREADS)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def ordered_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = min(get_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def chunks(n: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]
