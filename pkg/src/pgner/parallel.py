"""Order-preserving process-pool map used for corpus generation and decoding."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1, chunksize: int = 8) -> list[R]:
    """``[fn(x) for x in items]``, spread over ``threads`` worker processes when > 1.

    Results come back in input order, so output does not depend on the worker count.
    """
    items = list(items)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
