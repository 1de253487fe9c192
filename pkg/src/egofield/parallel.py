"""Order-preserving map over independent work items.

The worker count comes from ``EGOFIELD_THREADS`` (default 1). Items never
share mutable state and results come back in input order, so output bytes
do not depend on the thread count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "EGOFIELD_THREADS"


def thread_count() -> int:
    raw = os.environ.get(ENV_VAR, "1").strip() or "1"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def pmap(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = min(thread_count(), max(len(items), 1))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
