"""Sample-level parallelism capped by the ``DPI_SIM_THREADS`` environment variable."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence


def max_workers() -> int:
    raw = os.environ.get("DPI_SIM_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"DPI_SIM_THREADS must be an integer, got {raw!r}") from None
        return max(1, n)
    return max(1, min(os.cpu_count() or 1, 8))


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Order-preserving map; each item must be independently seeded, so the
    result does not depend on the number of workers."""
    items = list(items)
    n = min(max_workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
