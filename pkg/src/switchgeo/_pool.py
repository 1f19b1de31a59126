"""Bounded thread pool returning results in input order."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def n_workers() -> int:
    raw = os.environ.get("SWITCHGEO_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        cap = os.cpu_count() or 1
    return max(1, cap)


def map_ordered(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``, possibly concurrent; order is always the input order."""
    items = list(items)
    workers = n_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))
