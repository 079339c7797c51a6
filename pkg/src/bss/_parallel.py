"""Order-preserving parallel map used wherever work units are independent."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def resolve_threads(threads=None):
    """Explicit value, else $BSS_THREADS, else the core count."""
    if threads is None:
        env = os.environ.get("BSS_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    return threads


def pmap(fn, items, threads=1):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
