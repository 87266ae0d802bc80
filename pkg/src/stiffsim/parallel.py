"""Path-batch fan-out with deterministic merge order."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

DEFAULT_BATCH = 500


def worker_count() -> int:
    raw = os.environ.get("STIFFSIM_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = os.cpu_count() or 1
    return max(1, n)


def path_batches(n_paths: int, batch: int = DEFAULT_BATCH):
    return [(lo, min(lo + batch, n_paths)) for lo in range(0, n_paths, batch)]


def map_batches(fn, batches):
    """Apply ``fn`` to each batch; results come back in batch order whatever the
    worker count, so downstream reductions are reproducible."""
    workers = min(worker_count(), len(batches))
    if workers <= 1:
        return [fn(b) for b in batches]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, batches))
