"""Process-level fan-out capped by the DIRIREG_THREADS environment variable."""

import os
from concurrent.futures import ProcessPoolExecutor


def thread_cap() -> int:
    raw = os.environ.get("DIRIREG_THREADS", "")
    try:
        cap = int(raw)
    except ValueError:
        cap = os.cpu_count() or 1
    return max(1, cap)


def pmap(fn, items, workers: int | None = None) -> list:
    """Ordered ``map`` over a process pool; serial when one worker suffices."""
    items = list(items)
    cap = thread_cap()
    workers = cap if workers is None else min(max(1, workers), cap)
    workers = min(workers, len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
