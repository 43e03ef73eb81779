"""Order-preserving replica fan-out.

Replica ``i`` always draws from the stream ``seed.derive(i)``, and chunk
results are concatenated in index order, so outputs do not depend on the
worker count or scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

THREADS_ENV = "DYN_RCM_THREADS"


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    try:
        return max(int(raw), 1)
    except ValueError:
        return 1


def run_replicas(worker, payload, replicas: int, threads: int | None = None) -> list:
    """``worker(payload, lo, hi)`` returns a list for replicas ``lo..hi-1``."""
    threads = default_threads() if threads is None else max(int(threads), 1)
    if threads == 1 or replicas < 2:
        return list(worker(payload, 0, replicas))
    n_chunks = min(replicas, threads * 4)
    bounds = [replicas * i // n_chunks for i in range(n_chunks + 1)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(worker, payload, lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
        out: list = []
        for f in futures:
            out.extend(f.result())
    return out
