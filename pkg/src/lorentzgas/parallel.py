"""Deterministic chunked execution.

Work is always cut into a fixed number of chunks, each with its own random
stream spawned from the run seed.  The thread count only decides how many
chunks run at once, so results never depend on it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def chunk_rngs(seed: int, n_chunks: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def run_chunks(fn, tasks, threads: int = 1) -> list:
    """Apply ``fn`` to each task, returning results in task order."""
    tasks = list(tasks)
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


def split_counts(total: int, n_chunks: int) -> list[int]:
    base, extra = divmod(total, n_chunks)
    return [base + (1 if i < extra else 0) for i in range(n_chunks)]
