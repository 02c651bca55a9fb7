"""Deterministic chunked parallelism.

RSSL_THREADS caps the worker pool (default: logical cores). Work is split
into fixed chunks whose per-chunk arithmetic never depends on the thread
count, and results are reassembled in chunk order, so outputs are
bit-identical whether the pool has 1 worker or many.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "RSSL_THREADS"


def thread_count() -> int:
    raw = os.environ.get(ENV_VAR, "")
    if raw.strip():
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def map_chunks(fn: Callable[[T], R], chunks: Sequence[T]) -> list[R]:
    """Apply fn to each chunk, in order; parallel when allowed."""
    workers = min(thread_count(), max(len(chunks), 1))
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))
