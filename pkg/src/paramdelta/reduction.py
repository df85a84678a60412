"""Deterministic reductions and order-preserving parallel maps.

Sums are pairwise (tree) reductions over fixed 4096-element chunks, so the
result never depends on how work is split across threads.
"""

from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, TypeVar

import numpy as np

REDUCTION_CHUNK = 4096

T = TypeVar("T")
R = TypeVar("R")


def default_threads() -> int:
    raw = os.environ.get("PARAMDELTA_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"PARAMDELTA_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> Iterator[R]:
    """Like ``map`` but spread over a thread pool, yielding in input order.

    At most ``2 * threads`` results are in flight, which keeps memory bounded
    when each result is a buffer.
    """
    threads = default_threads() if threads is None else max(1, int(threads))
    if threads == 1:
        for item in items:
            yield fn(item)
        return
    window = 2 * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending: deque = deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= window:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _tree_rows(x: np.ndarray) -> np.ndarray:
    # pairwise-reduce each row of a (k, w) array down to (k,); w is a power of two
    while x.shape[1] > 1:
        x = x[:, 0::2] + x[:, 1::2]
    return x[:, 0]


def chunk_partials(values: np.ndarray) -> np.ndarray:
    """Pairwise sum of every 4096-element chunk of a flat float32 array.

    The trailing partial chunk is zero-padded, which does not change its sum.
    """
    values = np.asarray(values, dtype=np.float32).reshape(-1)
    n = values.size
    if n == 0:
        return np.zeros(0, dtype=np.float32)
    rows = -(-n // REDUCTION_CHUNK)
    padded = np.zeros(rows * REDUCTION_CHUNK, dtype=np.float32)
    padded[:n] = values
    return _tree_rows(padded.reshape(rows, REDUCTION_CHUNK))


def pairwise_sum(values: np.ndarray) -> np.float32:
    """Pairwise float32 sum of an arbitrary-length array of partial sums."""
    x = np.asarray(values, dtype=np.float32).reshape(-1)
    if x.size == 0:
        return np.float32(0.0)
    while x.size > 1:
        if x.size % 2:
            x = np.append(x, np.float32(0.0))
        x = x[0::2] + x[1::2]
    return x[0]
