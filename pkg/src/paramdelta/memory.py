"""Accounting of live tensor buffers.

Every array that holds tensor data (decoded reads, accumulators, encoded
output) is registered here. ``BufferMonitor`` exposes the peak number of
bytes simultaneously alive, which the bounded-memory tests assert on.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager

import numpy as np

_lock = threading.Lock()
_live = 0
_monitors: list["BufferMonitor"] = []


class BufferMonitor:
    def __init__(self) -> None:
        self.peak = 0
        self.allocations = 0
        self.largest = 0

    def _observe(self, live: int, nbytes: int) -> None:
        self.peak = max(self.peak, live)
        self.largest = max(self.largest, nbytes)
        self.allocations += 1


def _release(nbytes: int) -> None:
    global _live
    with _lock:
        _live -= nbytes


def track(arr: np.ndarray) -> np.ndarray:
    """Register ``arr`` as a live tensor buffer until it is garbage collected."""
    global _live
    nbytes = int(arr.nbytes)
    if not _monitors or nbytes == 0:
        return arr
    with _lock:
        _live += nbytes
        for mon in _monitors:
            mon._observe(_live, nbytes)
    weakref.finalize(arr, _release, nbytes)
    return arr


def live_bytes() -> int:
    return _live


@contextmanager
def buffer_monitor():
    """Record the peak of live tensor-buffer bytes inside the block."""
    mon = BufferMonitor()
    with _lock:
        mon.peak = _live
        _monitors.append(mon)
    try:
        yield mon
    finally:
        with _lock:
            _monitors.remove(mon)
