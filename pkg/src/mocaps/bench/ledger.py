"""Accounting of cached activations.

Every array retained for a backward pass (tape operands, the chain's terminal
snapshot, the per-layer recompute tape) is acquired here and released when
the consumer is done with it.  Arrays are de-duplicated by identity, so an
activation referenced by two consumers is counted once.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager

SITES = ("tape", "chain", "transient")


class MemoryLedger:
    def __init__(self):
        self._lock = threading.Lock()
        self._entries = {}  # id -> [array, refcount, site]
        self.live_bytes = 0
        self.peak_bytes = 0
        self.site_bytes = {s: 0 for s in SITES}
        self.site_peak = {s: 0 for s in SITES}
        self.snapshots = {}

    def acquire(self, array, site: str = "tape") -> None:
        if site not in self.site_bytes:
            raise ValueError(f"unknown ledger site {site!r}")
        key = id(array)
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None:
                entry[1] += 1
                return
            self._entries[key] = [array, 1, site]
            nbytes = int(array.nbytes)
            self.live_bytes += nbytes
            self.site_bytes[site] += nbytes
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)
            self.site_peak[site] = max(self.site_peak[site], self.site_bytes[site])

    def release(self, array) -> None:
        key = id(array)
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                raise KeyError("releasing an array the ledger does not hold")
            entry[1] -= 1
            if entry[1] == 0:
                del self._entries[key]
                nbytes = int(entry[0].nbytes)
                self.live_bytes -= nbytes
                self.site_bytes[entry[2]] -= nbytes

    def snapshot(self, phase: str) -> int:
        """Record the current live byte count under ``phase`` and return it."""
        with self._lock:
            self.snapshots[phase] = self.live_bytes
            return self.live_bytes

    def reset_peak(self) -> None:
        with self._lock:
            self.peak_bytes = self.live_bytes
            self.site_peak = dict(self.site_bytes)

    @property
    def held(self) -> int:
        return len(self._entries)


_current = MemoryLedger()


def current_ledger() -> MemoryLedger:
    return _current


@contextmanager
def use_ledger(ledger: MemoryLedger):
    """Route all accounting inside the block to ``ledger``."""
    global _current
    previous = _current
    _current = ledger
    try:
        yield ledger
    finally:
        _current = previous
