"""Memory accounting, timing, and verification harnesses.

Only the ledger is imported eagerly; :mod:`mocaps.bench.measure` and
:mod:`mocaps.bench.checks` pull in the model and are imported on use.
"""
from mocaps.bench.ledger import MemoryLedger, current_ledger, use_ledger

__all__ = ["MemoryLedger", "current_ledger", "use_ledger"]
