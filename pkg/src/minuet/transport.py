"""The transport seam between proxies and memnodes.

Everything above this seam (coordinator, dynamic transactions, B-tree logic)
is identical whether memnodes are objects in the same process or servers
across a network. ``LocalTransport`` makes direct calls; the socket client in
``gateway.py`` implements the same three methods over the wire. Every method
call is one request/response exchange, which is what the message counters
count.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field


@dataclass
class TransportStats:
    """Request/response pair counters, grouped by memnode and message kind."""

    exchanges: int = 0
    by_memnode: dict = field(default_factory=dict)
    by_kind: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, memnode_id: int, kind: str) -> None:
        with self._lock:
            self.exchanges += 1
            self.by_memnode[memnode_id] = self.by_memnode.get(memnode_id, 0) + 1
            self.by_kind[kind] = self.by_kind.get(kind, 0) + 1

    def snapshot(self) -> int:
        with self._lock:
            return self.exchanges


class LocalTransport:
    """In-process transport. An optional gate hook runs before each exchange;
    the deterministic scheduler uses it to make every exchange a schedulable
    point."""

    def __init__(self, memnodes, stats: TransportStats | None = None, gate=None):
        self._memnodes = memnodes
        self.stats = stats or TransportStats()
        self._gate = gate

    @property
    def memnode_count(self) -> int:
        return len(self._memnodes)

    def prepare(self, memnode_id, txn_id, mt):
        self._enter(memnode_id, "prepare")
        return self._memnodes[memnode_id].prepare(txn_id, mt)

    def finalize(self, memnode_id, txn_id, commit):
        self._enter(memnode_id, "finalize")
        return self._memnodes[memnode_id].finalize(txn_id, commit)

    def exec_one_phase(self, memnode_id, mt):
        self._enter(memnode_id, "exec1")
        return self._memnodes[memnode_id].exec_one_phase(mt)

    def _enter(self, memnode_id, kind):
        if self._gate is not None:
            self._gate(f"{kind}@m{memnode_id}")
        self.stats.record(memnode_id, kind)
