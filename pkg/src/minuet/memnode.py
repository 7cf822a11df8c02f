"""Storage node: a byte-addressable space plus a minitransaction executor.

The memnode knows nothing about B-tree nodes or sequence numbers; it locks
the exact byte ranges touched by a minitransaction, evaluates comparisons
against current memory, and applies writes atomically. It acts as a one-phase
executor when a batch involves only this node, and as a two-phase participant
otherwise.

Locking rules:
  * All item ranges (compare, read, and write) are locked exclusively for the
    duration of the prepared window. Overlap is detected by interval
    comparison on exact byte ranges.
  * A non-blocking request that hits a busy lock answers LOCK_BUSY at once.
    A blocking request waits up to the configured threshold first, then
    answers LOCK_BUSY like an ordinary one.
  * Prepared transactions that are never finalized self-abort after the
    recovery interval; a late finalize is acknowledged as unknown.

The address space is zero-initialized so test baselines are deterministic.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .clock import RealClock
from .errors import OutOfRange
from .minitxn import MiniTransaction, MtOutcome, MtResult


@dataclass
class _Prepared:
    txn_id: str
    mt: MiniTransaction
    ranges: list
    deadline: float


@dataclass
class LockTable:
    """Held byte ranges per transaction plus a FIFO of blocked waiters."""

    held: dict = field(default_factory=dict)       # txn_id -> list[AddressRange]
    wait_fifo: list = field(default_factory=list)  # ticket ids, oldest first

    def conflicts(self, ranges, txn_id) -> bool:
        for holder, hranges in self.held.items():
            if holder == txn_id:
                continue
            for hr in hranges:
                for r in ranges:
                    if hr.overlaps(r):
                        return True
        return False

    def holders_of(self, ranges, txn_id) -> set:
        out = set()
        for holder, hranges in self.held.items():
            if holder == txn_id:
                continue
            for hr in hranges:
                if any(hr.overlaps(r) for r in ranges):
                    out.add(holder)
                    break
        return out

    def acquire(self, txn_id, ranges) -> None:
        self.held.setdefault(txn_id, []).extend(ranges)

    def release(self, txn_id) -> None:
        self.held.pop(txn_id, None)


class Memnode:
    """One storage server. Thread safe; requests from many connections may
    interleave arbitrarily, constrained only by the lock semantics."""

    def __init__(self, memnode_id: int, size: int, *,
                 block_threshold_ms: float = 50.0,
                 txn_recovery_ms: float = 5000.0,
                 clock=None):
        self.memnode_id = memnode_id
        self.size = size
        self.memory = bytearray(size)
        self.locks = LockTable()
        self._prepared: dict = {}
        self._block_threshold = block_threshold_ms / 1000.0
        self._recovery = txn_recovery_ms / 1000.0
        self._clock = clock or RealClock()
        self._mutex = threading.Lock()
        self._released = threading.Condition(self._mutex)
        self._ticket = 0

    # -- public protocol -------------------------------------------------

    def prepare(self, txn_id: str, mt: MiniTransaction) -> MtResult:
        """Phase one: lock, compare, capture reads. Holds locks only on an
        Ok vote; Ok is represented as a COMMITTED-outcome result whose
        read_data carries the captured bytes."""
        self._check_bounds(mt)
        with self._mutex:
            if txn_id in self._prepared:
                raise ValueError(f"txn {txn_id} already prepared here")
            if not self._lock_for(txn_id, mt):
                return MtResult(MtOutcome.LOCK_BUSY)
            failed = self._eval_compares(mt)
            if failed:
                self.locks.release(txn_id)
                self._released.notify_all()
                return MtResult(MtOutcome.BAD_COMPARE, failed_compares=failed)
            data = [bytes(self.memory[r.offset:r.end]) for r in mt.reads]
            self._prepared[txn_id] = _Prepared(
                txn_id, mt, mt.item_ranges(),
                self._clock.now() + self._recovery)
            return MtResult(MtOutcome.COMMITTED, read_data=data)

    def finalize(self, txn_id: str, commit: bool) -> bool:
        """Phase two. Returns False for an unknown (or already finalized)
        transaction; the call is acknowledged either way."""
        with self._mutex:
            prep = self._prepared.pop(txn_id, None)
            if prep is None:
                return False
            if commit:
                self._apply_writes(prep.mt)
            self.locks.release(txn_id)
            self._released.notify_all()
            return True

    def exec_one_phase(self, mt: MiniTransaction) -> MtResult:
        """Prepare plus finalize collapsed into one exchange."""
        self._check_bounds(mt)
        with self._mutex:
            txn_id = f"_1p:{self.memnode_id}:{self._ticket}"
            self._ticket += 1
            if not self._lock_for(txn_id, mt):
                return MtResult(MtOutcome.LOCK_BUSY)
            try:
                failed = self._eval_compares(mt)
                if failed:
                    return MtResult(MtOutcome.BAD_COMPARE, failed_compares=failed)
                data = [bytes(self.memory[r.offset:r.end]) for r in mt.reads]
                self._apply_writes(mt)
                return MtResult(MtOutcome.COMMITTED, read_data=data)
            finally:
                self.locks.release(txn_id)
                self._released.notify_all()

    # -- test and bootstrap helpers ---------------------------------------

    def peek(self, offset: int, length: int) -> bytes:
        with self._mutex:
            return bytes(self.memory[offset:offset + length])

    def poke(self, offset: int, data: bytes) -> None:
        """Direct write, for cluster bootstrap before serving begins."""
        with self._mutex:
            self.memory[offset:offset + len(data)] = data

    def prepared_txn_ids(self) -> set:
        with self._mutex:
            return set(self._prepared)

    def held_lock_count(self) -> int:
        with self._mutex:
            return sum(len(v) for v in self.locks.held.values())

    # -- internals --------------------------------------------------------

    def _check_bounds(self, mt: MiniTransaction) -> None:
        for r in mt.item_ranges():
            if r.memnode_id != self.memnode_id:
                raise OutOfRange(f"item for memnode {r.memnode_id} sent to {self.memnode_id}")
            if r.end > self.size:
                raise OutOfRange(f"range {r.offset}..{r.end} exceeds size {self.size}")

    def _lock_for(self, txn_id, mt) -> bool:
        """Acquire all item ranges or none. Caller holds the mutex."""
        ranges = mt.item_ranges()
        if not ranges:
            return True
        self._expire_stale_prepared()
        if not self.locks.conflicts(ranges, txn_id):
            self.locks.acquire(txn_id, ranges)
            return True
        if not mt.blocking:
            return False
        deadline = self._clock.now() + self._block_threshold
        ticket = self._ticket
        self._ticket += 1
        self.locks.wait_fifo.append(ticket)
        try:
            while True:
                remaining = deadline - self._clock.now()
                if remaining <= 0:
                    return False
                self._released.wait(timeout=remaining)
                self._expire_stale_prepared()
                # FIFO courtesy: younger waiters yield to older ones.
                if self.locks.wait_fifo and self.locks.wait_fifo[0] != ticket:
                    continue
                if not self.locks.conflicts(ranges, txn_id):
                    self.locks.acquire(txn_id, ranges)
                    return True
        finally:
            self.locks.wait_fifo.remove(ticket)
            self._released.notify_all()

    def _expire_stale_prepared(self) -> None:
        """Self-abort prepared transactions whose coordinator went silent."""
        now = self._clock.now()
        stale = [t for t, p in self._prepared.items() if p.deadline < now]
        for txn_id in stale:
            del self._prepared[txn_id]
            self.locks.release(txn_id)
        if stale:
            self._released.notify_all()

    def _eval_compares(self, mt) -> list:
        return [i for i, c in enumerate(mt.compares)
                if bytes(self.memory[c.range.offset:c.range.end]) != c.expected]

    def _apply_writes(self, mt) -> None:
        for w in mt.writes:
            self.memory[w.range.offset:w.range.end] = w.data
