"""Centralized snapshot creation service.

All snapshot creation is funneled through one service so that at most one
creation transaction is in flight at a time, keeping contention off the
replicated tip objects. Concurrent requesters share work by borrowing: a
request that observes the creation counter advance by two or more between its
first read (outside the critical section) and its second read (inside) knows
that some complete creation started and finished while it was waiting, so the
most recent snapshot already reflects a state within this request's own
interval and can be returned as-is without breaking strict serializability.

A staleness policy rides on top for scans: with minimum interval k > 0, a new
snapshot is created at most once every k seconds and other scan requests
reuse the latest one, trading strict serializability for at most k seconds of
staleness.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

from . import branching, mvcc
from .clock import RealClock
from .config import MODE_BRANCHING
from .errors import TxnAborted, Unreachable


@dataclass
class _LineState:
    """Shared creation state for one line of snapshots."""

    sid: int
    loc: object
    num_snapshots: int = 0
    mutex: object = None


@dataclass
class RequestRecord:
    invoke: float
    response: float
    sid: int
    borrowed: bool


@dataclass
class ScanRecord:
    at: float
    sid: int
    age: float
    created: bool


class SnapshotService:
    def __init__(self, tree, directory, *, clock=None, k: float = 0.0,
                 lock_factory=threading.Lock, initial_loc=None):
        self.tree = tree
        self.directory = directory
        self.clock = clock or RealClock()
        self.k = k
        self._lock_factory = lock_factory
        self._lines: dict = {}
        self._lines_guard = lock_factory()
        self._branch_mutex = lock_factory()
        self._policy_lock = lock_factory()
        self._initial_loc = initial_loc
        self._last_scan = None
        self._last_scan_created_at = None
        self._log_lock = threading.Lock()
        self.request_log: list = []
        self.creation_log: dict = {}
        self.scan_log: list = []
        self.created_count = 0
        self.borrowed_count = 0

    # ------------------------------------------------------------- creation

    def create_snapshot(self, from_sid=None):
        """Create or borrow a read-only snapshot; returns (sid, root location).

        The counter is read once outside the critical section and once inside;
        a jump of two or more proves a whole creation fits inside this
        request, making the latest snapshot borrowable.
        """
        invoked = self.clock.now()
        state = self._line("main" if from_sid is None else from_sid)
        tmp_num1 = state.num_snapshots
        with state.mutex:
            tmp_num2 = state.num_snapshots
            if tmp_num2 < tmp_num1 + 2:
                started = self.clock.now()
                sid, loc = self._create_once(from_sid)
                state.num_snapshots += 1
                state.sid, state.loc = sid, loc
                with self._log_lock:
                    self.creation_log[sid] = (started, self.clock.now())
                    self.created_count += 1
                borrowed = False
            else:
                borrowed = True
                with self._log_lock:
                    self.borrowed_count += 1
            sid, loc = state.sid, state.loc
        self.directory.record(sid, loc)
        with self._log_lock:
            self.request_log.append(
                RequestRecord(invoked, self.clock.now(), sid, borrowed))
        return sid, loc

    def create_branch(self, from_sid: int, *, beta=None) -> int:
        """Create a writable clone of an existing snapshot. Serialized through
        the service but never borrowed: a writable snapshot cannot be shared."""
        with self._branch_mutex:
            for _ in range(256):
                txn = self.tree.proxy.new_txn()
                try:
                    new_sid, root_ptr = branching.create_branch(
                        self.tree, txn, from_sid, beta=beta)
                    if txn.commit().committed:
                        return new_sid
                except TxnAborted:
                    pass
            raise Unreachable("branch creation kept aborting")

    def snapshot_for_scan(self):
        """Snapshot to run a scan against, governed by the staleness policy.
        k = 0 delegates to strict creation/borrowing."""
        if self.k <= 0:
            sid, loc = self.create_snapshot()
            with self._log_lock:
                self.scan_log.append(ScanRecord(self.clock.now(), sid, 0.0, True))
            return sid, loc
        with self._policy_lock:
            now = self.clock.now()
            if (self._last_scan is not None
                    and now - self._last_scan_created_at < self.k):
                sid, loc = self._last_scan
                with self._log_lock:
                    self.scan_log.append(ScanRecord(
                        now, sid, now - self._last_scan_created_at, False))
                return sid, loc
            sid, loc = self.create_snapshot()
            self._last_scan = (sid, loc)
            self._last_scan_created_at = self.clock.now()
            with self._log_lock:
                self.scan_log.append(ScanRecord(self.clock.now(), sid, 0.0, True))
            return sid, loc

    # -------------------------------------------------------------- internals

    def _line(self, key) -> _LineState:
        with self._lines_guard:
            state = self._lines.get(key)
            if state is None:
                state = _LineState(0, self._initial_loc, 0, self._lock_factory())
                self._lines[key] = state
            return state

    def _create_once(self, from_sid):
        branching_mode = self.tree.config.mode == MODE_BRANCHING
        for _ in range(256):
            txn = self.tree.proxy.new_txn()
            try:
                if branching_mode:
                    tip, tip_loc = branching.resolve_writable_tip(
                        self.tree, txn, from_sid)
                    branching.create_branch(self.tree, txn, tip)
                    result = (tip, tip_loc)
                else:
                    result = mvcc.create_snapshot(self.tree, txn)
                if txn.commit().committed:
                    return result
            except TxnAborted:
                pass
            self.tree.proxy.refresh_tip()
        raise Unreachable("snapshot creation kept aborting")
