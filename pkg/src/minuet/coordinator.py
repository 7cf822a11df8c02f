"""Proxy-side minitransaction coordinator.

Chooses one-phase execution when a batch touches a single memnode and the
two-phase protocol otherwise. Busy locks are retried transparently with
jittered exponential backoff; failed comparisons are returned to the caller
immediately and never retried, since they reflect a real committed state.
"""
from __future__ import annotations

import itertools
import random
import threading

from .clock import RealClock
from .errors import RetriesExhausted, Unreachable
from .minitxn import (MiniTransaction, MtOutcome, MtResult, spread_plan)

_txn_counter = itertools.count(1)
_counter_lock = threading.Lock()


def _next_txn_id(tag: str) -> str:
    with _counter_lock:
        return f"{tag}:{next(_txn_counter)}"


class MinitxnExecutor:
    def __init__(self, transport, *, tag: str = "p0", max_attempts: int = 32,
                 backoff_initial_ms: float = 1.0, clock=None, seed=None):
        self.transport = transport
        self.tag = tag
        self.max_attempts = max_attempts
        self.backoff_initial = backoff_initial_ms / 1000.0
        self.clock = clock or RealClock()
        self.rng = random.Random(seed)
        self.retry_count = 0

    def execute(self, mt: MiniTransaction) -> MtResult:
        """Run one minitransaction to a definite outcome.

        Returns COMMITTED or BAD_COMPARE; LOCK_BUSY is consumed by the retry
        loop and surfaces only as RetriesExhausted.
        """
        mt.validate()
        if mt.is_empty():
            return MtResult(MtOutcome.COMMITTED)
        plan = spread_plan(mt)
        backoff = self.backoff_initial
        for attempt in range(self.max_attempts):
            if attempt:
                self.retry_count += 1
                self.clock.sleep(backoff * self.rng.uniform(0.5, 1.5))
                backoff = min(backoff * 2, 0.1)
            if len(plan) == 1:
                res = self._one_phase(plan)
            else:
                res = self._two_phase(mt, plan)
            if res.outcome is not MtOutcome.LOCK_BUSY:
                return res
        raise RetriesExhausted(
            f"minitransaction still lock-busy after {self.max_attempts} attempts")

    # -- internals --------------------------------------------------------

    def _one_phase(self, plan) -> MtResult:
        (mid, part), = plan.items()
        res = self.transport.exec_one_phase(mid, part.mt)
        if res.committed:
            return MtResult(MtOutcome.COMMITTED,
                            read_data=_reorder(res.read_data, part.read_idx))
        if res.outcome is MtOutcome.BAD_COMPARE:
            failed = [part.compare_idx[i] for i in res.failed_compares]
            return MtResult(MtOutcome.BAD_COMPARE, failed_compares=failed)
        return res

    def _two_phase(self, mt, plan) -> MtResult:
        txn_id = _next_txn_id(self.tag)
        votes = {}
        verdict = None
        for mid in sorted(plan):
            try:
                vote = self.transport.prepare(mid, txn_id, plan[mid].mt)
            except Unreachable:
                self._finalize_all(votes, txn_id, commit=False)
                raise
            votes[mid] = vote
            if not vote.committed:
                verdict = (mid, vote)
                break
        if verdict is None:
            self._finalize_all(votes, txn_id, commit=True)
            read_data = [b""] * len(mt.reads)
            for mid, part in plan.items():
                for local, pos in enumerate(part.read_idx):
                    read_data[pos] = votes[mid].read_data[local]
            return MtResult(MtOutcome.COMMITTED, read_data=read_data)
        # Abort every participant that voted Ok; the failing one holds no locks.
        ok_votes = {m: v for m, v in votes.items() if v.committed}
        self._finalize_all(ok_votes, txn_id, commit=False)
        mid, vote = verdict
        if vote.outcome is MtOutcome.BAD_COMPARE:
            failed = [plan[mid].compare_idx[i] for i in vote.failed_compares]
            return MtResult(MtOutcome.BAD_COMPARE, failed_compares=failed)
        return MtResult(MtOutcome.LOCK_BUSY)

    def _finalize_all(self, votes, txn_id, commit: bool) -> None:
        for mid in sorted(votes):
            self.transport.finalize(mid, txn_id, commit)


def _reorder(values, idx):
    out = [b""] * len(values)
    for local, pos in enumerate(idx):
        out[pos] = values[local]
    return out
