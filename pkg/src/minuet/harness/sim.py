"""Deterministic scheduler for adversarial interleavings.

Workers run in real threads, but only one is ever runnable: each worker
parks at a gate before every memnode exchange (the transport's gate hook) and
advances only when granted a step. Between grants every other worker is
blocked, so execution is fully determined by the schedule: the sequence of
worker names granted. The scheduler can replay an explicit schedule, drive a
seeded random one, or enumerate every interleaving by depth-first replay.

Locks shared by scenario workers (such as the snapshot service's critical
section) must be gate-aware, otherwise a granted worker could block forever
on a lock held by a parked one; ``SchedLock`` spins through gates instead.
"""
from __future__ import annotations

import random
import threading
from dataclasses import dataclass

from ..errors import MinuetError, UnknownScenario

_WAIT = 30.0  # seconds to wait for a worker step before declaring deadlock


class SimDeadlock(MinuetError):
    pass


@dataclass
class Step:
    index: int
    worker: str
    info: str


class _Worker:
    def __init__(self, name, fn):
        self.name = name
        self.fn = fn
        self.grant = threading.Event()
        self.parked = threading.Event()
        self.done = False
        self.error = None
        self.result = None
        self.info = "start"
        self.thread = None


class Scheduler:
    def __init__(self):
        self._workers: dict = {}
        self._order: list = []
        self._local = threading.local()
        self._wake = threading.Condition()
        self.trace: list = []
        self.step_limit = 100_000

    # -- worker side ---------------------------------------------------------

    def spawn(self, name: str, fn) -> None:
        worker = _Worker(name, fn)
        self._workers[name] = worker
        self._order.append(name)

        def body():
            self._local.name = name
            self.gate("start")
            try:
                worker.result = fn()
            except BaseException as exc:  # recorded, not raised here
                worker.error = exc
            finally:
                with self._wake:
                    worker.done = True
                    worker.parked.set()
                    self._wake.notify_all()

        worker.thread = threading.Thread(target=body, daemon=True)

    def gate(self, info: str = "") -> None:
        """Park the calling worker until granted. No-op for foreign threads
        (setup code may drive the same transports)."""
        name = getattr(self._local, "name", None)
        if name is None:
            return
        worker = self._workers[name]
        with self._wake:
            worker.info = info
            worker.parked.set()
            self._wake.notify_all()
        worker.grant.wait()
        worker.grant.clear()

    # -- scheduler side --------------------------------------------------------

    def run(self, chooser) -> list:
        """Drive all workers to completion. ``chooser(step_idx, runnable)``
        picks the next worker name from the sorted runnable list. Returns the
        list of Steps taken."""
        for worker in self._workers.values():
            worker.thread.start()
        steps = []
        idx = 0
        while True:
            runnable = self._await_quiescence()
            if not runnable:
                break
            if idx >= self.step_limit:
                raise SimDeadlock("step limit exceeded; schedule livelocks")
            name = chooser(idx, runnable)
            worker = self._workers[name]
            steps.append(Step(idx, name, worker.info))
            worker.parked.clear()
            worker.grant.set()
            idx += 1
        self.trace = steps
        return steps

    def _await_quiescence(self):
        """Sorted names of parked workers once every worker is parked or done."""
        with self._wake:
            while True:
                busy = [w for w in self._workers.values()
                        if not w.done and not w.parked.is_set()]
                if not busy:
                    break
                if not self._wake.wait(timeout=_WAIT):
                    raise SimDeadlock(
                        f"workers stuck mid-step: {[w.name for w in busy]}")
            return sorted(w.name for w in self._workers.values()
                          if not w.done and w.parked.is_set())

    def results(self) -> dict:
        out = {}
        for name, worker in self._workers.items():
            out[name] = worker.error if worker.error is not None else worker.result
        return out


class SchedLock:
    """Mutual exclusion that yields through the scheduler instead of
    blocking, so the lock holder can be granted steps to finish."""

    def __init__(self, scheduler: Scheduler):
        self._scheduler = scheduler
        self._lock = threading.Lock()

    def __enter__(self):
        while not self._lock.acquire(blocking=False):
            self._scheduler.gate("lock-wait")
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False


# -------------------------------------------------------------- exploration

def run_schedule(factory, plan, seed: int = 0):
    """One deterministic run. ``plan`` is a list of (worker, count) pairs;
    count "drain" runs the worker until it cannot be scheduled. Leftover
    steps after the plan follow a seeded random chooser."""
    scheduler = Scheduler()
    finish = factory(scheduler)
    rng = random.Random(seed)
    compiled = []
    for name, count in plan:
        compiled.append((name, count))

    state = {"i": 0, "left": None}

    def chooser(idx, runnable):
        while state["i"] < len(compiled):
            name, count = compiled[state["i"]]
            if state["left"] is None:
                state["left"] = count
            if name not in runnable or state["left"] == 0:
                state["i"] += 1
                state["left"] = None
                continue
            if state["left"] != "drain":
                state["left"] -= 1
            return name
        return rng.choice(runnable)

    steps = scheduler.run(chooser)
    return steps, scheduler.results(), finish()


def run_random(factory, seed: int = 0):
    scheduler = Scheduler()
    finish = factory(scheduler)
    rng = random.Random(seed)
    steps = scheduler.run(lambda idx, runnable: rng.choice(runnable))
    return steps, scheduler.results(), finish()


def explore_interleavings(factory, limit: int = 20_000):
    """Run ``factory`` under every possible interleaving (depth-first replay
    of scheduling choices). Yields (choices, steps, results, outcome) per
    complete schedule."""
    stack = [()]
    runs = 0
    while stack:
        prefix = stack.pop()
        scheduler = Scheduler()
        finish = factory(scheduler)
        choice_log = []
        runnable_log = []

        def chooser(idx, runnable):
            runnable_log.append(runnable)
            name = prefix[idx] if idx < len(prefix) else runnable[0]
            if name not in runnable:
                raise SimDeadlock("replay diverged; nondeterministic scenario")
            choice_log.append(name)
            return name

        steps = scheduler.run(chooser)
        outcome = finish()
        runs += 1
        if runs > limit:
            raise MinuetError(f"interleaving space exceeds {limit} runs")
        yield tuple(choice_log), steps, scheduler.results(), outcome
        for i in range(len(choice_log) - 1, len(prefix) - 1, -1):
            for alt in runnable_log[i]:
                if alt != choice_log[i]:
                    stack.append(tuple(choice_log[:i]) + (alt,))
