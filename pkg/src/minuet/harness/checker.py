"""Strict-serializability checker for key-value histories.

Searches for a total order of operations that (a) respects real-time
precedence (an operation that finished before another began must appear
first) and (b) is a legal sequential execution of an ordered map with
snapshots: gets return the latest put, snapshot creation freezes the current
map under its snapshot id, and scans read frozen snapshots. Two snapshot
operations may return the same id (a borrowed snapshot); they are consistent
only if both can linearize at moments where the map is in the identical
state, which is exactly the guarantee borrowing claims.

The search walks the history in invocation order keeping a frontier: the
set of operations that may legally come next is limited to those overlapping
the earliest unfinished response, so its size is bounded by how many
operations were actually in flight at once, not by the history length.
States are memoized as (done-prefix, done-extras, map digest). Histories
whose in-flight width exceeds the configured bound are refused rather than
searched forever.

Pending operations (no response recorded) may take effect at any point after
their invocation or never; both possibilities are explored.
"""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import HistoryTooLarge

WIDTH_BOUND = 25
VISIT_BOUND = 4_000_000


@dataclass
class CheckResult:
    ok: bool
    witness: str | None = None
    checked_ops: int = 0
    max_width: int = 0

    def __bool__(self):
        return self.ok


def check_strict_serializability(events, width_bound: int = WIDTH_BOUND,
                                 initial_map: dict | None = None) -> CheckResult:
    ops = sorted(events, key=lambda e: (e.invoke, e.op_id))
    n = len(ops)
    if n == 0:
        return CheckResult(True)
    resp = [op.response if op.response is not None else float("inf")
            for op in ops]
    required = sum(1 for op in ops if op.response is not None)
    max_width = _max_in_flight(ops)
    if max_width > width_bound:
        raise HistoryTooLarge(
            f"history has {max_width} operations in flight at once; "
            f"the checkable bound is {width_bound}")

    init_state = (dict(initial_map) if initial_map else {}, {})
    visited = set()
    # Iterative DFS; each frame is (prefix, extras, state, done_completed).
    stack = [(0, frozenset(), init_state, 0)]
    best_progress = -1
    best_frontier: list = []
    visits = 0
    while stack:
        prefix, extras, state, done_completed = stack.pop()
        while prefix < n and ops[prefix].op_id in extras:
            extras = extras - {ops[prefix].op_id}
            prefix += 1
        key = (prefix, extras, _digest(state))
        if key in visited:
            continue
        visited.add(key)
        visits += 1
        if visits > VISIT_BOUND:
            raise HistoryTooLarge(
                f"state space exceeded {VISIT_BOUND} visited nodes")
        if done_completed == required:
            return CheckResult(True, checked_ops=n, max_width=max_width)
        undone = []
        m1 = m2 = float("inf")  # two smallest responses among undone ops
        for i in range(prefix, n):
            op = ops[i]
            if op.op_id in extras:
                continue
            if op.invoke > m1:
                break  # this and all later ops must follow some response
            undone.append(i)
            if resp[i] < m1:
                m1, m2 = resp[i], m1
            elif resp[i] < m2:
                m2 = resp[i]
        candidates = []
        for i in undone:
            min_other = m2 if resp[i] == m1 else m1
            if not min_other < ops[i].invoke:
                candidates.append(i)
        progress = prefix + len(extras)
        if progress > best_progress:
            best_progress = progress
            best_frontier = [ops[i] for i in candidates]
        for i in candidates:
            op = ops[i]
            applied = _apply(state, op)
            if applied is not None:
                new_done = done_completed + (op.response is not None)
                stack.append((prefix, extras | {op.op_id}, applied, new_done))
            if op.response is None:
                # A pending operation may also have never taken effect.
                stack.append((prefix, extras | {op.op_id}, state, done_completed))
    return CheckResult(False, witness=_witness_text(best_frontier),
                       checked_ops=n, max_width=max_width)


# ----------------------------------------------------------------- internals

def _max_in_flight(ops) -> int:
    points = []
    for op in ops:
        points.append((op.invoke, 1))
        points.append((op.response if op.response is not None
                       else float("inf"), -1))
    depth = peak = 0
    for _, delta in sorted(points, key=lambda p: (p[0], p[1])):
        depth += delta
        peak = max(peak, depth)
    return peak


def _apply(state, e):
    """Sequential ordered-map semantics; None if the recorded result is
    impossible at this point."""
    map_, snaps = state
    kind = e.kind
    if kind == "get":
        key = e.args[0]
        return state if map_.get(key) == e.result else None
    if kind == "put":
        key, value = e.args
        if e.response is not None and map_.get(key) != e.result:
            return None
        new_map = dict(map_)
        new_map[key] = value
        return (new_map, snaps)
    if kind == "remove":
        key = e.args[0]
        present = key in map_
        if e.response is not None and e.result != present:
            return None
        if not present:
            return state
        new_map = dict(map_)
        del new_map[key]
        return (new_map, snaps)
    if kind == "snap":
        sid = e.result
        if sid is None:
            return None
        frozen = tuple(sorted(map_.items()))
        if sid in snaps:
            return state if snaps[sid] == frozen else None
        new_snaps = dict(snaps)
        new_snaps[sid] = frozen
        return (map_, new_snaps)
    if kind == "scan":
        sid, start, count = e.args
        frozen = snaps.get(sid)
        if frozen is None:
            return None  # cannot linearize before the snapshot exists
        expect = [pair for pair in frozen if pair[0] >= start][:count]
        got = [tuple(pair) for pair in e.result]
        return state if got == expect else None
    raise ValueError(f"unknown op kind {kind!r}")


def _digest(state):
    map_, snaps = state
    return (tuple(sorted(map_.items())), tuple(sorted(snaps.items())))


def _witness_text(frontier):
    lines = ["no linearization extends past this frontier:"]
    for e in sorted(frontier, key=lambda e: e.invoke):
        lines.append(f"  op {e.op_id} proxy {e.proxy_id} {e.kind}{e.args!r} "
                     f"-> {e.result!r} [{e.invoke}..{e.response}]")
    return "\n".join(lines)
