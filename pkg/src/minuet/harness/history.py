"""Operation histories: globally ordered invocation/response records fed to
the strict-serializability checker."""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Event:
    proxy_id: int
    op_id: int
    kind: str        # put | get | remove | snap | scan
    args: tuple
    invoke: int      # monotonic ns
    response: int | None
    result: object

    def to_json(self) -> str:
        def enc(v):
            if isinstance(v, bytes):
                return {"b": v.hex()}
            if isinstance(v, tuple):
                return [enc(x) for x in v]
            if isinstance(v, list):
                return [enc(x) for x in v]
            return v
        return json.dumps({
            "proxy": self.proxy_id, "op": self.op_id, "kind": self.kind,
            "args": enc(self.args), "invoke": self.invoke,
            "response": self.response, "result": enc(self.result)},
            sort_keys=True)


class HistoryRecorder:
    """Thread-safe recorder with strictly increasing per-process timestamps."""

    def __init__(self):
        self._events: list = []
        self._lock = threading.Lock()
        self._op_counter = 0
        self._last_ts = 0

    def now(self) -> int:
        with self._lock:
            ts = time.monotonic_ns()
            if ts <= self._last_ts:
                ts = self._last_ts + 1
            self._last_ts = ts
            return ts

    def record(self, proxy_id: int, kind: str, args: tuple, invoke: int,
               response: int | None, result) -> None:
        with self._lock:
            self._op_counter += 1
            self._events.append(Event(proxy_id, self._op_counter, kind,
                                      args, invoke, response, result))

    def history(self) -> list:
        with self._lock:
            events = sorted(self._events, key=lambda e: e.invoke)
        _check_well_formed(events)
        return events


def _check_well_formed(events) -> None:
    per_proxy_last = {}
    for e in events:
        if e.response is not None and not e.invoke < e.response:
            raise ValueError(f"event {e.op_id} responds before invoking")
        last = per_proxy_last.get(e.proxy_id)
        if last is not None and e.invoke < last:
            raise ValueError(f"proxy {e.proxy_id} events out of order")
        if e.response is not None:
            per_proxy_last[e.proxy_id] = e.response


def history_to_ndjson(events) -> str:
    return "\n".join(e.to_json() for e in events) + "\n"
