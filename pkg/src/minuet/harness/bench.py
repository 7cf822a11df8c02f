"""Benchmark execution: drive a cluster with a generated workload and
collect metrics, optionally recording a history for the checker.

Two modes share all code above the worker loop:

  real  worker threads over the in-process cluster; wall-clock timing.
  sim   one deterministic scheduler thread interleaving virtual workers
        round-robin by a seeded RNG; a virtual clock advances per memnode
        exchange, so identical config and seed give identical metrics bytes.

The report is newline-delimited JSON records (docs/report-schema.md).
"""
from __future__ import annotations

import json
import random
import threading
import time
from dataclasses import dataclass, field

from ..clock import VirtualClock
from ..errors import MinuetError, RetriesExhausted
from .history import HistoryRecorder
from .workload import WorkloadSpec, generate

SIM_EXCHANGE_US = 100.0
SIM_BASE_US = 20.0


@dataclass
class Metrics:
    mode: str = "real"
    ops: int = 0
    committed: int = 0
    failed: int = 0
    duration_s: float = 0.0
    throughput: float = 0.0
    mean_latency_ms: float = 0.0
    p95_latency_ms: float = 0.0
    aborts: int = 0
    op_retries: int = 0
    lock_retries: int = 0
    messages: int = 0
    copies: int = 0
    discretionary_copies: int = 0
    splits: int = 0
    snapshots_created: int = 0
    snapshots_borrowed: int = 0
    time_series: list = field(default_factory=list)  # (second, committed ops)

    def to_records(self):
        core = {k: getattr(self, k) for k in (
            "mode", "ops", "committed", "failed", "duration_s", "throughput",
            "mean_latency_ms", "p95_latency_ms", "aborts", "op_retries",
            "lock_retries", "messages", "copies", "discretionary_copies",
            "splits", "snapshots_created", "snapshots_borrowed")}
        records = [{"record": "metrics", **core}]
        for second, ops in self.time_series:
            records.append({"record": "timeseries", "second": second, "ops": ops})
        return records

    def to_ndjson(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True)
                         for r in self.to_records()) + "\n"


@dataclass
class BenchResult:
    metrics: Metrics
    history: list | None = None
    initial_map: dict = field(default_factory=dict)  # post-load contents


def run_benchmark(cluster, spec: WorkloadSpec, *, mode: str = "real",
                  record_history: bool = False, snapshot_at=(),
                  report_path: str | None = None) -> BenchResult:
    spec.validate()
    if mode not in ("real", "sim"):
        raise ValueError(f"unknown mode {mode!r}")
    load_ops, run_ops = generate(spec)
    loader = cluster.tree(0)
    initial_map = {}
    for op in load_ops:
        loader.put(op.key, op.value)
        initial_map[op.key] = op.value
    recorder = HistoryRecorder() if record_history else None
    if mode == "real":
        metrics = _run_real(cluster, spec, run_ops, recorder, snapshot_at)
    else:
        metrics = _run_sim(cluster, spec, run_ops, recorder, snapshot_at)
    _fill_counters(cluster, metrics)
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(metrics.to_ndjson())
    history = recorder.history() if recorder else None
    return BenchResult(metrics, history, initial_map)


# ----------------------------------------------------------------- real mode

def _run_real(cluster, spec, run_ops, recorder, snapshot_at):
    workers = []
    trees = cluster.trees
    worker_count = max(1, spec.threads_per_proxy) * len(trees)
    latencies = [[] for _ in range(worker_count)]
    stamps = [[] for _ in range(worker_count)]
    fails = [0] * worker_count
    start = time.monotonic()

    def run_worker(w):
        tree = trees[w % len(trees)]
        my_ops = run_ops[w::worker_count]
        for op in my_ops:
            t0 = time.monotonic()
            try:
                _apply(cluster, tree, op, recorder, w)
            except (RetriesExhausted, MinuetError):
                fails[w] += 1
                continue
            t1 = time.monotonic()
            latencies[w].append(t1 - t0)
            stamps[w].append(t1 - start)

    for w in range(worker_count):
        workers.append(threading.Thread(target=run_worker, args=(w,)))
    stop = threading.Event()
    snapper = None
    if snapshot_at:
        def fire_snapshots():
            for at in sorted(snapshot_at):
                while not stop.is_set() and time.monotonic() - start < at:
                    time.sleep(0.001)
                if stop.is_set():
                    return
                cluster.scs.create_snapshot()
        snapper = threading.Thread(target=fire_snapshots)
        snapper.start()
    for t in workers:
        t.start()
    for t in workers:
        t.join()
    stop.set()
    if snapper:
        snapper.join()
    duration = time.monotonic() - start
    flat = sorted(x for chunk in latencies for x in chunk)
    metrics = Metrics(mode="real", ops=len(run_ops),
                      committed=len(flat), failed=sum(fails),
                      duration_s=round(duration, 6))
    _latency_stats(metrics, flat, duration)
    buckets = {}
    for chunk in stamps:
        for s in chunk:
            buckets[int(s)] = buckets.get(int(s), 0) + 1
    metrics.time_series = sorted(buckets.items())
    return metrics


# ------------------------------------------------------------------ sim mode

def _run_sim(cluster, spec, run_ops, recorder, snapshot_at):
    """Deterministic single-thread execution with a virtual clock: each op's
    virtual latency is a fixed base plus a fixed cost per memnode exchange."""
    clock = VirtualClock()
    rng = random.Random(spec.seed)
    worker_count = max(1, spec.threads_per_proxy) * len(cluster.trees)
    queues = [list(reversed(run_ops[w::worker_count]))
              for w in range(worker_count)]
    pending_snapshots = sorted(snapshot_at, reverse=True)
    latencies = []
    buckets = {}
    failed = 0
    while any(queues):
        while pending_snapshots and clock.now() >= pending_snapshots[-1]:
            pending_snapshots.pop()
            cluster.scs.create_snapshot()
        live = [w for w, q in enumerate(queues) if q]
        w = rng.choice(live)
        op = queues[w].pop()
        tree = cluster.trees[w % len(cluster.trees)]
        before = _total_exchanges(cluster)
        t0 = clock.now()
        try:
            _apply(cluster, tree, op, recorder, w, clock=clock)
        except (RetriesExhausted, MinuetError):
            failed += 1
            continue
        exchanges = _total_exchanges(cluster) - before
        cost = (SIM_BASE_US + SIM_EXCHANGE_US * exchanges) / 1e6
        clock.advance(cost)
        t1 = clock.now()
        latencies.append(t1 - t0)
        buckets[int(t1)] = buckets.get(int(t1), 0) + 1
    duration = clock.now()
    flat = sorted(latencies)
    metrics = Metrics(mode="sim", ops=len(run_ops), committed=len(flat),
                      failed=failed, duration_s=round(duration, 6))
    _latency_stats(metrics, flat, duration)
    metrics.time_series = sorted(buckets.items())
    return metrics


# ------------------------------------------------------------------ shared

def _apply(cluster, tree, op, recorder, worker, clock=None):
    invoke = recorder.now() if recorder else 0
    if op.kind in ("insert", "update"):
        result = tree.put(op.key, op.value)
        kind, args = "put", (op.key, op.value)
    elif op.kind == "read":
        result = tree.get(op.key)
        kind, args = "get", (op.key,)
    elif op.kind == "remove":
        result = tree.remove(op.key)
        kind, args = "remove", (op.key,)
    elif op.kind == "scan":
        sid, _loc = cluster.scs.snapshot_for_scan()
        if recorder:
            mid = recorder.now()
            recorder.record(worker, "snap", (), invoke, mid, sid)
            invoke = mid
        result = tree.scan(op.key, op.count, sid)
        kind, args = "scan", (sid, op.key, op.count)
    else:
        raise ValueError(f"unknown op kind {op.kind}")
    if recorder:
        recorder.record(worker, kind, args, invoke, recorder.now(), result)
    return result


def _total_exchanges(cluster):
    total = sum(p.transport.stats.exchanges for p in cluster.proxies)
    return total + cluster.scs.tree.proxy.transport.stats.exchanges


def _latency_stats(metrics, sorted_latencies, duration):
    if sorted_latencies:
        metrics.mean_latency_ms = round(
            sum(sorted_latencies) / len(sorted_latencies) * 1000, 6)
        p95_idx = min(len(sorted_latencies) - 1,
                      int(0.95 * len(sorted_latencies)))
        metrics.p95_latency_ms = round(sorted_latencies[p95_idx] * 1000, 6)
    if duration > 0:
        metrics.throughput = round(metrics.committed / duration, 3)


def _fill_counters(cluster, metrics):
    proxies = list(cluster.proxies) + [cluster.scs.tree.proxy]
    metrics.aborts = sum(p.counters.aborts for p in proxies)
    metrics.copies = sum(p.counters.copies for p in proxies)
    metrics.discretionary_copies = sum(
        p.counters.discretionary_copies for p in proxies)
    metrics.splits = sum(p.counters.splits for p in proxies)
    metrics.op_retries = sum(
        p.counters.attempts - p.counters.ops for p in proxies)
    metrics.lock_retries = sum(p.executor.retry_count for p in proxies)
    metrics.messages = _total_exchanges(cluster)
    metrics.snapshots_created = cluster.scs.created_count
    metrics.snapshots_borrowed = cluster.scs.borrowed_count
