"""Benchmark and correctness CLI.

    minuet-bench --workload w.conf --seed 7 --mode real --report out.ndjson
    minuet-bench --scenario fig3_internal_split_race
    minuet-bench --list-scenarios

Runs a workload against an in-process cluster (built from --config when
given, desk-scale defaults otherwise) or one of the built-in adversarial
scenarios. When a history is recorded it is checked for strict
serializability; the exit code is 0 only if every check passed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from ..cluster import LocalCluster
from ..config import ClusterConfig, load_config
from ..errors import HistoryTooLarge, MinuetError
from .bench import run_benchmark
from .checker import check_strict_serializability
from .scenarios import scenario_names, simulate
from .workload import WorkloadSpec, parse_workload

CHECK_LIMIT = 20_000  # ops; histories beyond this are not auto-checked


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="minuet-bench",
        description="Benchmark runner, scenario simulator, and history checker.")
    parser.add_argument("--config", help="cluster config file (in-process run)")
    parser.add_argument("--workload", help="workload spec file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--mode", choices=["real", "sim"], default="real")
    parser.add_argument("--scenario", help="run a built-in scenario instead")
    parser.add_argument("--report", help="write ndjson report/trace here")
    parser.add_argument("--check", choices=["auto", "on", "off"], default="auto",
                        help="strict-serializability check of the history")
    parser.add_argument("--snapshot-interval-k", type=float, default=None,
                        help="minimum seconds between scan snapshots")
    parser.add_argument("--list-scenarios", action="store_true")
    args = parser.parse_args(argv)

    if args.list_scenarios:
        for name in scenario_names():
            print(name)
        return 0

    if args.scenario:
        return _run_scenario(args)
    return _run_workload(args)


def _run_scenario(args) -> int:
    run = simulate(args.scenario, seed=args.seed or 0)
    print(f"scenario {run.name}: {'PASS' if run.ok else 'FAIL'}")
    print(f"  outcome: {json.dumps(run.outcome, sort_keys=True)}")
    if args.report:
        with open(args.report, "wb") as fh:
            fh.write(run.trace_bytes())
        print(f"  trace written to {args.report}")
    return 0 if run.ok else 1


def _run_workload(args) -> int:
    if args.config:
        config = load_config(args.config)
    else:
        config = ClusterConfig(memnodes=["m0", "m1", "m2"],
                               node_size=4096,
                               address_space=16 * 1024 * 1024)
    if args.workload:
        with open(args.workload, "r", encoding="utf-8") as fh:
            spec = parse_workload(fh.read())
    else:
        spec = WorkloadSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    k = args.snapshot_interval_k
    if k is None:
        k = spec.snapshot_interval_k
    config = config.with_overrides(snapshot_interval_k=k)

    check = args.check
    if check == "auto":
        check = "on" if spec.operation_count <= CHECK_LIMIT else "off"
    cluster = LocalCluster(config, seed=spec.seed)
    cluster.scs.k = k
    try:
        result = run_benchmark(cluster, spec, mode=args.mode,
                               record_history=(check == "on"),
                               report_path=args.report)
    except MinuetError as exc:
        print(f"benchmark failed: {exc}", file=sys.stderr)
        return 2
    m = result.metrics
    print(f"mode={m.mode} ops={m.ops} committed={m.committed} "
          f"failed={m.failed} duration={m.duration_s:.3f}s "
          f"throughput={m.throughput:.0f} ops/s")
    print(f"latency mean={m.mean_latency_ms:.3f}ms p95={m.p95_latency_ms:.3f}ms")
    print(f"aborts={m.aborts} op_retries={m.op_retries} "
          f"lock_retries={m.lock_retries} messages={m.messages}")
    print(f"copies={m.copies} (discretionary={m.discretionary_copies}) "
          f"splits={m.splits} snapshots created={m.snapshots_created} "
          f"borrowed={m.snapshots_borrowed}")
    if args.report:
        print(f"report written to {args.report}")
    if result.history is None:
        return 0
    try:
        verdict = check_strict_serializability(result.history,
                                               initial_map=result.initial_map)
    except HistoryTooLarge as exc:
        print(f"checker skipped: {exc}")
        return 0
    if verdict.ok:
        print(f"strict serializability: PASS "
              f"({verdict.windows} windows, max {verdict.max_window} ops)")
        return 0
    print("strict serializability: FAIL")
    print(verdict.witness)
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
