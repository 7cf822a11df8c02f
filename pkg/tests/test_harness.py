"""Workload generator, history checker, benchmark, and simulator basics."""
import itertools
import random

import pytest

from minuet.cluster import LocalCluster
from minuet.config import ClusterConfig
from minuet.errors import HistoryTooLarge, WorkloadError
from minuet.harness.bench import run_benchmark
from minuet.harness.checker import check_strict_serializability
from minuet.harness.history import Event, HistoryRecorder
from minuet.harness.workload import (WorkloadSpec, ZipfianSampler, generate,
                                     parse_workload, stream_bytes)

from conftest import small_config


class TestWorkloadGenerator:
    def test_same_seed_byte_identical_stream(self):
        spec = WorkloadSpec(record_count=50, operation_count=300, seed=42)
        assert stream_bytes(spec) == stream_bytes(spec)

    def test_different_seed_differs(self):
        a = WorkloadSpec(record_count=50, operation_count=300, seed=42)
        b = WorkloadSpec(record_count=50, operation_count=300, seed=43)
        assert stream_bytes(a) != stream_bytes(b)

    def test_read_only_proportions(self):
        spec = WorkloadSpec(record_count=10, operation_count=200,
                            proportions={"read": 1.0, "update": 0.0,
                                         "insert": 0.0, "scan": 0.0,
                                         "remove": 0.0})
        _load, run = generate(spec)
        assert {op.kind for op in run} == {"read"}

    def test_load_phase_emits_record_count_inserts(self):
        spec = WorkloadSpec(record_count=77, operation_count=0)
        load, run = generate(spec)
        assert len(load) == 77 and not run
        assert len({op.key for op in load}) == 77

    def test_proportions_must_sum_to_one(self):
        with pytest.raises(WorkloadError):
            WorkloadSpec(proportions={"read": 0.5, "update": 0.4,
                                      "insert": 0.0, "scan": 0.0,
                                      "remove": 0.0}).validate()

    def test_zipfian_rank1_mass_matches_analytic(self):
        n, theta = 1000, 0.99
        sampler = ZipfianSampler(n, theta)
        rng = random.Random(7)
        hits = sum(sampler.sample(rng) == 0 for _ in range(100_000))
        freq = hits / 100_000
        analytic = sampler.mass(1)
        assert abs(freq - analytic) <= 0.1 * analytic

    def test_workload_file_roundtrip(self):
        spec = parse_workload(
            "record_count=10\noperation_count=20\nread=0.7\nupdate=0.3\n"
            "distribution=zipfian\ntheta=0.8\nseed=3\n")
        assert spec.record_count == 10
        assert spec.proportions["read"] == 0.7
        assert spec.key_distribution == "zipfian"


def ev(op_id, kind, args, result, invoke, response, proxy=0):
    return Event(proxy, op_id, kind, tuple(args), invoke, response, result)


class TestCheckerFixtures:
    def test_sequential_history_passes(self):
        history = [
            ev(1, "put", (b"a", b"1"), None, 10, 20),
            ev(2, "get", (b"a",), b"1", 30, 40),
            ev(3, "remove", (b"a",), True, 50, 60),
            ev(4, "get", (b"a",), None, 70, 80),
        ]
        assert check_strict_serializability(history).ok

    def test_real_time_violation_fails(self):
        # the get finished before the put began, yet returned its value
        history = [
            ev(1, "get", (b"a",), b"1", 10, 20),
            ev(2, "put", (b"a", b"1"), None, 30, 40),
        ]
        assert not check_strict_serializability(history).ok

    def test_semantic_violation_fails(self):
        history = [
            ev(1, "put", (b"a", b"1"), None, 10, 20),
            ev(2, "get", (b"a",), b"2", 30, 40),
        ]
        result = check_strict_serializability(history)
        assert not result.ok and "op 2" in result.witness

    def test_concurrent_puts_allow_either_order(self):
        history = [
            ev(1, "put", (b"a", b"1"), None, 10, 40),
            ev(2, "put", (b"a", b"2"), b"1", 20, 50),
            ev(3, "get", (b"a",), b"2", 60, 70),
        ]
        assert check_strict_serializability(history).ok

    def test_stale_read_between_writes_fails(self):
        history = [
            ev(1, "put", (b"a", b"1"), None, 10, 20),
            ev(2, "put", (b"a", b"2"), b"1", 30, 40),
            ev(3, "get", (b"a",), b"1", 50, 60),
        ]
        assert not check_strict_serializability(history).ok

    def test_initial_map_seeds_state(self):
        history = [ev(1, "get", (b"a",), b"seeded", 10, 20)]
        assert check_strict_serializability(
            history, initial_map={b"a": b"seeded"}).ok
        assert not check_strict_serializability(history).ok

    def test_snapshot_scan_consistency(self):
        history = [
            ev(1, "put", (b"a", b"1"), None, 10, 20),
            ev(2, "snap", (), 5, 30, 40),
            ev(3, "put", (b"a", b"2"), b"1", 50, 60),
            ev(4, "scan", (5, b"", 10), [(b"a", b"1")], 70, 80),
        ]
        assert check_strict_serializability(history).ok
        bad = history[:3] + [ev(4, "scan", (5, b"", 10), [(b"a", b"2")], 70, 80)]
        assert not check_strict_serializability(bad).ok

    def test_borrowed_snapshot_must_capture_identical_state(self):
        # Legal: both snap ops can linearize around the same instant.
        history = [
            ev(1, "snap", (), 3, 10, 60),
            ev(2, "snap", (), 3, 15, 70),
            ev(3, "put", (b"a", b"1"), None, 20, 30),
            ev(4, "scan", (3, b"", 10), [], 80, 90),
        ]
        assert check_strict_serializability(history).ok
        # Illegal: a put separates the two snap ops in real time.
        bad = [
            ev(1, "snap", (), 3, 10, 20),
            ev(2, "put", (b"a", b"1"), None, 30, 40),
            ev(3, "snap", (), 3, 50, 60),
            ev(4, "scan", (3, b"", 10), [], 80, 90),
        ]
        assert not check_strict_serializability(bad).ok

    def test_pending_op_may_or_may_not_apply(self):
        history = [
            ev(1, "put", (b"a", b"1"), None, 10, None),  # no response seen
            ev(2, "get", (b"a",), None, 20, 30),
        ]
        assert check_strict_serializability(history).ok
        history2 = [
            ev(1, "put", (b"a", b"1"), None, 10, None),
            ev(2, "get", (b"a",), b"1", 20, 30),
        ]
        assert check_strict_serializability(history2).ok

    def test_width_bound_enforced(self):
        history = [ev(i, "get", (b"a",), None, 10, 1000 + i)
                   for i in range(1, 31)]
        with pytest.raises(HistoryTooLarge):
            check_strict_serializability(history)

    def test_single_threaded_run_always_passes(self, cluster):
        tree = cluster.tree(0)
        recorder = HistoryRecorder()
        rng = random.Random(2)
        reference = {}
        for i in range(150):
            k = f"k{rng.randrange(12)}".encode()
            t0 = recorder.now()
            if rng.random() < 0.5:
                v = rng.randbytes(4)
                out = tree.put(k, v)
                recorder.record(0, "put", (k, v), t0, recorder.now(), out)
            else:
                out = tree.get(k)
                recorder.record(0, "get", (k,), t0, recorder.now(), out)
        assert check_strict_serializability(recorder.history()).ok


class TestBenchmark:
    def test_zero_operation_run(self):
        cl = LocalCluster(small_config(), proxy_count=1)
        spec = WorkloadSpec(record_count=5, operation_count=0)
        res = run_benchmark(cl, spec, mode="real")
        assert res.metrics.ops == 0
        assert res.metrics.time_series == []

    def test_sim_mode_metrics_deterministic(self):
        spec = WorkloadSpec(record_count=40, operation_count=200, seed=6)
        outs = []
        for _ in range(2):
            cl = LocalCluster(small_config(), proxy_count=2, seed=6)
            outs.append(run_benchmark(cl, spec, mode="sim").metrics.to_ndjson())
        assert outs[0] == outs[1]

    def test_report_file_is_ndjson(self, tmp_path):
        import json
        cl = LocalCluster(small_config(), proxy_count=1)
        spec = WorkloadSpec(record_count=10, operation_count=30)
        path = tmp_path / "report.ndjson"
        run_benchmark(cl, spec, mode="sim", report_path=str(path))
        lines = path.read_text().strip().splitlines()
        records = [json.loads(line) for line in lines]
        assert records[0]["record"] == "metrics"
        assert records[0]["committed"] > 0

    def test_mid_run_snapshot_causes_throughput_dip_then_recovery(self):
        """Deterministic virtual-time counterpart of the snapshot-impact
        plot: update throughput dips in the snapshot's bucket because every
        touched leaf must be copied, then recovers."""
        cl = LocalCluster(small_config(max_leaf_entries=8,
                                       address_space=2 * 1024 * 1024),
                          proxy_count=1, seed=3)
        spec = WorkloadSpec(record_count=600, operation_count=20_000, seed=3,
                            threads_per_proxy=1,
                            proportions={"read": 0.0, "update": 1.0,
                                         "insert": 0.0, "scan": 0.0,
                                         "remove": 0.0})
        res = run_benchmark(cl, spec, mode="sim", snapshot_at=[1.0])
        series = dict(res.metrics.time_series)
        assert res.metrics.copies > 0
        # second 1 absorbs the copy-on-write wave; later seconds recover
        assert series[1] < series[0]
        assert series[2] > series[1]
