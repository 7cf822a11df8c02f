"""Coordinator behavior: spread, one-phase economy, two-phase atomicity."""
import threading

import pytest

from minuet.coordinator import MinitxnExecutor
from minuet.errors import RetriesExhausted
from minuet.memnode import Memnode
from minuet.minitxn import (AddressRange, CompareItem, MiniTransaction,
                            MtOutcome, WriteItem, spread_plan)
from minuet.transport import LocalTransport


def make_cluster(n=2, size=256, **kw):
    nodes = [Memnode(i, size, **kw) for i in range(n)]
    return nodes, LocalTransport(nodes)


def mt(compares=(), reads=(), writes=(), blocking=False):
    return MiniTransaction(compares=list(compares), reads=list(reads),
                           writes=list(writes), blocking=blocking)


def test_spread_plan_partitions_and_preserves_indices():
    m = mt(reads=[AddressRange(1, 0, 4), AddressRange(0, 8, 4)],
           writes=[WriteItem(AddressRange(0, 16, 2), b"ab")])
    plan = spread_plan(m)
    assert set(plan) == {0, 1}
    assert plan[1].read_idx == [0]
    assert plan[0].read_idx == [1]
    assert len(plan[0].mt.writes) == 1


def test_zero_item_minitransaction_commits_without_traffic():
    nodes, transport = make_cluster()
    ex = MinitxnExecutor(transport)
    res = ex.execute(mt())
    assert res.committed
    assert transport.stats.exchanges == 0


def test_single_memnode_uses_exactly_one_round_trip():
    nodes, transport = make_cluster()
    ex = MinitxnExecutor(transport)
    res = ex.execute(mt(reads=[AddressRange(0, 0, 4)]))
    assert res.committed
    assert transport.stats.exchanges == 1
    assert transport.stats.by_kind == {"exec1": 1}


def test_two_memnode_commit_applies_everywhere():
    nodes, transport = make_cluster()
    ex = MinitxnExecutor(transport)
    res = ex.execute(mt(writes=[WriteItem(AddressRange(0, 0, 1), b"x"),
                                WriteItem(AddressRange(1, 0, 1), b"y")]))
    assert res.committed
    assert nodes[0].peek(0, 1) == b"x"
    assert nodes[1].peek(0, 1) == b"y"
    assert transport.stats.by_kind == {"prepare": 2, "finalize": 2}


def test_bad_compare_on_one_node_releases_the_other_and_does_not_retry():
    nodes, transport = make_cluster()
    nodes[1].poke(0, b"\x09")
    ex = MinitxnExecutor(transport)
    res = ex.execute(mt(compares=[CompareItem(AddressRange(0, 0, 1), b"\x00"),
                                  CompareItem(AddressRange(1, 0, 1), b"\x00")],
                        writes=[WriteItem(AddressRange(0, 4, 1), b"z"),
                                WriteItem(AddressRange(1, 4, 1), b"z")]))
    assert res.outcome is MtOutcome.BAD_COMPARE
    assert res.failed_compares == [1]
    assert nodes[0].held_lock_count() == 0
    assert nodes[1].held_lock_count() == 0
    assert nodes[0].peek(4, 1) == b"\x00"
    # a single attempt: one prepare per node, one abort for the Ok voter
    assert transport.stats.by_kind["prepare"] == 2


def test_lock_busy_is_retried_until_success():
    nodes, transport = make_cluster()
    nodes[0].prepare("holder", mt(writes=[WriteItem(AddressRange(0, 0, 4), b"hold")]))

    def release():
        nodes[0].finalize("holder", commit=True)

    t = threading.Timer(0.02, release)
    t.start()
    ex = MinitxnExecutor(transport, max_attempts=64)
    res = ex.execute(mt(writes=[WriteItem(AddressRange(0, 0, 4), b"mine"),
                                WriteItem(AddressRange(1, 0, 4), b"mine")]))
    t.join()
    assert res.committed
    assert ex.retry_count > 0
    assert nodes[0].peek(0, 4) == b"mine"


def test_retries_exhausted_under_persistent_contention():
    nodes, transport = make_cluster()
    nodes[0].prepare("holder", mt(writes=[WriteItem(AddressRange(0, 0, 4), b"hold")]),)
    ex = MinitxnExecutor(transport, max_attempts=3, backoff_initial_ms=0.1)
    with pytest.raises(RetriesExhausted):
        ex.execute(mt(writes=[WriteItem(AddressRange(0, 2, 2), b"xx")]))
    nodes[0].finalize("holder", commit=False)


def test_all_or_nothing_across_memnodes_under_adversarial_interleaving():
    """Two contending cross-node writers: after both settle, each memnode pair
    reflects a whole batch, never a mix."""
    for _ in range(20):
        nodes, transport = make_cluster()
        ex1 = MinitxnExecutor(transport, tag="p1", max_attempts=64)
        ex2 = MinitxnExecutor(transport, tag="p2", max_attempts=64)
        m1 = mt(writes=[WriteItem(AddressRange(0, 0, 2), b"AA"),
                        WriteItem(AddressRange(1, 0, 2), b"AA")])
        m2 = mt(writes=[WriteItem(AddressRange(0, 0, 2), b"BB"),
                        WriteItem(AddressRange(1, 0, 2), b"BB")])
        results = {}

        def run(tag, ex, m):
            results[tag] = ex.execute(m)

        t1 = threading.Thread(target=run, args=("a", ex1, m1))
        t2 = threading.Thread(target=run, args=("b", ex2, m2))
        t1.start(); t2.start(); t1.join(); t2.join()
        assert results["a"].committed and results["b"].committed
        pair = (nodes[0].peek(0, 2), nodes[1].peek(0, 2))
        assert pair in ((b"AA", b"AA"), (b"BB", b"BB"))
        assert nodes[0].held_lock_count() == nodes[1].held_lock_count() == 0
