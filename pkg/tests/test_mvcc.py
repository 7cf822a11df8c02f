"""Snapshot machinery: validity rule, copy-on-write, creation, watermark, GC."""
import random
import struct

import pytest

from minuet import mvcc
from minuet.btreenode import BTreeNode
from minuet.cluster import LocalCluster
from minuet.errors import MonotonicityViolation, SnapshotRetired
from minuet.nodestore import TIP_ROOT_LOC, TIP_SNAPSHOT_ID, unpack_ptr
from treebuild import NodeSpec, install_tree

from conftest import small_config

_U64 = struct.Struct("<Q")


def node(created, copied=None):
    return BTreeNode(0, created, copied_to=copied)


class TestValidityRule:
    def test_created_before_copied_after_window_continues(self):
        # created 3, copied to 5: valid exactly for snapshots 3 and 4
        assert mvcc.check_node_validity(node(3, 5), 4)

    def test_snapshot_at_copy_target_must_visit_the_copy(self):
        assert not mvcc.check_node_validity(node(3, 5), 5)

    def test_uncopied_node_stays_current(self):
        assert mvcc.check_node_validity(node(3), 7)

    def test_node_from_the_future_rejected(self):
        assert not mvcc.check_node_validity(node(6), 5)

    def test_boundary_cases(self):
        assert mvcc.check_node_validity(node(3, 5), 3)
        assert not mvcc.check_node_validity(node(3, 5), 6)
        assert mvcc.check_node_validity(node(5), 5)


def build_fig4_like_cluster():
    """Three-level tree: root tagged with the tip (5), parent and leaf stale
    at 3. Updating the leaf must copy leaf and parent but never the root."""
    cluster = LocalCluster(small_config(), proxy_count=1)
    install_tree(cluster, {
        "root": NodeSpec(2, 5, entries=[(b"", "parent")]),
        "parent": NodeSpec(1, 3, entries=[(b"", "leaf")]),
        "leaf": NodeSpec(0, 3, entries=[(b"k1", b"old")]),
    }, "root", tip_sid=5)
    return cluster


class TestCopyOnWrite:
    def test_update_copies_leaf_and_parent_but_not_root(self):
        cl = build_fig4_like_cluster()
        tree = cl.tree(0)
        root_before = cl.memnodes[0].peek(
            cl.layout.replicated_ref(TIP_ROOT_LOC).offset + 8, 16)
        tree.put(b"k1", b"new")
        assert tree.proxy.counters.copies == 2
        root_after = cl.memnodes[0].peek(
            cl.layout.replicated_ref(TIP_ROOT_LOC).offset + 8, 16)
        assert root_after == root_before  # root updated in place
        nodes = cl.all_nodes()
        copies = [n for n in nodes if n.created_sid == 5 and n.height < 2]
        assert len(copies) == 2
        originals = [n for n in nodes if n.created_sid == 3]
        assert all(n.copied_to == 5 for n in originals)
        assert tree.get(b"k1") == b"new"

    def test_second_update_of_same_leaf_is_free(self):
        cl = build_fig4_like_cluster()
        tree = cl.tree(0)
        tree.put(b"k1", b"new")
        assert tree.proxy.counters.copies == 2
        tree.put(b"k1", b"newer")
        assert tree.proxy.counters.copies == 2  # no further copies at same tip
        tree.put(b"k2", b"sibling")
        assert tree.proxy.counters.copies == 2

    def test_node_already_at_tip_is_identity(self, cluster):
        tree = cluster.tree(0)
        tree.put(b"a", b"1")
        copies_before = tree.proxy.counters.copies
        tree.put(b"b", b"2")
        assert tree.proxy.counters.copies == copies_before


class TestCreateSnapshot:
    def test_returns_old_tip_and_advances_id(self, cluster):
        tree = cluster.tree(0)
        tree.put(b"k", b"v")
        sid, loc = cluster.scs.create_snapshot()
        assert sid == 0
        off = cluster.layout.replicated_ref(TIP_SNAPSHOT_ID).offset
        for m in cluster.memnodes:
            assert _U64.unpack(m.peek(off + 8, 8))[0] == 1
        root_off = cluster.layout.replicated_ref(TIP_ROOT_LOC).offset
        new_root = cluster.peek_node(unpack_ptr(cluster.memnodes[0].peek(root_off + 8, 16)))
        assert new_root.created_sid == 1
        old_root = cluster.peek_node(loc)
        assert old_root.copied_to == 1

    def test_two_concurrent_creations_one_commits(self, cluster):
        tree0, tree1 = cluster.tree(0), cluster.tree(1)
        t0 = tree0.proxy.new_txn()
        t1 = tree1.proxy.new_txn()
        mvcc.create_snapshot(tree0, t0)
        mvcc.create_snapshot(tree1, t1)
        r0 = t0.commit()
        r1 = t1.commit()
        assert r0.committed and not r1.committed

    def test_snapshot_of_empty_tree_then_put(self, cluster):
        sid, _ = cluster.scs.create_snapshot()
        tree = cluster.tree(0)
        tree.put(b"k", b"v")
        assert tree.get(b"k", sid=sid) is None
        assert tree.get(b"k") == b"v"

    def test_snapshot_immutability_across_later_writes(self, tiny_tree_cluster):
        cl = tiny_tree_cluster
        tree = cl.tree(0)
        rng = random.Random(5)
        reference = {}
        checkpoints = {}
        for round_no in range(6):
            for _ in range(40):
                k = f"{rng.randrange(60):04d}".encode()
                v = rng.randbytes(5)
                tree.put(k, v)
                reference[k] = v
            sid, _ = cl.scs.create_snapshot()
            checkpoints[sid] = dict(reference)
        for sid, expect in checkpoints.items():
            got = dict(tree.scan(b"", 10_000, sid))
            assert got == expect, f"snapshot {sid} drifted"


class TestWatermarkAndGC:
    def test_retired_snapshot_rejected(self, cluster):
        tree = cluster.tree(0)
        tree.put(b"k", b"v")
        sids = [cluster.scs.create_snapshot()[0] for _ in range(4)]
        mvcc.set_lowest_snapshot(tree, 3)
        with pytest.raises(SnapshotRetired):
            tree.get(b"k", sid=sids[1])

    def test_watermark_is_monotone(self, cluster):
        tree = cluster.tree(0)
        mvcc.set_lowest_snapshot(tree, 3)
        with pytest.raises(MonotonicityViolation):
            mvcc.set_lowest_snapshot(tree, 2)
        mvcc.set_lowest_snapshot(tree, 3)  # equal is a no-op

    def test_gc_frees_exactly_nodes_copied_at_or_below_watermark(self, cluster):
        tree = cluster.tree(0)
        tree.put(b"a", b"1")
        for _ in range(4):
            cluster.scs.create_snapshot()
            tree.put(b"a", tree.get(b"a") + b"x")  # force one copy per tip
        all_nodes = {(n.ptr.memnode_id, n.ptr.offset): n for n in cluster.all_nodes()}
        lowest = 3
        expect_freed = {key for key, n in all_nodes.items()
                        if n.copied_to is not None and n.copied_to <= lowest}
        expect_kept = set(all_nodes) - expect_freed
        mvcc.set_lowest_snapshot(tree, lowest)
        freed = mvcc.gc_sweep(tree)
        assert freed == len(expect_freed) > 0
        remaining = {(n.ptr.memnode_id, n.ptr.offset) for n in cluster.all_nodes()}
        assert remaining == expect_kept

    def test_gc_then_surviving_snapshots_scan_identically(self, tiny_tree_cluster):
        cl = tiny_tree_cluster
        tree = cl.tree(0)
        rng = random.Random(9)
        reference = {}
        checkpoints = {}
        for _ in range(5):
            for _ in range(30):
                k = f"{rng.randrange(40):04d}".encode()
                v = rng.randbytes(4)
                tree.put(k, v)
                reference[k] = v
            sid, _ = cl.scs.create_snapshot()
            checkpoints[sid] = dict(reference)
        mvcc.set_lowest_snapshot(tree, 2)
        mvcc.gc_sweep(tree)
        for sid, expect in checkpoints.items():
            if sid < 2:
                continue
            assert dict(tree.scan(b"", 10_000, sid)) == expect
        assert dict(tree.scan(b"", 10_000, cl.scs.create_snapshot()[0])) == reference
