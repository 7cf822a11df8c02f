"""Version tree, catalog, validity rule, and bounded descendant sets."""
import random

import pytest

from minuet import branching
from minuet.branching import (CatalogEntry, catalog_lookup,
                              check_validity_branching, is_ancestor,
                              parse_catalog_leaf, serialize_catalog_leaf)
from minuet.btreenode import BTreeNode
from minuet.cluster import LocalCluster
from minuet.errors import BranchLimitExceeded, TxnAborted, UnknownSnapshot
from minuet.nodestore import NodePtr

from conftest import small_config


def branching_config(**kw):
    base = dict(mode="branching", beta=2, catalog_leaves=16,
                max_leaf_entries=4, max_internal_entries=4)
    base.update(kw)
    return small_config(**base)


def build_example_version_tree(cl):
    """Reproduce the example version tree: children 1:{2,3}, 2:{4,8}, 3:{5,7},
    4:{6}, 5:{10}, 6:{9}; writable leaves 7, 8, 9, 10 (8 consumes the skipped
    id). Our catalog root is 0 with single child 1."""
    scs = cl.scs
    t = cl.tree(0)
    assert scs.create_branch(0) == 1
    for i in range(6):
        t.put(f"key{i}".encode(), b"at-1", sid=1)   # leaf created at snapshot 1
    assert scs.create_branch(1) == 2
    assert scs.create_branch(1) == 3
    assert scs.create_branch(2) == 4
    assert scs.create_branch(3) == 5
    assert scs.create_branch(4) == 6
    assert scs.create_branch(3) == 7
    assert scs.create_branch(2) == 8
    assert scs.create_branch(6) == 9
    assert scs.create_branch(5) == 10
    return t


class TestCatalogCodec:
    def test_leaf_roundtrip(self):
        entries = [CatalogEntry(0, NodePtr(0, 4096, 0), 1, None, 2, 1),
                   CatalogEntry(1, NodePtr(2, 8192, 7), None, 0, 4, 0)]
        back = parse_catalog_leaf(serialize_catalog_leaf(entries))
        assert back == entries


class TestBranchCreation:
    def test_first_branch_marks_parent_read_only(self, branching_cluster):
        cl = branching_cluster
        new_sid = cl.scs.create_branch(0)
        assert new_sid == 1
        tree = cl.tree(0)
        txn = tree.proxy.new_txn()
        parent = catalog_lookup(tree, txn, 0, fresh=True)
        child = catalog_lookup(tree, txn, 1, fresh=True)
        txn.abort()
        assert parent.branch_id == 1 and not parent.writable
        assert child.parent == 0 and child.writable

    def test_second_branch_does_not_change_branch_id(self, branching_cluster):
        cl = branching_cluster
        cl.scs.create_branch(0)
        cl.scs.create_branch(0)
        tree = cl.tree(0)
        txn = tree.proxy.new_txn()
        parent = catalog_lookup(tree, txn, 0, fresh=True)
        txn.abort()
        assert parent.branch_id == 1
        assert parent.child_count == 2

    def test_branch_from_unknown_snapshot(self, branching_cluster):
        with pytest.raises(UnknownSnapshot):
            branching_cluster.scs.create_branch(77)

    def test_branching_bound_enforced(self, branching_cluster):
        cl = branching_cluster
        cl.scs.create_branch(0)
        cl.scs.create_branch(0)
        with pytest.raises(BranchLimitExceeded):
            cl.scs.create_branch(0)  # beta = 2

    def test_writable_leaves_of_example_tree(self):
        cl = LocalCluster(branching_config(), proxy_count=1)
        tree = build_example_version_tree(cl)
        txn = tree.proxy.new_txn()
        writable = [sid for sid in range(11)
                    if catalog_lookup(tree, txn, sid, fresh=True).writable]
        txn.abort()
        assert writable == [7, 8, 9, 10]

    def test_mainline_follows_first_branches(self):
        cl = LocalCluster(branching_config(), proxy_count=1)
        tree = build_example_version_tree(cl)
        assert branching.mainline(tree) == [0, 1, 2, 4, 6, 9]


class TestAncestry:
    def test_example_tree_ancestry(self):
        cl = LocalCluster(branching_config(), proxy_count=1)
        tree = build_example_version_tree(cl)
        txn = tree.proxy.new_txn()
        assert is_ancestor(tree, txn, 1, 9)          # on the mainline
        assert not is_ancestor(tree, txn, 5, 9)      # different branch
        assert is_ancestor(tree, txn, 5, 5)          # reflexive
        assert is_ancestor(tree, txn, 3, 10)
        assert not is_ancestor(tree, txn, 4, 3)
        txn.abort()


class TestValidityRule:
    @staticmethod
    def _oracle(cl, tree):
        txn = tree.proxy.new_txn()
        return lambda a, b: is_ancestor(tree, txn, a, b)

    def test_copy_on_other_branch_does_not_block(self):
        cl = LocalCluster(branching_config(), proxy_count=1)
        tree = build_example_version_tree(cl)
        anc = self._oracle(cl, tree)
        node = BTreeNode(0, 1, descendants=[(5, NodePtr(0, 0, 0))])
        assert check_validity_branching(node, 9, anc)

    def test_exact_copy_target_aborts(self):
        cl = LocalCluster(branching_config(), proxy_count=1)
        tree = build_example_version_tree(cl)
        anc = self._oracle(cl, tree)
        node = BTreeNode(0, 1, descendants=[(5, NodePtr(0, 0, 0))])
        assert not check_validity_branching(node, 5, anc)

    def test_node_from_unrelated_branch_aborts(self):
        cl = LocalCluster(branching_config(), proxy_count=1)
        tree = build_example_version_tree(cl)
        anc = self._oracle(cl, tree)
        node = BTreeNode(0, 4)
        assert not check_validity_branching(node, 3, anc)


class TestBranchIsolationAndCover:
    def test_discretionary_copy_keeps_cover_within_beta(self):
        cl = LocalCluster(branching_config(), proxy_count=1)
        tree = build_example_version_tree(cl)
        # The key's leaf was created at snapshot 1. Overwrite it at tips
        # 7, 9, then 10; with beta 2 the third copy forces a discretionary
        # copy at the deepest common ancestor of two entries other than 1.
        tree.put(b"key0", b"at-7", sid=7)
        tree.put(b"key0", b"at-9", sid=9)
        assert tree.proxy.counters.discretionary_copies == 0
        tree.put(b"key0", b"at-10", sid=10)
        assert tree.proxy.counters.discretionary_copies == 1
        sources = [n for n in cl.all_nodes()
                   if n.is_leaf and n.created_sid == 1 and n.descendants]
        assert len(sources) == 1
        stored = sorted(sid for sid, _ in sources[0].descendants)
        assert stored == [3, 9]
        disc = [n for n in cl.all_nodes()
                if n.is_leaf and n.created_sid == 3]
        assert len(disc) == 1
        assert sorted(s for s, _ in disc[0].descendants) == [7, 10]

    def test_reads_survive_discretionary_copies_at_every_vertex(self):
        cl = LocalCluster(branching_config(), proxy_count=1)
        tree = build_example_version_tree(cl)
        tree.put(b"key0", b"at-7", sid=7)
        tree.put(b"key0", b"at-9", sid=9)
        tree.put(b"key0", b"at-10", sid=10)
        expect = {1: b"at-1", 2: b"at-1", 3: b"at-1", 4: b"at-1", 5: b"at-1",
                  6: b"at-1", 8: b"at-1", 7: b"at-7", 9: b"at-9", 10: b"at-10"}
        for sid, value in expect.items():
            assert tree.get(b"key0", sid=sid) == value, f"vertex {sid}"

    def test_writes_do_not_leak_into_unrelated_branches(self):
        cl = LocalCluster(branching_config(), proxy_count=1)
        tree = build_example_version_tree(cl)
        before = {sid: dict(tree.scan(b"", 100, sid)) for sid in (1, 2, 3, 4, 5, 6)}
        tree.put(b"key1", b"rewritten", sid=9)
        tree.put(b"new-key", b"fresh", sid=9)
        after = {sid: dict(tree.scan(b"", 100, sid)) for sid in (1, 2, 3, 4, 5, 6)}
        assert before == after

    def test_randomized_workload_cover_invariant(self):
        cl = LocalCluster(branching_config(catalog_leaves=32), proxy_count=1)
        tree = cl.tree(0)
        scs = cl.scs
        rng = random.Random(17)
        for i in range(8):
            tree.put(f"{i:03d}".encode(), b"base")
        copies = {}  # source ptr -> set of sids it was copied to (observed)
        tips = [0]
        all_sids = [0]
        for _ in range(25):
            frm = rng.choice(all_sids)
            try:
                sid = scs.create_branch(frm)
            except BranchLimitExceeded:
                continue
            if frm in tips:
                tips.remove(frm)
            tips.append(sid)
            all_sids.append(sid)
        for _ in range(150):
            tip = rng.choice(tips)
            key = f"{rng.randrange(8):03d}".encode()
            tree.put(key, rng.randbytes(4), sid=tip)
        txn = tree.proxy.new_txn()
        beta = cl.config.beta
        for node in cl.all_nodes():
            assert len(node.descendants) <= beta
            for sid, ptr in node.descendants:
                assert is_ancestor(tree, txn, node.created_sid, sid)
        txn.abort()
        counters = tree.proxy.counters
        assert counters.discretionary_copies <= counters.copies


class TestCatalogRaces:
    def test_write_racing_branch_creation_loses_on_catalog_validation(self):
        cl = LocalCluster(branching_config(), proxy_count=2)
        tree0, tree1 = cl.tree(0), cl.tree(1)
        tree0.put(b"k", b"v")
        # Stage a write at tip 0 but do not commit yet.
        txn = tree0.proxy.new_txn()
        tree0._put(txn, b"k", b"racer", None)
        # Branch creation commits first, flipping 0's branch id.
        cl.scs.create_branch(0)
        res = txn.commit()
        assert not res.committed
        assert any(r.name.startswith("catalog_leaf") for r in res.failed_refs)
        # The committed state is untouched by the loser.
        assert tree1.get(b"k", sid=0) == b"v"
