"""Dynamic transaction semantics over raw versioned objects."""
import pytest

from minuet.coordinator import MinitxnExecutor
from minuet.dyntxn import (DynamicTransaction, NodeCache, ObjectKind,
                           ObjectRef, pack_seq)
from minuet.errors import TxnAborted
from minuet.memnode import Memnode
from minuet.transport import LocalTransport

OBJ_LEN = 8 + 16  # seq header + 16-byte payload


def node_ref(mid, offset):
    return ObjectRef(ObjectKind.NODE, mid, offset, OBJ_LEN)


def rep_ref(offset, name="rep"):
    return ObjectRef(ObjectKind.REPLICATED, None, offset, OBJ_LEN, name=name)


def pad(b):
    return b.ljust(16, b"\x00")


class Fixture:
    def __init__(self, n=2):
        self.memnodes = [Memnode(i, 4096) for i in range(n)]
        self.transport = LocalTransport(self.memnodes)
        self.executor = MinitxnExecutor(self.transport)
        self.cache = NodeCache()
        # object A at memnode 0 offset 64, seq 5
        self.a = node_ref(0, 64)
        self.memnodes[0].poke(64, pack_seq(5) + pad(b"alpha"))
        # replicated object at offset 0 on both nodes, seq 3
        self.rep = rep_ref(0)
        for m in self.memnodes:
            m.poke(0, pack_seq(3) + pad(b"shared"))

    def txn(self, **kw):
        return DynamicTransaction(self.executor, len(self.memnodes),
                                  self.cache, **kw)

    def exchanges(self):
        return self.transport.stats.exchanges


class TestReadWrite:
    def test_first_read_records_observed_seq(self):
        fx = Fixture()
        t = fx.txn()
        data = t.read(fx.a)
        assert data == pad(b"alpha")
        assert t.observed_seq(fx.a) == 5
        assert fx.a in t.read_set_refs

    def test_read_after_write_is_local(self):
        fx = Fixture()
        t = fx.txn()
        t.read(fx.a)
        before = fx.exchanges()
        t.write(fx.a, pad(b"beta"))
        assert t.read(fx.a) == pad(b"beta")
        assert fx.exchanges() == before

    def test_two_writes_last_wins(self):
        fx = Fixture()
        t = fx.txn()
        t.read(fx.a)
        t.write(fx.a, pad(b"one"))
        t.write(fx.a, pad(b"two"))
        assert t.commit().committed
        assert fx.memnodes[0].peek(64 + 8, 16) == pad(b"two")
        assert fx.memnodes[0].peek(64, 8) == pack_seq(6)

    def test_write_requires_prior_read_or_allocation(self):
        fx = Fixture()
        t = fx.txn()
        with pytest.raises(ValueError):
            t.write(fx.a, pad(b"nope"))

    def test_write_new_blind_write_with_generation_seq(self):
        fx = Fixture()
        t = fx.txn()
        fresh = node_ref(1, 256)
        t.write_new(fresh, pad(b"fresh"), first_seq=(7 << 32) | 1)
        assert t.commit().committed
        assert fx.memnodes[1].peek(256, 8) == pack_seq((7 << 32) | 1)

    def test_operations_on_aborted_txn_fail(self):
        fx = Fixture()
        t = fx.txn()
        t.abort()
        with pytest.raises(TxnAborted):
            t.read(fx.a)
        with pytest.raises(TxnAborted):
            t.commit()


class TestDirtyRead:
    def test_cached_dirty_read_costs_no_round_trip(self):
        fx = Fixture()
        fx.cache.put(fx.a.cache_key(), 5, pad(b"alpha"))
        t = fx.txn()
        before = fx.exchanges()
        payload, seq = t.dirty_read(fx.a)
        assert (payload, seq) == (pad(b"alpha"), 5)
        assert fx.exchanges() == before
        assert t.read_set_refs == set()

    def test_uncached_dirty_read_fetches_but_read_set_unchanged(self):
        fx = Fixture()
        t = fx.txn()
        before = fx.exchanges()
        payload, _ = t.dirty_read(fx.a)
        assert payload == pad(b"alpha")
        assert fx.exchanges() == before + 1
        assert t.read_set_refs == set()

    def test_dirty_read_then_write_enters_read_set_first(self):
        fx = Fixture()
        t = fx.txn()
        _, seq = t.dirty_read(fx.a)
        t.write(fx.a, pad(b"beta"))
        assert fx.a in t.read_set_refs
        assert t.observed_seq(fx.a) == seq

    def test_stale_dirty_observation_fails_validation_at_commit(self):
        fx = Fixture()
        t = fx.txn()
        t.dirty_read(fx.a)
        # concurrent writer bumps the object
        fx.memnodes[0].poke(64, pack_seq(6) + pad(b"other"))
        t.write(fx.a, pad(b"mine"))
        res = t.commit()
        assert not res.committed
        assert res.failed_refs == [fx.a]
        assert fx.memnodes[0].peek(64 + 8, 16) == pad(b"other")


class TestValidationAndPiggyback:
    def test_empty_txn_commits_locally(self):
        fx = Fixture()
        t = fx.txn()
        before = fx.exchanges()
        assert t.commit().committed
        assert fx.exchanges() == before

    def test_concurrent_bump_aborts_commit_with_failed_ref(self):
        fx = Fixture()
        t = fx.txn()
        t.read(fx.a)
        fx.memnodes[0].poke(64, pack_seq(6) + pad(b"other"))
        t.write(fx.a, pad(b"mine"))
        res = t.commit()
        assert not res.committed and res.failed_refs == [fx.a]

    def test_read_only_txn_with_piggybacked_validation_commits_locally(self):
        fx = Fixture()
        t = fx.txn()
        t.assume(fx.rep, 3, pad(b"shared"), replica=0)
        t.read(fx.a)  # fetch at memnode 0 piggy-validates the replicated entry
        assert t.read_set[fx.rep].piggy_validated
        before = fx.exchanges()
        assert t.commit().committed
        assert fx.exchanges() == before

    def test_stale_assumed_entry_detected_at_fetch(self):
        fx = Fixture()
        t = fx.txn()
        t.assume(fx.rep, 2, pad(b"stale"), replica=0)  # wrong seq
        with pytest.raises(TxnAborted) as err:
            t.read(fx.a)
        assert err.value.failed_refs == [fx.rep]

    def test_unvalidated_assumption_forces_network_commit(self):
        fx = Fixture()
        t = fx.txn()
        t.read(fx.a)          # last sync covers only {a}
        t.assume(fx.rep, 3, pad(b"shared"), replica=0)
        before = fx.exchanges()
        assert t.commit().committed
        assert fx.exchanges() == before + 1  # had to validate over the wire


class TestReplicatedWrites:
    def test_write_updates_every_replica(self):
        fx = Fixture()
        t = fx.txn()
        t.read(fx.rep)
        t.write(fx.rep, pad(b"v2"))
        assert t.commit().committed
        for m in fx.memnodes:
            assert m.peek(0, 8) == pack_seq(4)
            assert m.peek(8, 16) == pad(b"v2")

    def test_two_concurrent_replicated_writers_one_commits(self):
        fx = Fixture()
        t1, t2 = fx.txn(), fx.txn()
        t1.read(fx.rep)
        t2.read(fx.rep)
        t1.write(fx.rep, pad(b"first"))
        t2.write(fx.rep, pad(b"second"))
        r1 = t1.commit()
        r2 = t2.commit()
        assert r1.committed and not r2.committed
        assert r2.failed_refs == [fx.rep]
        for m in fx.memnodes:
            assert m.peek(8, 16) == pad(b"first")

    def test_replica_disagreement_impossible_after_quiescence(self):
        fx = Fixture(n=3)
        for m in fx.memnodes:
            m.poke(0, pack_seq(3) + pad(b"shared"))
        for round_no in range(5):
            t = fx.txn()
            t.read(fx.rep)
            t.write(fx.rep, pad(b"r%d" % round_no))
            assert t.commit().committed
        images = {m.peek(0, OBJ_LEN) for m in fx.memnodes}
        assert len(images) == 1
