"""Dynamic transactions: optimistic multi-object transactions over minitransactions.

A dynamic transaction keeps a read set (object to observed sequence number)
and a write set (object to new payload), and commits by issuing a single
minitransaction that compares every read-set sequence number and installs the
write-set payloads with incremented sequence numbers.

Every stored object is laid out as an 8-byte little-endian sequence number
followed by its payload. The sequence number increases on every committed
overwrite; comparisons target only that header, so validation cost does not
depend on object size. For freshly allocated slots the first sequence number
is derived from the slot generation, ``(generation << 32) | 1``, which keeps
sequence numbers unique across free/reallocate cycles of the same slot.

Reads may piggy-back validation of prior read-set entries onto the fetch
minitransaction when those entries are co-located with the fetch target
(always true for replicated objects). A transaction whose write set is empty
and whose entire read set was validated together by its last fetch commits
locally with no further network traffic; the last fetch is its serialization
point.

Dirty reads return an object's payload, from the proxy cache when possible,
without touching the read set. If a dirty-read object is written later, it
enters the read set first, carrying the sequence number that was observed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from threading import Lock

from .errors import FetchFailed, TxnAborted, Unreachable
from .minitxn import (AddressRange, CompareItem, MiniTransaction, MtOutcome,
                      WriteItem)

SEQ_LEN = 8
_SEQ = struct.Struct("<Q")


def pack_seq(seq: int) -> bytes:
    return _SEQ.pack(seq)


def unpack_seq(data: bytes) -> int:
    return _SEQ.unpack_from(data)[0]


class ObjectKind(Enum):
    NODE = "node"
    REPLICATED = "replicated"


@dataclass(frozen=True)
class ObjectRef:
    """A versioned object: one node slot, or a logical object with one
    replica at the same offset of every memnode."""

    kind: ObjectKind
    memnode_id: int | None  # home memnode for NODE; None for REPLICATED
    offset: int
    length: int             # full object length including the seq header
    name: str = ""          # diagnostic label for replicated objects

    def cache_key(self):
        return (self.memnode_id, self.offset)


@dataclass
class ReadEntry:
    seq: int
    payload: bytes
    replica: int | None = None   # memnode the value was fetched/validated at
    piggy_validated: bool = False


@dataclass
class CommitResult:
    committed: bool
    failed_refs: list = field(default_factory=list)


class NodeCache:
    """Bounded LRU over fetched objects; in practice holds internal B-tree
    nodes only, since leaves are always fetched fresh."""

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._entries: dict = {}
        self._lock = Lock()
        self.hits = 0
        self.misses = 0

    def get(self, key):
        with self._lock:
            entry = self._entries.pop(key, None)
            if entry is None:
                self.misses += 1
                return None
            self._entries[key] = entry  # re-append = most recently used
            self.hits += 1
            return entry

    def put(self, key, seq, payload, parsed=None):
        with self._lock:
            self._entries.pop(key, None)
            self._entries[key] = (seq, payload, parsed)
            while len(self._entries) > self.capacity:
                oldest = next(iter(self._entries))
                del self._entries[oldest]

    def invalidate(self, key):
        with self._lock:
            self._entries.pop(key, None)

    def refresh_if_present(self, key, seq, payload, parsed=None):
        with self._lock:
            if key in self._entries:
                self._entries[key] = (seq, payload, parsed)

    def clear(self):
        with self._lock:
            self._entries.clear()

    def __len__(self):
        return len(self._entries)


class DynamicTransaction:
    def __init__(self, executor, memnode_count: int, cache: NodeCache | None = None,
                 *, default_replica: int = 0, blocking_commit: bool = False):
        self.executor = executor
        self.memnode_count = memnode_count
        self.cache = cache
        self.default_replica = default_replica % max(memnode_count, 1)
        self.blocking_commit = blocking_commit
        self.read_set: dict = {}
        self.write_set: dict = {}
        self.aborted = False
        self.committed = False
        self._dirty_seen: dict = {}
        self._fresh_seq: dict = {}
        self._last_sync: set | None = None
        self.fetch_count = 0

    # -- transactional operations ------------------------------------------

    def read(self, ref: ObjectRef) -> bytes:
        self._check_open()
        if ref in self.write_set:
            return self.write_set[ref]
        if ref in self.read_set:
            return self.read_set[ref].payload
        memnode = ref.memnode_id if ref.kind is ObjectKind.NODE else self.default_replica
        seq, payload = self._fetch(ref, memnode, validate=True)
        return payload

    def dirty_read(self, ref: ObjectRef, bypass_cache: bool = False):
        """Fetch without validation. Returns (payload, seq); the read set is
        left untouched. Cached payloads may be stale unless bypassed."""
        self._check_open()
        if ref in self.write_set:
            entry = self.read_set.get(ref)
            return self.write_set[ref], entry.seq if entry else 0
        if ref in self.read_set:
            e = self.read_set[ref]
            return e.payload, e.seq
        if self.cache is not None and not bypass_cache:
            hit = self.cache.get(ref.cache_key())
            if hit is not None:
                seq, payload, _ = hit
                self._dirty_seen[ref] = (seq, payload)
                return payload, seq
        memnode = ref.memnode_id if ref.kind is ObjectKind.NODE else self.default_replica
        seq, payload = self._fetch_dirty(ref, memnode)
        self._dirty_seen[ref] = (seq, payload)
        if self.cache is not None and bypass_cache:
            self.cache.refresh_if_present(ref.cache_key(), seq, payload)
        return payload, seq

    def note_dirty(self, ref: ObjectRef, seq: int, payload: bytes) -> None:
        """Record an externally observed (seq, payload) for a dirty read that
        was served from a cache outside this transaction, so a later write of
        the same object still enters the read set with the observed seq."""
        if ref not in self.read_set:
            self._dirty_seen[ref] = (seq, payload)

    def write(self, ref: ObjectRef, payload: bytes) -> None:
        self._check_open()
        if ref not in self.read_set and ref not in self._fresh_seq:
            if ref in self._dirty_seen:
                seq, seen = self._dirty_seen[ref]
                self.read_set[ref] = ReadEntry(seq, seen, replica=None)
                self._invalidate_sync()
            else:
                raise ValueError(f"write to {ref} without a prior read or allocation")
        self.write_set[ref] = payload

    def write_new(self, ref: ObjectRef, payload: bytes, first_seq: int) -> None:
        """Blind write to a freshly allocated slot; no validation needed."""
        self._check_open()
        self._fresh_seq[ref] = first_seq
        self.write_set[ref] = payload

    def assume(self, ref: ObjectRef, seq: int, payload: bytes,
               replica: int | None = None) -> None:
        """Admit a cached (seq, payload) observation into the read set without
        a fetch. Used for proxy-cached replicated objects; commit or a later
        piggy-backed fetch will detect staleness."""
        self._check_open()
        if ref not in self.read_set:
            self.read_set[ref] = ReadEntry(seq, payload, replica=replica)
            self._invalidate_sync()

    def abort(self) -> None:
        self.aborted = True

    def commit(self) -> CommitResult:
        self._check_open()
        self.committed = True
        if not self.write_set:
            if not self.read_set:
                return CommitResult(True)
            if self._last_sync is not None and set(self.read_set) <= self._last_sync:
                # Read-only and fully validated by the last fetch.
                return CommitResult(True)
        mt, compared = self._build_commit_mt()
        try:
            res = self.executor.execute(mt)
        except Unreachable:
            self.aborted = True
            raise
        if res.outcome is MtOutcome.BAD_COMPARE:
            failed = [compared[i] for i in res.failed_compares]
            self._drop_from_cache(failed)
            self.aborted = True
            return CommitResult(False, failed_refs=failed)
        self._refresh_cache_after_commit()
        return CommitResult(True)

    # -- introspection -----------------------------------------------------

    @property
    def read_set_refs(self):
        return set(self.read_set)

    def observed_seq(self, ref) -> int:
        return self.read_set[ref].seq

    # -- internals -----------------------------------------------------------

    def _check_open(self):
        if self.aborted:
            raise TxnAborted("operation on aborted transaction")
        if self.committed:
            raise TxnAborted("operation on committed transaction")

    def _invalidate_sync(self):
        self._last_sync = None

    def _seq_range(self, ref: ObjectRef, memnode_id: int) -> AddressRange | None:
        if ref.kind is ObjectKind.REPLICATED:
            return AddressRange(memnode_id, ref.offset, SEQ_LEN)
        if ref.memnode_id == memnode_id:
            return AddressRange(memnode_id, ref.offset, SEQ_LEN)
        return None

    def _fetch(self, ref, memnode_id, validate: bool):
        compares, compared = [], []
        if validate:
            for other, entry in self.read_set.items():
                rng = self._seq_range(other, memnode_id)
                if rng is not None:
                    compares.append(CompareItem(rng, pack_seq(entry.seq)))
                    compared.append(other)
        mt = MiniTransaction(compares=compares,
                             reads=[AddressRange(memnode_id, ref.offset, ref.length)])
        res = self._run_fetch(mt)
        if res.outcome is MtOutcome.BAD_COMPARE:
            failed = [compared[i] for i in res.failed_compares]
            self._drop_from_cache(failed)
            self.aborted = True
            raise TxnAborted("read-set validation failed during fetch",
                             failed_refs=failed)
        raw = res.read_data[0]
        seq, payload = unpack_seq(raw), raw[SEQ_LEN:]
        self.read_set[ref] = ReadEntry(seq, payload, replica=memnode_id,
                                       piggy_validated=True)
        for other in compared:
            self.read_set[other].piggy_validated = True
        self._last_sync = set(compared) | {ref}
        return seq, payload

    def _fetch_dirty(self, ref, memnode_id):
        mt = MiniTransaction(reads=[AddressRange(memnode_id, ref.offset, ref.length)])
        res = self._run_fetch(mt)
        raw = res.read_data[0]
        return unpack_seq(raw), raw[SEQ_LEN:]

    def _run_fetch(self, mt):
        self.fetch_count += 1
        try:
            return self.executor.execute(mt)
        except Unreachable as exc:
            self.aborted = True
            raise FetchFailed(str(exc)) from exc

    def _build_commit_mt(self):
        mt = MiniTransaction(blocking=self.blocking_commit)
        write_homes = set()
        for ref in self.write_set:
            if ref.kind is ObjectKind.NODE:
                write_homes.add(ref.memnode_id)
        compared = []
        for ref, entry in self.read_set.items():
            if ref.kind is ObjectKind.REPLICATED:
                if entry.replica is not None and entry.replica in write_homes:
                    at = entry.replica
                elif write_homes:
                    at = min(write_homes)
                elif entry.replica is not None:
                    at = entry.replica
                else:
                    at = self.default_replica
            else:
                at = ref.memnode_id
            mt.compares.append(
                CompareItem(AddressRange(at, ref.offset, SEQ_LEN), pack_seq(entry.seq)))
            compared.append(ref)
        for ref, payload in self.write_set.items():
            new_seq = self._new_seq_for(ref)
            data = pack_seq(new_seq) + payload
            if ref.kind is ObjectKind.REPLICATED:
                for mid in range(self.memnode_count):
                    mt.writes.append(
                        WriteItem(AddressRange(mid, ref.offset, len(data)), data))
            else:
                mt.writes.append(
                    WriteItem(AddressRange(ref.memnode_id, ref.offset, len(data)), data))
        return mt, compared

    def _new_seq_for(self, ref) -> int:
        if ref in self.read_set:
            return self.read_set[ref].seq + 1
        return self._fresh_seq[ref]

    def _drop_from_cache(self, refs):
        if self.cache is None:
            return
        for ref in refs:
            self.cache.invalidate(ref.cache_key())

    def _refresh_cache_after_commit(self):
        if self.cache is None:
            return
        for ref, payload in self.write_set.items():
            self.cache.refresh_if_present(ref.cache_key(),
                                          self._new_seq_for(ref), payload)
