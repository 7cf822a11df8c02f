"""Per-proxy runtime: executor, caches, allocator, counters.

A proxy runs the B-tree logic on behalf of clients. It keeps a lazy cache of
internal B-tree nodes (never coherent across proxies by design), a cached
copy of the replicated tip objects, and a round-robin allocator cursor.
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field

from .clock import RealClock
from .coordinator import MinitxnExecutor
from .dyntxn import DynamicTransaction, NodeCache, unpack_seq, SEQ_LEN
from .minitxn import AddressRange, MiniTransaction
from .nodestore import (LOWEST_SID, TIP_ROOT_LOC, TIP_SNAPSHOT_ID,
                        AddressLayout, NodeAllocator, NodePtr,
                        ReplicatedObjects, unpack_ptr)

_U64 = struct.Struct("<Q")


@dataclass
class ProxyCounters:
    """Monotone within a run; guarded so concurrent workers stay exact."""

    ops: int = 0
    attempts: int = 0
    aborts: int = 0
    copies: int = 0
    discretionary_copies: int = 0
    splits: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def bump(self, name: str, by: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + by)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("ops", "attempts", "aborts", "copies",
                 "discretionary_copies", "splits")}


class SnapshotDirectory:
    """sid -> root location for read-only snapshots.

    The store leaves root tracking to the reader; within one cluster facade
    the directory is shared by its proxies and fed by snapshot-service
    responses.
    """

    def __init__(self):
        self._roots: dict = {}
        self._lock = threading.Lock()

    def record(self, sid: int, loc: NodePtr) -> None:
        with self._lock:
            self._roots[sid] = loc

    def lookup(self, sid: int):
        with self._lock:
            return self._roots.get(sid)

    def sids(self):
        with self._lock:
            return sorted(self._roots)


class Proxy:
    def __init__(self, config, layout: AddressLayout, transport, proxy_id: int,
                 directory: SnapshotDirectory, clock=None, seed=None):
        self.config = config
        self.layout = layout
        self.transport = transport
        self.proxy_id = proxy_id
        self.directory = directory
        self.clock = clock or RealClock()
        self.executor = MinitxnExecutor(
            transport, tag=f"p{proxy_id}",
            max_attempts=config.max_attempts,
            backoff_initial_ms=config.backoff_initial_ms,
            clock=self.clock, seed=seed)
        self.cache = NodeCache()
        self.allocator = NodeAllocator(layout, start_memnode=proxy_id)
        self.replicated = ReplicatedObjects(layout)
        self.counters = ProxyCounters()
        self.catalog_cache: dict = {}   # sid -> parent sid (immutable links)
        self.mainline_hint = 0          # branching: last known mainline tip
        self._tip_lock = threading.Lock()
        self._tip = None           # (sid_seq, sid, root_seq, root_ptr)
        self._lowest_seen = 0

    # -- transactions -------------------------------------------------------

    def new_txn(self, blocking: bool = False) -> DynamicTransaction:
        return DynamicTransaction(
            self.executor, self.layout.memnode_count, self.cache,
            default_replica=self.proxy_id % self.layout.memnode_count,
            blocking_commit=blocking)

    # -- replicated tip cache -------------------------------------------------

    def tip_from_cache(self, txn):
        """Admit the cached tip id and root location into txn's read set and
        return (sid, root_ptr). Fetches once when cold."""
        with self._tip_lock:
            if self._tip is None:
                self._refresh_tip_locked()
            sid_seq, sid, root_seq, root_ptr = self._tip
        self.replicated.assume(txn, TIP_SNAPSHOT_ID, sid_seq, _U64.pack(sid))
        self.replicated.assume(txn, TIP_ROOT_LOC, root_seq, root_ptr.pack())
        return sid, root_ptr

    def refresh_tip(self) -> None:
        with self._tip_lock:
            self._refresh_tip_locked()

    def _refresh_tip_locked(self) -> None:
        replica = self.proxy_id % self.layout.memnode_count
        id_ref = self.layout.replicated_ref(TIP_SNAPSHOT_ID)
        root_ref = self.layout.replicated_ref(TIP_ROOT_LOC)
        mt = MiniTransaction(reads=[
            AddressRange(replica, id_ref.offset, id_ref.length),
            AddressRange(replica, root_ref.offset, root_ref.length)])
        res = self.executor.execute(mt)
        raw_id, raw_root = res.read_data
        self._tip = (unpack_seq(raw_id), _U64.unpack_from(raw_id, SEQ_LEN)[0],
                     unpack_seq(raw_root), unpack_ptr(raw_root, SEQ_LEN))

    # -- garbage-collection watermark -------------------------------------------

    def note_lowest(self, sid: int) -> None:
        with self._tip_lock:
            self._lowest_seen = max(self._lowest_seen, sid)

    @property
    def lowest_seen(self) -> int:
        return self._lowest_seen

    def fetch_lowest(self) -> int:
        replica = self.proxy_id % self.layout.memnode_count
        ref = self.layout.replicated_ref(LOWEST_SID)
        mt = MiniTransaction(reads=[AddressRange(replica, ref.offset, ref.length)])
        res = self.executor.execute(mt)
        value = _U64.unpack_from(res.read_data[0], SEQ_LEN)[0]
        self.note_lowest(value)
        return value
