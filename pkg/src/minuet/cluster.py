"""In-process cluster: memnodes, proxies, and the snapshot service, wired
through the local transport. Used directly by tests and the deterministic
harness; the networked servers in ``gateway.py`` assemble the same pieces
around socket transports.
"""
from __future__ import annotations

import struct

from .btree import BTree
from .btreenode import (FORMAT_BRANCHING, FORMAT_LINEAR, BTreeNode,
                        parse_node, serialize_node)
from .branching import CatalogEntry, serialize_catalog_leaf
from .clock import RealClock
from .config import MODE_BRANCHING, ClusterConfig
from .dyntxn import SEQ_LEN, pack_seq
from .memnode import Memnode
from .nodestore import (LOWEST_SID, TIP_ROOT_LOC, TIP_SNAPSHOT_ID,
                        USED_BIT, AddressLayout, NodePtr)
from .proxy import Proxy, SnapshotDirectory
from .snapshot_service import SnapshotService
from .transport import LocalTransport, TransportStats

_U64 = struct.Struct("<Q")


class LocalCluster:
    def __init__(self, config: ClusterConfig, *, proxy_count: int | None = None,
                 clock=None, gate=None, seed: int = 0,
                 scs_clock=None, scs_lock_factory=None):
        config.validate()
        self.config = config
        self.clock = clock or RealClock()
        self.layout = AddressLayout(config)
        self.memnodes = [
            Memnode(i, config.address_space,
                    block_threshold_ms=config.block_threshold_ms,
                    txn_recovery_ms=config.txn_recovery_ms)
            for i in range(config.memnode_count)]
        self.directory = SnapshotDirectory()
        self._gate = gate
        self._seed = seed
        self.root_ptr0 = self._bootstrap()
        count = proxy_count if proxy_count is not None else max(1, len(config.proxies))
        self.proxies = [self.make_proxy(i) for i in range(count)]
        self.trees = [BTree(p, config) for p in self.proxies]
        scs_kwargs = {}
        if scs_lock_factory is not None:
            scs_kwargs["lock_factory"] = scs_lock_factory
        self.scs = SnapshotService(
            BTree(self.make_proxy(10_000), config), self.directory,
            clock=scs_clock or self.clock, k=config.snapshot_interval_k,
            initial_loc=self.root_ptr0, **scs_kwargs)

    # ------------------------------------------------------------- plumbing

    def make_proxy(self, proxy_id: int) -> Proxy:
        transport = LocalTransport(self.memnodes, TransportStats(), gate=self._gate)
        return Proxy(self.config, self.layout, transport, proxy_id,
                     self.directory, clock=self.clock,
                     seed=self._seed * 1000 + proxy_id)

    def tree(self, i: int = 0) -> BTree:
        return self.trees[i]

    def proxy(self, i: int = 0) -> Proxy:
        return self.proxies[i]

    # ------------------------------------------------------------ inspection

    def peek_node(self, ptr: NodePtr) -> BTreeNode:
        raw = self.memnodes[ptr.memnode_id].peek(ptr.offset, self.config.node_size)
        node = parse_node(raw[SEQ_LEN:], seq=_U64.unpack_from(raw)[0], ptr=ptr)
        return node

    def used_node_ptrs(self, mid: int):
        txn = self.proxies[0].new_txn()
        try:
            slots = self.proxies[0].allocator.used_slots(txn, mid)
        finally:
            txn.abort()
        return [NodePtr(mid, self.layout.slot_offset(slot), gen)
                for slot, gen in slots]

    def all_nodes(self):
        """Every allocated, parseable node in the cluster."""
        out = []
        for mid in range(self.config.memnode_count):
            for ptr in self.used_node_ptrs(mid):
                try:
                    out.append(self.peek_node(ptr))
                except Exception:
                    continue
        return out

    def total_exchanges(self) -> int:
        return sum(p.transport.stats.exchanges for p in self.proxies)

    # ------------------------------------------------------------- bootstrap

    def _bootstrap(self) -> NodePtr:
        """Write the initial images directly: named objects, slot tables, and
        a two-level empty tree (internal root over one empty leaf) at
        snapshot 0, so the traversal's two-level contract always holds."""
        cfg, layout = self.config, self.layout
        fmt = FORMAT_BRANCHING if cfg.mode == MODE_BRANCHING else FORMAT_LINEAR
        mcount = cfg.memnode_count
        root_mid, root_slot = 0, 0
        leaf_mid = 1 % mcount
        leaf_slot = 0 if leaf_mid != root_mid else 1
        root_ptr = NodePtr(root_mid, layout.slot_offset(root_slot), 0)
        leaf_ptr = NodePtr(leaf_mid, layout.slot_offset(leaf_slot), 0)
        leaf = BTreeNode(0, 0, b"", None, entries=[])
        root = BTreeNode(1, 0, b"", None, entries=[(b"", leaf_ptr)])
        used = {(root_mid, root_slot), (leaf_mid, leaf_slot)}

        for mid, node in enumerate(self.memnodes):
            self._poke_object(node, layout.replicated_ref(TIP_SNAPSHOT_ID).offset,
                              _U64.pack(0))
            self._poke_object(node, layout.replicated_ref(TIP_ROOT_LOC).offset,
                              root_ptr.pack())
            self._poke_object(node, layout.replicated_ref(LOWEST_SID).offset,
                              _U64.pack(0))
            if cfg.mode == MODE_BRANCHING:
                first = [CatalogEntry(0, root_ptr, None, None, cfg.beta, 0)]
                for i in range(layout.catalog_leaves):
                    entries = first if i == 0 else []
                    self._poke_object(node, layout.catalog_leaf_ref(i).offset,
                                      serialize_catalog_leaf(entries))
            for ci in range(layout.chunk_count):
                image = bytearray(layout.initial_chunk_bytes(ci))
                for (m, slot) in used:
                    if m != mid:
                        continue
                    owner, pos = layout.chunk_of(slot)
                    if owner == ci:
                        at = SEQ_LEN + 4 * pos
                        image[at:at + 4] = USED_BIT.to_bytes(4, "little")
                ref = layout.chunk_ref(mid, ci)
                node.poke(ref.offset, bytes(image))
        self._poke_object(self.memnodes[root_mid], root_ptr.offset,
                          serialize_node(root, fmt))
        self._poke_object(self.memnodes[leaf_mid], leaf_ptr.offset,
                          serialize_node(leaf, fmt))
        return root_ptr

    @staticmethod
    def _poke_object(memnode: Memnode, offset: int, payload: bytes,
                     seq: int = 1) -> None:
        memnode.poke(offset, pack_seq(seq) + payload)
