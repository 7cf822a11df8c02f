"""Install hand-built tree images into a fresh cluster.

Scenario scripts (and unit tests) need precise control over node placement,
heights, fences, and snapshot tags. This writes slots directly, keeping the
slot tables consistent; the cluster must not have served traffic yet.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..btreenode import FORMAT_BRANCHING, FORMAT_LINEAR, BTreeNode, serialize_node
from ..config import MODE_BRANCHING
from ..dyntxn import SEQ_LEN, pack_seq
from ..nodestore import TIP_ROOT_LOC, TIP_SNAPSHOT_ID, USED_BIT, NodePtr

_U64 = struct.Struct("<Q")


@dataclass
class NodeSpec:
    """Declarative node: internal entries name other specs as children."""

    height: int
    created_sid: int
    low: bytes = b""
    high: bytes | None = None
    copied_to: int | None = None
    entries: list = field(default_factory=list)
    memnode: int | None = None  # placement override


def install_tree(cluster, specs: dict, root_name: str, tip_sid: int) -> dict:
    """Install the named nodes, point the tip at ``root_name``, and return
    {name: NodePtr}. Placement round-robins unless a spec pins a memnode."""
    layout = cluster.layout
    mcount = cluster.config.memnode_count
    fmt = (FORMAT_BRANCHING if cluster.config.mode == MODE_BRANCHING
           else FORMAT_LINEAR)
    ptrs = {}
    next_slot = [0] * mcount
    for i, name in enumerate(specs):
        mid = specs[name].memnode
        if mid is None:
            mid = i % mcount
        slot = next_slot[mid]
        next_slot[mid] += 1
        ptrs[name] = NodePtr(mid, layout.slot_offset(slot), 0)

    for mid, memnode in enumerate(cluster.memnodes):
        for ci in range(layout.chunk_count):
            image = bytearray(layout.initial_chunk_bytes(ci))
            for name, ptr in ptrs.items():
                if ptr.memnode_id != mid:
                    continue
                owner, pos = layout.chunk_of(layout.data_slot_of(ptr.offset))
                if owner == ci:
                    at = SEQ_LEN + 4 * pos
                    image[at:at + 4] = USED_BIT.to_bytes(4, "little")
            memnode.poke(layout.chunk_ref(mid, ci).offset, bytes(image))

    for name, spec in specs.items():
        if spec.height == 0:
            entries = list(spec.entries)
        else:
            entries = [(key, ptrs[child]) for key, child in spec.entries]
        node = BTreeNode(spec.height, spec.created_sid, spec.low, spec.high,
                         spec.copied_to, [], entries)
        data = pack_seq(1) + serialize_node(node, fmt)
        cluster.memnodes[ptrs[name].memnode_id].poke(ptrs[name].offset, data)

    root_ptr = ptrs[root_name]
    for memnode in cluster.memnodes:
        id_off = layout.replicated_ref(TIP_SNAPSHOT_ID).offset
        root_off = layout.replicated_ref(TIP_ROOT_LOC).offset
        memnode.poke(id_off, pack_seq(2) + _U64.pack(tip_sid))
        memnode.poke(root_off, pack_seq(2) + root_ptr.pack())
    return ptrs
