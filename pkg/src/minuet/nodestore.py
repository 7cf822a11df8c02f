"""Node slot allocation and well-known replicated objects.

Each memnode's address space is carved into fixed-size slots:

    slot 0            named replicated objects (tip id, tip root, watermark)
    slots 1..C        catalog leaves (branching mode only)
    next K slots      slot-table chunks for this memnode's allocator
    remaining slots   B-tree node storage

The slot table is itself stored in the address space and manipulated through
the same dynamic transactions as everything else, so allocation rolls back
automatically when the enclosing transaction aborts. Each chunk is one
versioned object holding a u32 per data slot: bit 31 marks the slot used, the
low 31 bits count the slot's generation, bumped on every free so pointers to
a recycled slot can never be confused with pointers to its previous life.

Replicated objects live at identical offsets on every memnode. Reads access
any one replica; writes update all replicas in the same commit.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .config import MODE_BRANCHING, ClusterConfig
from .errors import ConfigError, DoubleFree, OutOfMemory
from .dyntxn import SEQ_LEN, ObjectKind, ObjectRef

PTR_LEN = 16
_PTR = struct.Struct("<IQI")

USED_BIT = 0x8000_0000
GEN_MASK = 0x7FFF_FFFF


@dataclass(frozen=True)
class NodePtr:
    memnode_id: int
    offset: int
    generation: int = 0

    def pack(self) -> bytes:
        return _PTR.pack(self.memnode_id, self.offset, self.generation)


NULL_PTR = NodePtr(0xFFFF_FFFF, 0, 0)


def unpack_ptr(data: bytes, at: int = 0) -> NodePtr:
    mid, off, gen = _PTR.unpack_from(data, at)
    return NodePtr(mid, off, gen)


# Named replicated objects and their payload sizes.
TIP_SNAPSHOT_ID = "tip_snapshot_id"
TIP_ROOT_LOC = "tip_root_loc"
LOWEST_SID = "lowest_sid"

_NAMED = {
    TIP_SNAPSHOT_ID: (0, 8),
    TIP_ROOT_LOC: (32, PTR_LEN),
    LOWEST_SID: (64, 8),
}


class AddressLayout:
    """Derived offsets for one cluster configuration. Identical at every
    memnode; memnodes differ only in the bytes stored there."""

    def __init__(self, cfg: ClusterConfig):
        self.node_size = cfg.node_size
        self.memnode_count = cfg.memnode_count
        self.total_slots = cfg.address_space // cfg.node_size
        self.catalog_leaves = cfg.catalog_leaves if cfg.mode == MODE_BRANCHING else 0
        self.slots_per_chunk = min(512, (cfg.node_size - SEQ_LEN) // 4)
        meta = 1 + self.catalog_leaves
        # Chunks plus the data slots they describe must fit what remains.
        remaining = self.total_slots - meta
        chunks = 0
        while chunks * self.slots_per_chunk < remaining - chunks:
            chunks += 1
        self.chunk_count = chunks
        self.first_data_slot = meta + chunks
        self.data_slots = self.total_slots - self.first_data_slot
        if self.data_slots < 2:
            raise ConfigError("address space too small for any B-tree nodes")

    # -- refs ---------------------------------------------------------------

    def replicated_ref(self, name: str) -> ObjectRef:
        offset, payload = _NAMED[name]
        return ObjectRef(ObjectKind.REPLICATED, None, offset,
                         SEQ_LEN + payload, name=name)

    def catalog_leaf_ref(self, index: int) -> ObjectRef:
        if not 0 <= index < self.catalog_leaves:
            raise ValueError(f"catalog leaf {index} out of range")
        return ObjectRef(ObjectKind.REPLICATED, None,
                         (1 + index) * self.node_size, self.node_size,
                         name=f"catalog_leaf_{index}")

    def chunk_ref(self, memnode_id: int, chunk_idx: int) -> ObjectRef:
        slot = 1 + self.catalog_leaves + chunk_idx
        return ObjectRef(ObjectKind.NODE, memnode_id, slot * self.node_size,
                         SEQ_LEN + 4 * self._chunk_width(chunk_idx))

    def node_ref(self, ptr: NodePtr) -> ObjectRef:
        return ObjectRef(ObjectKind.NODE, ptr.memnode_id, ptr.offset, self.node_size)

    # -- slot arithmetic ------------------------------------------------------

    def _chunk_width(self, chunk_idx: int) -> int:
        base = chunk_idx * self.slots_per_chunk
        return min(self.slots_per_chunk, self.data_slots - base)

    def slot_offset(self, data_slot: int) -> int:
        return (self.first_data_slot + data_slot) * self.node_size

    def data_slot_of(self, offset: int) -> int:
        slot = offset // self.node_size - self.first_data_slot
        if slot < 0 or offset % self.node_size:
            raise ValueError(f"offset {offset} is not a data slot")
        return slot

    def chunk_of(self, data_slot: int):
        return divmod(data_slot, self.slots_per_chunk)

    def initial_chunk_bytes(self, chunk_idx: int) -> bytes:
        """Bootstrap image: seq 1, every slot free at generation 0."""
        return pack_seq_prefix(1) + b"\x00" * (4 * self._chunk_width(chunk_idx))


def pack_seq_prefix(seq: int) -> bytes:
    return struct.pack("<Q", seq)


class NodeAllocator:
    """Transactional allocator for node slots, spreading consecutive
    allocations round-robin across memnodes."""

    def __init__(self, layout: AddressLayout, start_memnode: int = 0):
        self.layout = layout
        self._next = start_memnode

    def allocate(self, txn, size: int) -> NodePtr:
        if size != self.layout.node_size:
            raise ValueError(f"allocation size {size} != node size {self.layout.node_size}")
        first = self._next % self.layout.memnode_count
        self._next += 1
        for probe in range(self.layout.memnode_count):
            mid = (first + probe) % self.layout.memnode_count
            ptr = self._allocate_at(txn, mid)
            if ptr is not None:
                return ptr
        raise OutOfMemory("no free node slot at any memnode")

    def _allocate_at(self, txn, mid: int):
        for chunk_idx in range(self.layout.chunk_count):
            ref = self.layout.chunk_ref(mid, chunk_idx)
            table = bytearray(txn.read(ref))
            width = self.layout._chunk_width(chunk_idx)
            for i in range(width):
                word = int.from_bytes(table[4 * i:4 * i + 4], "little")
                if not word & USED_BIT:
                    gen = word & GEN_MASK
                    table[4 * i:4 * i + 4] = (word | USED_BIT).to_bytes(4, "little")
                    txn.write(ref, bytes(table))
                    slot = chunk_idx * self.layout.slots_per_chunk + i
                    return NodePtr(mid, self.layout.slot_offset(slot), gen)
        return None

    def free(self, txn, ptr: NodePtr) -> None:
        slot = self.layout.data_slot_of(ptr.offset)
        chunk_idx, i = self.layout.chunk_of(slot)
        ref = self.layout.chunk_ref(ptr.memnode_id, chunk_idx)
        table = bytearray(txn.read(ref))
        word = int.from_bytes(table[4 * i:4 * i + 4], "little")
        if not word & USED_BIT:
            raise DoubleFree(f"slot at {ptr.memnode_id}:{ptr.offset} is not allocated")
        new_word = (word & GEN_MASK) + 1 & GEN_MASK
        table[4 * i:4 * i + 4] = new_word.to_bytes(4, "little")
        txn.write(ref, bytes(table))

    def first_seq(self, ptr: NodePtr) -> int:
        """Initial object sequence number for a freshly allocated slot."""
        return (ptr.generation << 32) | 1

    # -- inspection -----------------------------------------------------------

    def used_slots(self, txn, mid: int):
        """(data_slot, generation) pairs currently allocated at one memnode."""
        out = []
        for chunk_idx in range(self.layout.chunk_count):
            table = txn.dirty_read(self.layout.chunk_ref(mid, chunk_idx),
                                   bypass_cache=True)[0]
            width = self.layout._chunk_width(chunk_idx)
            for i in range(width):
                word = int.from_bytes(table[4 * i:4 * i + 4], "little")
                if word & USED_BIT:
                    out.append((chunk_idx * self.layout.slots_per_chunk + i,
                                word & GEN_MASK))
        return out


class ReplicatedObjects:
    """Named-object API over the replicated region."""

    def __init__(self, layout: AddressLayout):
        self.layout = layout

    def read(self, txn, name: str) -> bytes:
        return txn.read(self.layout.replicated_ref(name))

    def write(self, txn, name: str, payload: bytes) -> None:
        ref = self.layout.replicated_ref(name)
        _, expect = _NAMED[name]
        if len(payload) != expect:
            raise ValueError(f"{name} payload must be {expect} bytes")
        txn.write(ref, payload)

    def assume(self, txn, name: str, seq: int, payload: bytes) -> None:
        txn.assume(self.layout.replicated_ref(name), seq, payload)
