"""B-tree node representation and its binary layout.

Serialized node payload (after the 8-byte object sequence header; all
integers little-endian; exact layout also documented in docs/node-format.md):

    format      u8    1 = linear copy record, 2 = branching copy record
    height      u16   0 = leaf
    created_sid u64   snapshot the node was created at (split or copy)
    copy record
      format 1: u64   snapshot the node was copied to; all-ones = never
      format 2: u8 n, then n entries of (sid u64, ptr 16B), the node's
                descendant set with the location of each copy
    low fence   u16 len + bytes      inclusive bound; empty = unbounded low
    high fence  u16 len + bytes      exclusive bound; len 0xFFFF = unbounded
    count       u16
    entries     leaf:     count * (u16 len + key, u16 len + value)
                internal: count * (u16 len + separator, ptr 16B)

Fence keys bound the key range a node is responsible for whether or not the
keys are present. An internal node's first separator always equals its low
fence; the child at position i covers [sep_i, sep_{i+1}).
"""
from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass, field

from .errors import EntryTooLarge, MinuetError
from .nodestore import PTR_LEN, NodePtr, unpack_ptr

FORMAT_LINEAR = 1
FORMAT_BRANCHING = 2

NO_COPY = 0xFFFF_FFFF_FFFF_FFFF
INF_LEN = 0xFFFF

MAX_KEY_LEN = 64
MAX_VALUE_LEN = 1024

_HDR = struct.Struct("<BHQ")
_U16 = struct.Struct("<H")
_U64 = struct.Struct("<Q")


class NodeParseError(MinuetError):
    """Slot bytes do not parse as a node (freed slot or torn bootstrap)."""


@dataclass
class BTreeNode:
    height: int
    created_sid: int
    low_fence: bytes = b""
    high_fence: bytes | None = None        # None = +infinity
    copied_to: int | None = None           # linear mode
    descendants: list = field(default_factory=list)  # branching: [(sid, NodePtr)]
    entries: list = field(default_factory=list)
    # Transient, filled by the reader:
    seq: int = 0
    ptr: NodePtr | None = None

    @property
    def is_leaf(self) -> bool:
        return self.height == 0

    def in_range(self, key: bytes) -> bool:
        if key < self.low_fence:
            return False
        return self.high_fence is None or key < self.high_fence

    def child_for(self, key: bytes):
        """(index, NodePtr) of the child responsible for key. The caller has
        already checked the fences."""
        keys = [k for k, _ in self.entries]
        idx = bisect.bisect_right(keys, key) - 1
        if idx < 0:
            raise NodeParseError("separator list does not cover its fence interval")
        return idx, self.entries[idx][1]

    def leaf_lookup(self, key: bytes):
        keys = [k for k, _ in self.entries]
        idx = bisect.bisect_left(keys, key)
        if idx < len(keys) and keys[idx] == key:
            return self.entries[idx][1]
        return None

    def copy(self) -> "BTreeNode":
        return BTreeNode(self.height, self.created_sid, self.low_fence,
                         self.high_fence, self.copied_to,
                         list(self.descendants), list(self.entries),
                         seq=self.seq, ptr=self.ptr)


def check_entry_limits(key: bytes, value: bytes) -> None:
    if not 1 <= len(key) <= MAX_KEY_LEN:
        raise EntryTooLarge(f"key length {len(key)} outside 1..{MAX_KEY_LEN}")
    if len(value) > MAX_VALUE_LEN:
        raise EntryTooLarge(f"value length {len(value)} exceeds {MAX_VALUE_LEN}")


def serialize_node(node: BTreeNode, mode_format: int) -> bytes:
    out = bytearray()
    out += _HDR.pack(mode_format, node.height, node.created_sid)
    if mode_format == FORMAT_LINEAR:
        out += _U64.pack(NO_COPY if node.copied_to is None else node.copied_to)
    else:
        out.append(len(node.descendants))
        for sid, ptr in node.descendants:
            out += _U64.pack(sid)
            out += ptr.pack()
    out += _U16.pack(len(node.low_fence))
    out += node.low_fence
    if node.high_fence is None:
        out += _U16.pack(INF_LEN)
    else:
        out += _U16.pack(len(node.high_fence))
        out += node.high_fence
    out += _U16.pack(len(node.entries))
    if node.is_leaf:
        for k, v in node.entries:
            out += _U16.pack(len(k)) + k + _U16.pack(len(v)) + v
    else:
        for k, ptr in node.entries:
            out += _U16.pack(len(k)) + k + ptr.pack()
    return bytes(out)


def parse_node(payload: bytes, *, seq: int = 0, ptr: NodePtr | None = None) -> BTreeNode:
    try:
        fmt, height, created = _HDR.unpack_from(payload, 0)
        at = _HDR.size
        copied_to = None
        descendants = []
        if fmt == FORMAT_LINEAR:
            raw = _U64.unpack_from(payload, at)[0]
            at += 8
            copied_to = None if raw == NO_COPY else raw
        elif fmt == FORMAT_BRANCHING:
            n = payload[at]
            at += 1
            for _ in range(n):
                sid = _U64.unpack_from(payload, at)[0]
                at += 8
                descendants.append((sid, unpack_ptr(payload, at)))
                at += PTR_LEN
        else:
            raise NodeParseError(f"unknown node format {fmt}")
        low_len = _U16.unpack_from(payload, at)[0]
        at += 2
        low = bytes(payload[at:at + low_len])
        if len(low) != low_len:
            raise NodeParseError("truncated low fence")
        at += low_len
        high_len = _U16.unpack_from(payload, at)[0]
        at += 2
        if high_len == INF_LEN:
            high = None
        else:
            high = bytes(payload[at:at + high_len])
            if len(high) != high_len:
                raise NodeParseError("truncated high fence")
            at += high_len
        count = _U16.unpack_from(payload, at)[0]
        at += 2
        entries = []
        if height == 0:
            for _ in range(count):
                klen = _U16.unpack_from(payload, at)[0]
                at += 2
                k = bytes(payload[at:at + klen])
                at += klen
                vlen = _U16.unpack_from(payload, at)[0]
                at += 2
                v = bytes(payload[at:at + vlen])
                at += vlen
                if len(k) != klen or len(v) != vlen:
                    raise NodeParseError("truncated leaf entry")
                entries.append((k, v))
        else:
            for _ in range(count):
                klen = _U16.unpack_from(payload, at)[0]
                at += 2
                k = bytes(payload[at:at + klen])
                at += klen
                entries.append((k, unpack_ptr(payload, at)))
                at += PTR_LEN
        return BTreeNode(height, created, low, high, copied_to, descendants,
                         entries, seq=seq, ptr=ptr)
    except (struct.error, IndexError) as exc:
        raise NodeParseError(str(exc)) from exc


def node_invariants_ok(node: BTreeNode) -> bool:
    """Structural checks: strict key order, fence containment, separator
    coverage. Height stratification is checked by the traversal itself."""
    keys = [k for k, _ in node.entries]
    if any(a >= b for a, b in zip(keys, keys[1:])):
        return False
    if node.high_fence is not None and node.low_fence >= node.high_fence:
        return False
    if node.is_leaf:
        for k in keys:
            if not node.in_range(k):
                return False
    else:
        if not node.entries:
            return False
        if keys[0] != node.low_fence:
            return False
        for k in keys[1:]:
            if not node.in_range(k):
                return False
    return True
