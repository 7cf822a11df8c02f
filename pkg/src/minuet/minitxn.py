"""Minitransaction primitives.

A minitransaction is a batch of compare, read, and write items over byte
ranges whose addresses are fixed before execution. All comparisons are
evaluated against current memory; the writes are applied atomically only if
every comparison matches (a batch with no comparisons always commits). Items
may span several memnodes, in which case a two-phase protocol is used by the
coordinator in ``coordinator.py``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum


@dataclass(frozen=True)
class AddressRange:
    """A byte range inside one memnode's address space."""

    memnode_id: int
    offset: int
    length: int

    def __post_init__(self):
        if self.memnode_id < 0:
            raise ValueError(f"negative memnode id {self.memnode_id}")
        if self.offset < 0 or self.length <= 0:
            raise ValueError(f"bad range offset={self.offset} length={self.length}")

    @property
    def end(self) -> int:
        return self.offset + self.length

    def overlaps(self, other: "AddressRange") -> bool:
        return (self.memnode_id == other.memnode_id
                and self.offset < other.end
                and other.offset < self.end)


@dataclass(frozen=True)
class CompareItem:
    range: AddressRange
    expected: bytes

    def __post_init__(self):
        if len(self.expected) != self.range.length:
            raise ValueError("expected bytes must match the range length")


@dataclass(frozen=True)
class WriteItem:
    range: AddressRange
    data: bytes

    def __post_init__(self):
        if len(self.data) != self.range.length:
            raise ValueError("write bytes must match the range length")


@dataclass
class MiniTransaction:
    compares: list = field(default_factory=list)
    reads: list = field(default_factory=list)
    writes: list = field(default_factory=list)
    blocking: bool = False

    def validate(self) -> None:
        for i, a in enumerate(self.writes):
            for b in self.writes[i + 1:]:
                if a.range.overlaps(b.range):
                    raise ValueError(f"overlapping write items {a.range} / {b.range}")

    def memnode_ids(self) -> set:
        ids = {c.range.memnode_id for c in self.compares}
        ids.update(r.memnode_id for r in self.reads)
        ids.update(w.range.memnode_id for w in self.writes)
        return ids

    def item_ranges(self) -> list:
        """Every range touched, in compare/read/write order."""
        out = [c.range for c in self.compares]
        out.extend(self.reads)
        out.extend(w.range for w in self.writes)
        return out

    def is_empty(self) -> bool:
        return not (self.compares or self.reads or self.writes)


class MtOutcome(Enum):
    COMMITTED = "committed"
    BAD_COMPARE = "bad-compare"
    LOCK_BUSY = "lock-busy"


@dataclass
class MtResult:
    outcome: MtOutcome
    failed_compares: list = field(default_factory=list)
    read_data: list = field(default_factory=list)

    def __post_init__(self):
        bad = self.outcome is MtOutcome.BAD_COMPARE
        if bad != bool(self.failed_compares):
            raise ValueError("failed_compares must be nonempty iff BAD_COMPARE")

    @property
    def committed(self) -> bool:
        return self.outcome is MtOutcome.COMMITTED


@dataclass
class SpreadPart:
    """One memnode's share of a spread minitransaction.

    Index lists map this part's compare/read positions back to positions in
    the original batch so results can be recombined.
    """

    mt: MiniTransaction
    compare_idx: list
    read_idx: list


def spread_plan(mt: MiniTransaction) -> dict:
    """Partition a minitransaction's items by memnode. Empty parts omitted."""
    parts = {}

    def part(mid) -> SpreadPart:
        if mid not in parts:
            parts[mid] = SpreadPart(MiniTransaction(blocking=mt.blocking), [], [])
        return parts[mid]

    for i, c in enumerate(mt.compares):
        p = part(c.range.memnode_id)
        p.mt.compares.append(c)
        p.compare_idx.append(i)
    for i, r in enumerate(mt.reads):
        p = part(r.memnode_id)
        p.mt.reads.append(r)
        p.read_idx.append(i)
    for w in mt.writes:
        part(w.range.memnode_id).mt.writes.append(w)
    return parts
