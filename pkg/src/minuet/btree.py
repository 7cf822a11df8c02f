"""Fence-keyed B-tree over distributed node slots.

Traversal walks internal nodes with dirty reads and reads the leaf
transactionally, so in the common case the read set holds only the leaf plus
the replicated tip objects. Fence keys and height checks make dirty descents
safe: a traversal either ends at the leaf responsible for the key or aborts;
it can never silently act on the wrong leaf. Snapshot validity checks
(``mvcc`` for the linear mode, ``branching`` for version trees) additionally
guarantee the leaf belongs to the right version.

A baseline mode (``validation=full``) reads every traversed node
transactionally instead, validating the whole path at commit. It exists only
as a comparison baseline for abort behavior.

Every public operation is one dynamic transaction, retried on abort with a
fresh transaction and invalidated caches up to the configured budget. No
locks are held between the underlying minitransactions.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import branching, mvcc
from .btreenode import (FORMAT_BRANCHING, FORMAT_LINEAR, BTreeNode,
                        NodeParseError, check_entry_limits, parse_node,
                        serialize_node)
from .config import MODE_BRANCHING
from .dyntxn import SEQ_LEN
from .errors import (EntryTooLarge, RetriesExhausted, SnapshotRetired,
                     TxnAborted, UnknownSnapshot)
from .nodestore import NodePtr


@dataclass
class PathStep:
    node: BTreeNode
    child_idx: int | None = None


class BTree:
    def __init__(self, proxy, config):
        self.proxy = proxy
        self.config = config
        self.mode_format = (FORMAT_BRANCHING if config.mode == MODE_BRANCHING
                            else FORMAT_LINEAR)
        self.full_validation = config.validation == "full"
        self.last_txn = None  # most recent committed txn, for counter audits

    # ------------------------------------------------------------------ api

    def get(self, key: bytes, sid: int | None = None):
        """Value for key, or None. ``sid=None`` reads the tip (up to date);
        an explicit sid reads that snapshot."""
        check_entry_limits(key, b"")
        if sid is None or self._is_writable_sid(sid):
            return self._run_op(lambda txn: self._get_tip(txn, key, sid))
        return self._run_op(lambda txn: self._get_readonly(txn, key, sid))

    def put(self, key: bytes, value: bytes, sid: int | None = None):
        """Insert or overwrite; returns the previous value or None."""
        check_entry_limits(key, value)
        return self._run_op(lambda txn: self._put(txn, key, value, sid))

    def remove(self, key: bytes, sid: int | None = None) -> bool:
        """Delete a key; returns whether it was present. Leaves are never
        merged: an emptied leaf persists with its fences."""
        check_entry_limits(key, b"")
        return self._run_op(lambda txn: self._remove(txn, key, sid))

    def scan(self, start: bytes, count: int, sid: int):
        """Up to ``count`` consecutive entries >= start from read-only
        snapshot ``sid``, walking leaves by fence-key continuation."""
        if count < 0:
            raise ValueError("count must be >= 0")
        return self._run_op(lambda txn: self._scan(txn, start, count, sid))

    def traverse_once(self, key: bytes, sid: int | None = None):
        """Single-attempt traversal, for inspection: returns the path of
        nodes root to leaf, or None if the transaction aborted."""
        txn = self.proxy.new_txn()
        try:
            if sid is None or self._is_writable_sid(sid):
                s, root = self._resolve_tip(txn, sid)
                path = self.traverse(txn, root, key, s, leaf_in_read_set=True)
            else:
                s, root = self._resolve_readonly(txn, sid)
                path = self.traverse(txn, root, key, s, leaf_in_read_set=False)
        except TxnAborted:
            return None
        txn.abort()
        return [step.node for step in path]

    # ------------------------------------------------------- op bodies

    def _get_tip(self, txn, key, sid):
        s, root = self._resolve_tip(txn, sid)
        path = self.traverse(txn, root, key, s, leaf_in_read_set=True)
        return path[-1].node.leaf_lookup(key)

    def _get_readonly(self, txn, key, sid):
        s, root = self._resolve_readonly(txn, sid)
        path = self.traverse(txn, root, key, s, leaf_in_read_set=False)
        return path[-1].node.leaf_lookup(key)

    def _put(self, txn, key, value, sid):
        s, root = self._resolve_tip(txn, sid)
        path = self.traverse(txn, root, key, s, leaf_in_read_set=True)
        leaf = self._writable_leaf(txn, path, s)
        prev = leaf.leaf_lookup(key)
        updated = leaf.copy()
        self._upsert(updated.entries, key, value)
        self._write_or_split(txn, s, path, updated)
        return prev

    def _remove(self, txn, key, sid):
        s, root = self._resolve_tip(txn, sid)
        path = self.traverse(txn, root, key, s, leaf_in_read_set=True)
        if path[-1].node.leaf_lookup(key) is None:
            return False
        leaf = self._writable_leaf(txn, path, s)
        updated = leaf.copy()
        updated.entries = [(k, v) for k, v in updated.entries if k != key]
        path[-1].node = updated
        self.write_node(txn, updated)
        return True

    def _scan(self, txn, start, count, sid):
        s, root = self._resolve_readonly(txn, sid)
        out = []
        cursor = start
        while len(out) < count:
            path = self.traverse(txn, root, cursor, s, leaf_in_read_set=False)
            leaf = path[-1].node
            for k, v in leaf.entries:
                if k >= cursor and len(out) < count:
                    out.append((k, v))
            if leaf.high_fence is None or len(out) >= count:
                break
            cursor = leaf.high_fence
        return out

    def _writable_leaf(self, txn, path, s):
        if self.mode_format == FORMAT_LINEAR:
            return mvcc.cow_for_write(self, txn, path, s)
        return branching.cow_for_write(self, txn, path, s)

    # ------------------------------------------------------------ traversal

    def traverse(self, txn, root_ptr, key, s, *, leaf_in_read_set: bool):
        """Root-to-leaf descent with fence, height, and version checks.
        Raises TxnAborted (with path caches invalidated) on any violation."""
        path: list = []
        node = self._checked_node(txn, root_ptr, s, path,
                                  transactional=self.full_validation,
                                  internal=True)
        if node.is_leaf:
            self.abort_traversal(txn, path + [PathStep(node)],
                                 "root must be internal")
        path.append(PathStep(node))
        while not node.is_leaf:
            step = path[-1]
            if not node.in_range(key):
                self.abort_traversal(txn, path, "key outside node fences")
            idx, child_ptr = node.child_for(key)
            step.child_idx = idx
            want_leaf = node.height == 1
            transactional = self.full_validation or (want_leaf and leaf_in_read_set)
            child = self._checked_node(txn, child_ptr, s, path,
                                       transactional=transactional,
                                       internal=not want_leaf)
            path.append(PathStep(child))
            if child.height != node.height - 1:
                self.abort_traversal(txn, path, "child height mismatch")
            node = child
        if not node.in_range(key):
            self.abort_traversal(txn, path, "leaf fences exclude key")
        return path

    def _checked_node(self, txn, ptr, s, path, *, transactional, internal=False):
        node = self._fetch_node(txn, ptr, transactional=transactional,
                                internal=internal)
        if node is None:
            self.abort_traversal(txn, path, "unparseable node")
        if self.mode_format == FORMAT_LINEAR:
            if not mvcc.check_node_validity(node, s):
                self.abort_traversal(txn, path + [PathStep(node)],
                                     "node not valid for snapshot")
            return node
        resolved = branching.resolve_valid_node(self, txn, node, s,
                                                transactional=transactional)
        if resolved is None:
            self.abort_traversal(txn, path + [PathStep(node)],
                                 "node not valid for branch")
        return resolved

    # ------------------------------------------------------- node plumbing

    def _fetch_node(self, txn, ptr: NodePtr, *, transactional: bool,
                    internal: bool = False):
        """Read one node. Internal nodes come from the proxy cache when
        possible; a transactional cache hit enters the read set with the
        cached sequence number and is validated at commit (the full-path
        baseline), while a dirty hit bypasses the read set entirely."""
        ref = self.proxy.layout.node_ref(ptr)
        key = ref.cache_key()
        try:
            hit = self.proxy.cache.get(key) if internal else None
            if hit is not None:
                seq, payload, parsed = hit
                if transactional:
                    txn.assume(ref, seq, payload)
                else:
                    txn.note_dirty(ref, seq, payload)
                if parsed is None:
                    parsed = parse_node(payload, seq=seq, ptr=ptr)
                    self.proxy.cache.put(key, seq, payload, parsed)
                return parsed
            if transactional:
                payload = txn.read(ref)
                node = parse_node(payload, seq=txn.observed_seq(ref), ptr=ptr)
            else:
                payload, seq = txn.dirty_read(ref)
                node = parse_node(payload, seq=seq, ptr=ptr)
            if internal and not node.is_leaf:
                self.proxy.cache.put(key, node.seq, payload, node)
            return node
        except NodeParseError:
            self.proxy.cache.invalidate(key)
            return None

    def read_node_transactional(self, txn, ptr: NodePtr):
        ref = self.proxy.layout.node_ref(ptr)
        payload = txn.read(ref)
        try:
            return parse_node(payload, seq=txn.observed_seq(ref), ptr=ptr)
        except NodeParseError as exc:
            txn.abort()
            raise TxnAborted(f"unparseable node at {ptr}") from exc

    def allocate_node(self, txn) -> NodePtr:
        return self.proxy.allocator.allocate(txn, self.config.node_size)

    def write_node(self, txn, node: BTreeNode) -> None:
        data = serialize_node(node, self.mode_format)
        self._check_size(data)
        txn.write(self.proxy.layout.node_ref(node.ptr), data)

    def write_new_node(self, txn, node: BTreeNode) -> None:
        data = serialize_node(node, self.mode_format)
        self._check_size(data)
        ref = self.proxy.layout.node_ref(node.ptr)
        txn.write_new(ref, data, self.proxy.allocator.first_seq(node.ptr))

    def _check_size(self, data: bytes) -> None:
        if len(data) + SEQ_LEN > self.config.node_size:
            raise EntryTooLarge(
                f"serialized node ({len(data)} bytes) exceeds the slot size")

    def abort_traversal(self, txn, path, reason: str):
        for step in path:
            node = step.node
            if node is not None and node.ptr is not None:
                self.proxy.cache.invalidate((node.ptr.memnode_id, node.ptr.offset))
        txn.abort()
        raise TxnAborted(f"traversal aborted: {reason}")

    # ------------------------------------------------------- split machinery

    def _write_or_split(self, txn, s, path, node):
        path[-1].node = node
        if self._node_fits(node):
            self.write_node(txn, node)
            return
        self._split(txn, s, path, len(path) - 1)

    def _split(self, txn, s, path, i):
        node = path[i].node
        entries = node.entries
        if len(entries) < 2:
            raise EntryTooLarge("a single entry does not fit one node")
        mid = len(entries) // 2
        sep = entries[mid][0]
        right = BTreeNode(node.height, s, low_fence=sep,
                          high_fence=node.high_fence, entries=entries[mid:])
        right.ptr = self.allocate_node(txn)
        left = node.copy()
        left.entries = entries[:mid]
        left.high_fence = sep
        path[i].node = left
        self.write_new_node(txn, right)
        self.write_node(txn, left)
        self.proxy.counters.bump("splits")
        if i == 0:
            new_root = BTreeNode(node.height + 1, s,
                                 low_fence=node.low_fence,
                                 high_fence=node.high_fence,
                                 entries=[(left.low_fence, left.ptr),
                                          (sep, right.ptr)])
            new_root.ptr = self.allocate_node(txn)
            self.write_new_node(txn, new_root)
            self._install_new_root(txn, new_root.ptr)
            path.insert(0, PathStep(new_root, child_idx=0))
            return
        parent = path[i - 1].node.copy()
        pos = self._separator_slot(parent.entries, sep)
        parent.entries.insert(pos, (sep, right.ptr))
        path[i - 1].node = parent
        if self._node_fits(parent):
            self.write_node(txn, parent)
        else:
            self._split(txn, s, path, i - 1)

    @staticmethod
    def _separator_slot(entries, sep):
        lo, hi = 0, len(entries)
        while lo < hi:
            midp = (lo + hi) // 2
            if entries[midp][0] < sep:
                lo = midp + 1
            else:
                hi = midp
        return lo

    def _install_new_root(self, txn, new_root_ptr: NodePtr):
        if self.mode_format == FORMAT_LINEAR:
            from .nodestore import TIP_ROOT_LOC
            self.proxy.replicated.write(txn, TIP_ROOT_LOC, new_root_ptr.pack())
            txn.blocking_commit = True
        else:
            branching.install_root_loc(self, txn, new_root_ptr)

    def _node_fits(self, node: BTreeNode) -> bool:
        cap = (self.config.max_leaf_entries if node.is_leaf
               else self.config.max_internal_entries)
        if cap and len(node.entries) > cap:
            return False
        data = serialize_node(node, self.mode_format)
        return len(data) + SEQ_LEN <= self.config.node_size

    @staticmethod
    def _upsert(entries, key, value):
        lo, hi = 0, len(entries)
        while lo < hi:
            mid = (lo + hi) // 2
            if entries[mid][0] < key:
                lo = mid + 1
            else:
                hi = mid
        if lo < len(entries) and entries[lo][0] == key:
            entries[lo] = (key, value)
        else:
            entries.insert(lo, (key, value))

    # ------------------------------------------------------ target resolution

    def _is_writable_sid(self, sid: int) -> bool:
        """In branching mode an explicit sid may name a writable tip, which
        takes the up-to-date path. Linear explicit sids are always read-only
        snapshots."""
        if sid is None or self.mode_format == FORMAT_LINEAR:
            return False
        return branching.is_writable(self, sid)

    def _resolve_tip(self, txn, sid):
        if self.mode_format == FORMAT_LINEAR:
            if sid is not None:
                raise ValueError("linear mode writes always target the tip")
            return self.proxy.tip_from_cache(txn)
        return branching.resolve_writable_tip(self, txn, sid)

    def _resolve_readonly(self, txn, sid: int):
        if sid < self.proxy.lowest_seen:
            raise SnapshotRetired(f"snapshot {sid} is below the GC watermark")
        if self.mode_format == FORMAT_LINEAR:
            loc = self.proxy.directory.lookup(sid)
            if loc is None:
                raise UnknownSnapshot(f"snapshot {sid} unknown to this proxy")
            return sid, loc
        entry = branching.catalog_lookup(self, txn, sid, fresh=True)
        if entry is None:
            raise UnknownSnapshot(f"snapshot {sid} not in the catalog")
        return sid, entry.root_loc

    # ------------------------------------------------------------- retry loop

    def _run_op(self, body):
        self.proxy.counters.bump("ops")
        backoff = self.config.backoff_initial_ms / 1000.0
        for attempt in range(self.config.max_attempts):
            if attempt:
                self.proxy.clock.sleep(
                    backoff * self.proxy.executor.rng.uniform(0.5, 1.5))
                backoff = min(backoff * 2, 0.05)
            self.proxy.counters.bump("attempts")
            txn = self.proxy.new_txn()
            try:
                result = body(txn)
                outcome = txn.commit()
                if outcome.committed:
                    self.last_txn = txn
                    return result
                self._note_abort()
            except TxnAborted:
                self._note_abort()
        raise RetriesExhausted("operation aborted on every attempt")

    def _note_abort(self):
        self.proxy.counters.bump("aborts")
        # A stale tip cache is the common cause; refreshing is one exchange
        # and only happens on the abort path.
        self.proxy.refresh_tip()
