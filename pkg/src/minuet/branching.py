"""Writable clones: the version tree, snapshot catalog, and bounded copy sets.

Snapshots form a rooted tree instead of a line. Internal vertices are
read-only; leaves are writable tips. Snapshot ids stay totally ordered by a
single serialized counter, so ids remain fixed-width no matter how the tree
grows. The catalog maps each id to its root location, its first branch (the
"branch id", whose presence makes a snapshot read-only), its parent, and its
branching bound. Catalog leaves are replicated at every memnode and cached at
proxies; up-to-date writes validate the tip's catalog leaf so a racing branch
creation aborts them.

Copy records generalize from a single "copied to" id to a descendant set: at
most beta entries of (snapshot id, location of the copy), kept as an
antichain that covers every actual copy of the node. When a new copy would
overflow the bound, a discretionary copy is installed at the deepest common
ancestor of two existing entries (never the node's own creation snapshot) and
absorbs the entries below it, so at most one discretionary copy is made per
ordinary copy.

Storing the copy's location lets a traversal that lands on a superseded node
walk to the copy (or a copy of the copy) covering its snapshot, rather than
retrying a descent that would deterministically come back. The standalone
``check_validity_branching`` predicate gives the plain continue/abort answer
for a node given an ancestry oracle.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

from .btreenode import BTreeNode
from .errors import (BranchLimitExceeded, CatalogFull, MinuetError,
                     TxnAborted, UnknownSnapshot)
from .dyntxn import SEQ_LEN
from .nodestore import PTR_LEN, TIP_SNAPSHOT_ID, NodePtr, unpack_ptr

_U64 = struct.Struct("<Q")
_U16 = struct.Struct("<H")

NO_SID = 0xFFFF_FFFF_FFFF_FFFF
ENTRY_LEN = 8 + PTR_LEN + 8 + 8 + 2 + 2


@dataclass
class CatalogEntry:
    sid: int
    root_loc: NodePtr
    branch_id: int | None   # first branch created from this snapshot
    parent: int | None      # creation parent; the root entry has none
    beta: int
    child_count: int

    @property
    def writable(self) -> bool:
        return self.branch_id is None


def entries_per_leaf(layout) -> int:
    return (layout.node_size - SEQ_LEN - 2) // ENTRY_LEN


def serialize_catalog_leaf(entries) -> bytes:
    out = bytearray(_U16.pack(len(entries)))
    for e in entries:
        out += _U64.pack(e.sid)
        out += e.root_loc.pack()
        out += _U64.pack(NO_SID if e.branch_id is None else e.branch_id)
        out += _U64.pack(NO_SID if e.parent is None else e.parent)
        out += _U16.pack(e.beta)
        out += _U16.pack(e.child_count)
    return bytes(out)


def parse_catalog_leaf(payload: bytes):
    count = _U16.unpack_from(payload, 0)[0]
    out = []
    at = 2
    for _ in range(count):
        sid = _U64.unpack_from(payload, at)[0]
        at += 8
        loc = unpack_ptr(payload, at)
        at += PTR_LEN
        branch = _U64.unpack_from(payload, at)[0]
        at += 8
        parent = _U64.unpack_from(payload, at)[0]
        at += 8
        beta = _U16.unpack_from(payload, at)[0]
        at += 2
        children = _U16.unpack_from(payload, at)[0]
        at += 2
        out.append(CatalogEntry(sid, loc,
                                None if branch == NO_SID else branch,
                                None if parent == NO_SID else parent,
                                beta, children))
    return out


# --------------------------------------------------------------- catalog io

def _leaf_slot(tree, sid: int):
    per = entries_per_leaf(tree.proxy.layout)
    return divmod(sid, per)


def _read_leaf(tree, txn, leaf_idx: int, *, transactional=False, fresh=False):
    ref = tree.proxy.layout.catalog_leaf_ref(leaf_idx)
    if transactional:
        payload = txn.read(ref)
    else:
        payload, _ = txn.dirty_read(ref, bypass_cache=fresh)
    return parse_catalog_leaf(payload), ref


def _write_leaf(tree, txn, leaf_idx: int, entries) -> None:
    ref = tree.proxy.layout.catalog_leaf_ref(leaf_idx)
    txn.write(ref, serialize_catalog_leaf(entries))


def catalog_lookup(tree, txn, sid: int, *, transactional=False, fresh=False):
    """Entry for sid, or None. Dirty lookups may serve a cached leaf;
    ``fresh`` forces a fetch (used when the root location must be current)."""
    leaf_idx, pos = _leaf_slot(tree, sid)
    if leaf_idx >= tree.proxy.layout.catalog_leaves:
        return None
    entries, _ = _read_leaf(tree, txn, leaf_idx,
                            transactional=transactional, fresh=fresh)
    if pos < len(entries) and entries[pos].sid == sid:
        return entries[pos]
    return None


def is_writable(tree, sid: int) -> bool:
    txn = tree.proxy.new_txn()
    try:
        entry = catalog_lookup(tree, txn, sid, fresh=True)
    finally:
        txn.abort()
    if entry is None:
        raise UnknownSnapshot(f"snapshot {sid} not in the catalog")
    return entry.writable


# ------------------------------------------------------------- version tree

def _parent_of(tree, txn, sid: int):
    """Creation parent via the proxy's ancestry cache; parents are immutable
    once written, so cached values never go stale."""
    cached = tree.proxy.catalog_cache.get(sid)
    if cached is not None:
        return cached
    entry = catalog_lookup(tree, txn, sid)
    if entry is None:
        entry = catalog_lookup(tree, txn, sid, fresh=True)
        if entry is None:
            return NO_SID  # unknown here and now
    tree.proxy.catalog_cache[sid] = entry.parent
    return entry.parent


def ancestry_path(tree, txn, sid: int):
    """Vertices from the version-tree root down to sid, or None if any link
    is unknown."""
    path = []
    cur = sid
    for _ in range(1 << 20):
        path.append(cur)
        parent = _parent_of(tree, txn, cur)
        if parent is NO_SID:
            return None
        if parent is None:
            path.reverse()
            return path
        cur = parent
    raise MinuetError("catalog parent chain does not terminate")


def is_ancestor(tree, txn, a: int, b: int) -> bool:
    """True iff a lies on the root path of b. Reflexive: every vertex is its
    own ancestor."""
    path = ancestry_path(tree, txn, b)
    return path is not None and a in path


def check_validity_branching(node: BTreeNode, t: int, ancestor) -> bool:
    """Plain continue/abort rule for a traversal at snapshot t hitting this
    node: continue iff the node was created at an ancestor of t and no copy
    in its descendant set covers t. ``ancestor(a, b)`` is the (reflexive)
    version-tree oracle."""
    if not ancestor(node.created_sid, t):
        return False
    for sid, _ptr in node.descendants:
        if ancestor(sid, t):
            return False
    return True


def resolve_valid_node(tree, txn, node, t: int, *, transactional: bool):
    """Traversal-side validity: like check_validity_branching, but when a
    descendant-set entry covers t, follow the recorded copy location instead
    of giving up, since a fresh retry would reach this same node again for
    read-only snapshots. Returns the node to continue with, or None."""
    for _ in range(64):
        path = ancestry_path(tree, txn, t)
        if path is None or node.created_sid not in path:
            return None
        covering = [(sid, ptr) for sid, ptr in node.descendants if sid in path]
        if not covering:
            return node
        _, ptr = covering[0]
        node = tree._fetch_node(txn, ptr, transactional=transactional)
        if node is None:
            return None
    return None


# ----------------------------------------------------------- tip resolution

def resolve_writable_tip(tree, txn, want: int | None):
    """Walk branch ids from ``want`` (or the mainline default) to the current
    writable tip; the tip's catalog leaf is read transactionally so a racing
    branch creation invalidates the commit. Returns (sid, root_loc)."""
    sid = want if want is not None else tree.proxy.mainline_hint
    hops = 0
    while True:
        entry = catalog_lookup(tree, txn, sid)
        if entry is None:
            entry = catalog_lookup(tree, txn, sid, fresh=True)
        if entry is None:
            if sid == want:
                raise UnknownSnapshot(f"snapshot {sid} not in the catalog")
            sid = 0  # stale mainline hint; restart from the root
            tree.proxy.mainline_hint = 0
            continue
        if entry.branch_id is not None:
            sid = entry.branch_id
            hops += 1
            if hops > 1 << 20:
                raise MinuetError("branch chain does not terminate")
            continue
        confirmed = catalog_lookup(tree, txn, sid, transactional=True)
        if confirmed is None:
            raise UnknownSnapshot(f"snapshot {sid} vanished from the catalog")
        if confirmed.branch_id is not None:
            sid = confirmed.branch_id
            continue
        txn.branch_tip_sid = sid
        if want is None:
            tree.proxy.mainline_hint = sid
        return sid, confirmed.root_loc


def install_root_loc(tree, txn, new_root_ptr: NodePtr) -> None:
    """Point the current tip's catalog entry at a new root (root split)."""
    sid = txn.branch_tip_sid
    leaf_idx, pos = _leaf_slot(tree, sid)
    entries, _ = _read_leaf(tree, txn, leaf_idx, transactional=True)
    entries[pos].root_loc = new_root_ptr
    _write_leaf(tree, txn, leaf_idx, entries)
    txn.blocking_commit = True


def mainline(tree) -> list:
    """Root-to-tip path following the first branch at each vertex."""
    txn = tree.proxy.new_txn()
    try:
        out = [0]
        entry = catalog_lookup(tree, txn, 0, fresh=True)
        while entry is not None and entry.branch_id is not None:
            out.append(entry.branch_id)
            entry = catalog_lookup(tree, txn, entry.branch_id, fresh=True)
        return out
    finally:
        txn.abort()


# ------------------------------------------------------------- copy-on-write

def cow_for_write(tree, txn, path, t: int):
    """Branching analog of the linear copy-on-write: copy the stale suffix of
    the path for tip t, recording each copy in the source's descendant set
    (with a discretionary copy when the set would exceed its bound)."""
    if path[0].node.created_sid != t:
        tree.abort_traversal(txn, path, "stale root for tip")
    if path[-1].node.created_sid == t:
        return path[-1].node
    top = len(path) - 1
    while top > 0 and path[top - 1].node.created_sid != t:
        top -= 1
    if top == 0:
        tree.abort_traversal(txn, path, "whole path stale at tip")
    new_child_ptr = None
    for i in range(len(path) - 1, top - 1, -1):
        original = path[i].node
        copy = original.copy()
        copy.created_sid = t
        copy.descendants = []
        if new_child_ptr is not None:
            key, _ = copy.entries[path[i].child_idx]
            copy.entries[path[i].child_idx] = (key, new_child_ptr)
        ptr = tree.allocate_node(txn)
        copy.ptr = ptr
        tree.write_new_node(txn, copy)
        record_copy(tree, txn, original, t, ptr)
        tree.proxy.counters.bump("copies")
        new_child_ptr = ptr
        path[i].node = copy
    parent = path[top - 1].node.copy()
    key, _ = parent.entries[path[top - 1].child_idx]
    parent.entries[path[top - 1].child_idx] = (key, new_child_ptr)
    tree.write_node(txn, parent)
    path[top - 1].node = parent
    return path[-1].node


def record_copy(tree, txn, original: BTreeNode, t: int, copy_ptr: NodePtr) -> None:
    """Add (t, copy location) to the source's descendant set, shrinking the
    set with one discretionary copy if it would exceed the node's bound."""
    ds = list(original.descendants)
    for sid, _ in ds:
        if sid == t:
            tree.abort_traversal(txn, [], "node already copied at this tip")
    ds.append((t, copy_ptr))
    _audit_copy(tree, original, t)
    beta = _beta_of(tree, txn, original.created_sid)
    if len(ds) > beta:
        ds = _shrink_cover(tree, txn, original, ds, beta)
    updated = original.copy()
    updated.descendants = ds
    tree.write_node(txn, updated)


def _audit_copy(tree, original: BTreeNode, t: int) -> None:
    """Test instrumentation: when the tree carries a copy_audit list, log the
    (source slot, copy snapshot) pair so invariant checks can enumerate the
    complete copy set of every node."""
    audit = getattr(tree, "copy_audit", None)
    if audit is not None and original.ptr is not None:
        audit.append((original.ptr.memnode_id, original.ptr.offset, t))


def _beta_of(tree, txn, sid: int) -> int:
    entry = catalog_lookup(tree, txn, sid)
    if entry is None:
        entry = catalog_lookup(tree, txn, sid, fresh=True)
    return entry.beta if entry is not None else tree.config.beta


def _shrink_cover(tree, txn, original, ds, beta):
    """Merge entries under their deepest common ancestor different from the
    node's creation snapshot; the merged entries are replaced by one entry at
    that ancestor, whose copy carries them as its own descendant set."""
    x = original.created_sid
    paths = {sid: ancestry_path(tree, txn, sid) for sid, _ in ds}
    best = None  # (depth, ancestor)
    sids = [sid for sid, _ in ds]
    for i in range(len(sids)):
        for j in range(i + 1, len(sids)):
            pa, pb = paths[sids[i]], paths[sids[j]]
            if pa is None or pb is None:
                continue
            common = None
            for da, db in zip(pa, pb):
                if da == db:
                    common = da
                else:
                    break
            if common is None or common == x:
                continue
            depth = min(pa.index(common), pb.index(common))
            if best is None or depth > best[0]:
                best = (depth, common)
    if best is None:
        raise MinuetError(
            "descendant set cannot be covered; branching bound violated upstream")
    ancestor = best[1]
    members = [(sid, ptr) for sid, ptr in ds
               if paths[sid] is not None and ancestor in paths[sid]]
    rest = [e for e in ds if e not in members]
    disc = original.copy()
    disc.created_sid = ancestor
    disc.descendants = members
    disc.ptr = tree.allocate_node(txn)
    tree.write_new_node(txn, disc)
    _audit_copy(tree, original, ancestor)
    tree.proxy.counters.bump("discretionary_copies")
    rest.append((ancestor, disc.ptr))
    if len(rest) > beta:
        raise MinuetError("one discretionary copy did not restore the bound")
    return rest


# ------------------------------------------------------------ branch creation

def create_branch(tree, txn, from_sid: int, *, beta: int | None = None):
    """One transaction: bump the global id counter, copy the source root for
    the new branch, record the copy, append the catalog entry, and stamp the
    source's branch id if this is its first branch (which is exactly snapshot
    creation). Returns (new_sid, new_root_ptr)."""
    counter = _U64.unpack(tree.proxy.replicated.read(txn, TIP_SNAPSHOT_ID))[0]
    new_sid = counter + 1
    per = entries_per_leaf(tree.proxy.layout)
    new_leaf_idx, new_pos = divmod(new_sid, per)
    if new_leaf_idx >= tree.proxy.layout.catalog_leaves:
        raise CatalogFull(f"catalog cannot hold snapshot {new_sid}")
    from_leaf_idx, from_pos = _leaf_slot(tree, from_sid)
    from_entries, _ = _read_leaf(tree, txn, from_leaf_idx, transactional=True)
    if from_pos >= len(from_entries) or from_entries[from_pos].sid != from_sid:
        raise UnknownSnapshot(f"snapshot {from_sid} not in the catalog")
    source = from_entries[from_pos]
    if source.child_count >= source.beta:
        raise BranchLimitExceeded(
            f"snapshot {from_sid} already has {source.child_count} branches")
    root = tree.read_node_transactional(txn, source.root_loc)
    if root.created_sid != from_sid:
        txn.abort()
        raise TxnAborted("catalog root does not match its snapshot")
    new_root = root.copy()
    new_root.created_sid = new_sid
    new_root.descendants = []
    new_root.ptr = tree.allocate_node(txn)
    tree.write_new_node(txn, new_root)
    record_copy(tree, txn, root, new_sid, new_root.ptr)
    tree.proxy.counters.bump("copies")
    source.child_count += 1
    if source.branch_id is None:
        source.branch_id = new_sid
    new_entry = CatalogEntry(new_sid, new_root.ptr, None, from_sid,
                             beta if beta is not None else tree.config.beta, 0)
    if new_leaf_idx == from_leaf_idx:
        if new_pos != len(from_entries):
            raise MinuetError("catalog leaf out of sequence")
        from_entries.append(new_entry)
        _write_leaf(tree, txn, from_leaf_idx, from_entries)
    else:
        new_entries, _ = _read_leaf(tree, txn, new_leaf_idx, transactional=True)
        if new_pos != len(new_entries):
            raise MinuetError("catalog leaf out of sequence")
        new_entries.append(new_entry)
        _write_leaf(tree, txn, from_leaf_idx, from_entries)
        _write_leaf(tree, txn, new_leaf_idx, new_entries)
    tree.proxy.replicated.write(txn, TIP_SNAPSHOT_ID, _U64.pack(new_sid))
    txn.blocking_commit = True
    return new_sid, new_root.ptr
