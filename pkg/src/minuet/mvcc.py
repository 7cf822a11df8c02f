"""Linear snapshot machinery.

Snapshots form a single line: snapshot ids increase by one, the highest id
(the tip) is writable and all lower ids are read-only. Creating a snapshot
freezes the current tip id, allocates a copy of the root tagged with the next
id, and installs the new id and root location at every memnode atomically.
Nodes of older snapshots are shared by the tip until first overwritten, at
which point the writer copies the node (and any stale ancestors) and records
on the original the snapshot id its copy belongs to.

That copy record is what keeps dirty traversals safe across versions: a
traversal at snapshot ``s`` must abort when it encounters a node created
after ``s`` or copied to a snapshot at or below ``s``, because in both cases
the node it sees is not the one snapshot ``s``'s tree contains. Fresh fetches
always converge, since only stale cached ancestors can route a traversal to
the wrong version.

Garbage collection reclaims exactly the nodes whose copy record is at or
below the lowest snapshot id still queryable; every other node may still be
referenced by some live snapshot.
"""
from __future__ import annotations

import struct

from .btreenode import parse_node, serialize_node
from .errors import MinuetError, MonotonicityViolation, TxnAborted
from .nodestore import LOWEST_SID, TIP_ROOT_LOC, TIP_SNAPSHOT_ID, NodePtr, unpack_ptr

_U64 = struct.Struct("<Q")


def check_node_validity(node, s: int) -> bool:
    """True when a traversal at snapshot s may continue through this node."""
    if node.created_sid > s:
        return False
    if node.copied_to is not None and node.copied_to <= s:
        return False
    return True


def cow_for_write(tree, txn, path, s: int):
    """Make the leaf at the end of ``path`` writable at tip snapshot s.

    Copies the contiguous stale suffix of the path (each copy tagged with s,
    each original stamped with its copy's snapshot id) and repoints the first
    up-to-date ancestor in place. The root is never copied here; snapshot
    creation already produced a root tagged with the tip id, so a root with
    any other tag means the traversal was stale and the transaction aborts.

    Path steps are updated in place so a subsequent split sees the copies.
    """
    if path[0].node.created_sid != s:
        tree.abort_traversal(txn, path, "stale root for tip")
    if path[-1].node.created_sid == s:
        return path[-1].node
    top = len(path) - 1
    while top > 0 and path[top - 1].node.created_sid < s:
        top -= 1
    if top == 0:
        tree.abort_traversal(txn, path, "whole path stale at tip")
    new_child_ptr = None
    for i in range(len(path) - 1, top - 1, -1):
        original = path[i].node
        if original.copied_to is not None:
            # Someone already copied it; our traversal is stale.
            tree.abort_traversal(txn, path, "node already copied")
        copy = original.copy()
        copy.created_sid = s
        copy.copied_to = None
        if new_child_ptr is not None:
            key, _ = copy.entries[path[i].child_idx]
            copy.entries[path[i].child_idx] = (key, new_child_ptr)
        ptr = tree.allocate_node(txn)
        copy.ptr = ptr
        tree.write_new_node(txn, copy)
        stamped = original.copy()
        stamped.copied_to = s
        tree.write_node(txn, stamped)
        tree.proxy.counters.bump("copies")
        new_child_ptr = ptr
        path[i].node = copy
    parent = path[top - 1].node.copy()
    key, _ = parent.entries[path[top - 1].child_idx]
    parent.entries[path[top - 1].child_idx] = (key, new_child_ptr)
    tree.write_node(txn, parent)
    path[top - 1].node = parent
    return path[-1].node


def create_snapshot(tree, txn):
    """Freeze the tip: returns (sid, loc) of the now read-only snapshot.

    Reads the replicated tip id and root location into the transaction's read
    set, bumps the id, allocates and installs a root copy tagged with the new
    tip id, and stamps the old root with its copy record. Nothing is visible
    until the transaction commits; the commit must use a blocking
    minitransaction since it updates the replicated tip objects.
    """
    sid = _U64.unpack(tree.proxy.replicated.read(txn, TIP_SNAPSHOT_ID))[0]
    loc = unpack_ptr(tree.proxy.replicated.read(txn, TIP_ROOT_LOC))
    new_tip = sid + 1
    root = tree.read_node_transactional(txn, loc)
    if root.created_sid != sid or root.copied_to is not None:
        txn.abort()
        raise TxnAborted("tip root does not match tip id")
    new_ptr = tree.allocate_node(txn)
    copy = root.copy()
    copy.created_sid = new_tip
    copy.copied_to = None
    copy.ptr = new_ptr
    tree.write_new_node(txn, copy)
    stamped = root.copy()
    stamped.copied_to = new_tip
    tree.write_node(txn, stamped)
    tree.proxy.replicated.write(txn, TIP_SNAPSHOT_ID, _U64.pack(new_tip))
    tree.proxy.replicated.write(txn, TIP_ROOT_LOC, new_ptr.pack())
    txn.blocking_commit = True
    return sid, loc


def set_lowest_snapshot(tree, sid: int) -> None:
    """Raise the garbage-collection watermark. Reads at snapshots below it
    are rejected afterwards."""
    txn = tree.proxy.new_txn()
    current = _U64.unpack(tree.proxy.replicated.read(txn, LOWEST_SID))[0]
    if sid < current:
        txn.abort()
        raise MonotonicityViolation(f"lowest watermark {current} > requested {sid}")
    if sid == current:
        txn.abort()
        tree.proxy.note_lowest(sid)
        return
    tree.proxy.replicated.write(txn, LOWEST_SID, _U64.pack(sid))
    res = txn.commit()
    if not res.committed:
        raise TxnAborted("lost a race updating the watermark", res.failed_refs)
    tree.proxy.note_lowest(sid)


def gc_sweep(tree) -> int:
    """Free every node whose copy record is at or below the watermark.

    Runs as a background pass: candidates are gathered with dirty reads and
    freed in per-memnode transactions; a lost race just leaves the slot for
    the next pass. Returns the number of slots freed.
    """
    if tree.mode_format != 1:
        raise MinuetError("garbage collection is defined for linear mode only")
    proxy = tree.proxy
    lowest = proxy.fetch_lowest()
    freed = 0
    layout = proxy.layout
    for mid in range(layout.memnode_count):
        scan_txn = proxy.new_txn()
        candidates = []
        for slot, gen in proxy.allocator.used_slots(scan_txn, mid):
            ptr = NodePtr(mid, layout.slot_offset(slot), gen)
            payload, _seq = scan_txn.dirty_read(layout.node_ref(ptr),
                                                bypass_cache=True)
            try:
                node = parse_node(payload, ptr=ptr)
            except Exception:
                continue  # never-written or torn slot; not collectable
            if node.copied_to is not None and node.copied_to <= lowest:
                candidates.append(ptr)
        scan_txn.abort()
        if not candidates:
            continue
        free_txn = proxy.new_txn()
        try:
            for ptr in candidates:
                proxy.allocator.free(free_txn, ptr)
            if free_txn.commit().committed:
                freed += len(candidates)
        except (TxnAborted, MinuetError):
            pass  # retried by the next sweep
    return freed
