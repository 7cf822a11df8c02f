"""Network front door: binary wire protocol, servers for each role, and the
socket-side implementations of the internal transports.

Frame layout (little-endian; also documented in docs/wire-protocol.md):

    length    u32   bytes after this field
    version   u8    always 1; anything else is answered Malformed
    msgType   u8
    requestId u64   echoed verbatim in the reply
    payload   type-specific bytes

Requests may be pipelined on one connection; replies carry the requestId and
may arrive in any order. A reply's payload always starts with a status byte:
0 OK, 1 NotFound, 2 Aborted (retries exhausted or resources), 3
UnknownSnapshot, 4 SnapshotRetired, 5 Malformed. Byte strings are
length-prefixed with u16 (keys, values) so the protocol is bit-exact across
implementations.
"""
from __future__ import annotations

import argparse
import json
import socket
import socketserver
import struct
import threading

from . import mvcc
from .btree import BTree
from .clock import RealClock
from .config import ClusterConfig, load_config
from .errors import (BindFailure, EntryTooLarge, MalformedMessage, MinuetError,
                     RetriesExhausted, SnapshotRetired, UnknownSnapshot,
                     Unreachable)
from .memnode import Memnode
from .minitxn import (AddressRange, CompareItem, MiniTransaction, MtOutcome,
                      MtResult, WriteItem)
from .nodestore import AddressLayout, NodePtr, PTR_LEN, unpack_ptr
from .proxy import Proxy, SnapshotDirectory
from .snapshot_service import SnapshotService

PROTOCOL_VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
SID_TIP = 0xFFFF_FFFF_FFFF_FFFF

# Message types.
MT_PREPARE = 1
MT_FINALIZE = 2
MT_EXEC1 = 3
KV_GET = 16
KV_PUT = 17
KV_REMOVE = 18
KV_SCAN = 19
SNAP_CREATE = 32
SNAP_FOR_SCAN = 33
BRANCH_CREATE = 34
GC_SET_LOWEST = 48
STATS = 64

ALL_TYPES = (MT_PREPARE, MT_FINALIZE, MT_EXEC1, KV_GET, KV_PUT, KV_REMOVE,
             KV_SCAN, SNAP_CREATE, SNAP_FOR_SCAN, BRANCH_CREATE,
             GC_SET_LOWEST, STATS)

# Reply status byte.
ST_OK = 0
ST_NOT_FOUND = 1
ST_ABORTED = 2
ST_UNKNOWN_SNAPSHOT = 3
ST_SNAPSHOT_RETIRED = 4
ST_MALFORMED = 5

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_HEAD = struct.Struct("<BBQ")  # version, type, requestId


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.at = 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.data):
            raise MalformedMessage("truncated payload")
        out = self.data[self.at:self.at + n]
        self.at += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return _U16.unpack(self.take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]

    def bytes16(self) -> bytes:
        return bytes(self.take(self.u16()))

    def bytes32(self) -> bytes:
        return bytes(self.take(self.u32()))

    def ptr(self) -> NodePtr:
        return unpack_ptr(self.take(PTR_LEN))

    def done(self) -> None:
        if self.at != len(self.data):
            raise MalformedMessage("trailing bytes in payload")


def _b16(data: bytes) -> bytes:
    if len(data) > 0xFFFE:
        raise MalformedMessage("byte string too long for u16 prefix")
    return _U16.pack(len(data)) + data


def _b32(data: bytes) -> bytes:
    return _U32.pack(len(data)) + data


# ------------------------------------------------------------------ framing

def encode_frame(msg_type: int, request_id: int, payload: bytes,
                 version: int = PROTOCOL_VERSION) -> bytes:
    body = _HEAD.pack(version, msg_type, request_id) + payload
    return _U32.pack(len(body)) + body


def read_frame(sock) -> tuple:
    """(version, msgType, requestId, payload) or None at clean EOF."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = _U32.unpack(head)
    if length < _HEAD.size or length > MAX_FRAME:
        raise MalformedMessage(f"frame length {length} out of bounds")
    body = _recv_exact(sock, length)
    if body is None:
        raise MalformedMessage("connection closed between length and body")
    version, msg_type, request_id = _HEAD.unpack_from(body)
    return version, msg_type, request_id, body[_HEAD.size:]


def _recv_exact(sock, n: int):
    """n bytes, or None on clean EOF before any byte. EOF mid-read raises:
    a byte stream cannot be resynchronized after a partial frame."""
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if not buf:
                return None
            raise MalformedMessage("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


# ------------------------------------------------------- minitransaction codec

def encode_minitxn(mt: MiniTransaction) -> bytes:
    out = bytearray([1 if mt.blocking else 0])
    out += _U16.pack(len(mt.compares))
    for c in mt.compares:
        out += _encode_range(c.range) + _b16(c.expected)
    out += _U16.pack(len(mt.reads))
    for r in mt.reads:
        out += _encode_range(r)
    out += _U16.pack(len(mt.writes))
    for w in mt.writes:
        out += _encode_range(w.range) + w.data
    return bytes(out)


def decode_minitxn(r: _Reader) -> MiniTransaction:
    blocking = bool(r.u8())
    compares = []
    for _ in range(r.u16()):
        rng = _decode_range(r)
        compares.append(CompareItem(rng, r.bytes16()))
    reads = [_decode_range(r) for _ in range(r.u16())]
    writes = []
    for _ in range(r.u16()):
        rng = _decode_range(r)
        writes.append(WriteItem(rng, bytes(r.take(rng.length))))
    return MiniTransaction(compares=compares, reads=reads, writes=writes,
                           blocking=blocking)


def _encode_range(rng: AddressRange) -> bytes:
    return _U32.pack(rng.memnode_id) + _U64.pack(rng.offset) + _U32.pack(rng.length)


def _decode_range(r: _Reader) -> AddressRange:
    try:
        return AddressRange(r.u32(), r.u64(), r.u32())
    except ValueError as exc:
        raise MalformedMessage(str(exc)) from exc


_OUTCOME_CODE = {MtOutcome.COMMITTED: 0, MtOutcome.BAD_COMPARE: 1,
                 MtOutcome.LOCK_BUSY: 2}
_CODE_OUTCOME = {v: k for k, v in _OUTCOME_CODE.items()}


def encode_mt_result(res: MtResult) -> bytes:
    out = bytearray([ST_OK, _OUTCOME_CODE[res.outcome]])
    out += _U16.pack(len(res.failed_compares))
    for i in res.failed_compares:
        out += _U32.pack(i)
    out += _U16.pack(len(res.read_data))
    for d in res.read_data:
        out += _b32(d)
    return bytes(out)


def decode_mt_result(r: _Reader) -> MtResult:
    status = r.u8()
    if status != ST_OK:
        raise MalformedMessage(f"memnode rejected request, status {status}")
    outcome = _CODE_OUTCOME.get(r.u8())
    if outcome is None:
        raise MalformedMessage("unknown outcome code")
    failed = [r.u32() for _ in range(r.u16())]
    read_data = [r.bytes32() for _ in range(r.u16())]
    return MtResult(outcome, failed_compares=failed, read_data=read_data)


# ----------------------------------------------------------- request codecs
# Requests and responses are represented as dicts so the property tests can
# drive every codec generically. encode_request/decode_request round-trip.

def encode_request(msg_type: int, body: dict) -> bytes:
    if msg_type == MT_PREPARE:
        return _b16(body["txn_id"].encode()) + encode_minitxn(body["mt"])
    if msg_type == MT_FINALIZE:
        return _b16(body["txn_id"].encode()) + bytes([1 if body["commit"] else 0])
    if msg_type == MT_EXEC1:
        return encode_minitxn(body["mt"])
    if msg_type in (KV_GET, KV_REMOVE):
        return _U64.pack(body["sid"]) + _b16(body["key"])
    if msg_type == KV_PUT:
        return _U64.pack(body["sid"]) + _b16(body["key"]) + _b16(body["value"])
    if msg_type == KV_SCAN:
        return _U64.pack(body["sid"]) + _b16(body["start"]) + _U32.pack(body["count"])
    if msg_type in (SNAP_CREATE, BRANCH_CREATE):
        return _U64.pack(body["from_sid"])
    if msg_type in (SNAP_FOR_SCAN, STATS):
        return b""
    if msg_type == GC_SET_LOWEST:
        return _U64.pack(body["sid"]) + bytes([1 if body["sweep"] else 0])
    raise MalformedMessage(f"unknown message type {msg_type}")


def decode_request(msg_type: int, payload: bytes) -> dict:
    r = _Reader(payload)
    if msg_type == MT_PREPARE:
        out = {"txn_id": r.bytes16().decode(), "mt": decode_minitxn(r)}
    elif msg_type == MT_FINALIZE:
        out = {"txn_id": r.bytes16().decode(), "commit": bool(r.u8())}
    elif msg_type == MT_EXEC1:
        out = {"mt": decode_minitxn(r)}
    elif msg_type in (KV_GET, KV_REMOVE):
        out = {"sid": r.u64(), "key": r.bytes16()}
    elif msg_type == KV_PUT:
        out = {"sid": r.u64(), "key": r.bytes16(), "value": r.bytes16()}
    elif msg_type == KV_SCAN:
        out = {"sid": r.u64(), "start": r.bytes16(), "count": r.u32()}
    elif msg_type in (SNAP_CREATE, BRANCH_CREATE):
        out = {"from_sid": r.u64()}
    elif msg_type in (SNAP_FOR_SCAN, STATS):
        out = {}
    elif msg_type == GC_SET_LOWEST:
        out = {"sid": r.u64(), "sweep": bool(r.u8())}
    else:
        raise MalformedMessage(f"unknown message type {msg_type}")
    r.done()
    return out


# ---------------------------------------------------------- response codecs

def encode_response(msg_type: int, body: dict) -> bytes:
    status = body.get("status", ST_OK)
    if msg_type in (MT_PREPARE, MT_EXEC1):
        return encode_mt_result(body["result"])
    if msg_type == MT_FINALIZE:
        return bytes([status, 1 if body["known"] else 0])
    out = bytearray([status])
    if status != ST_OK and msg_type != KV_GET:
        return bytes(out)
    if msg_type == KV_GET:
        if status == ST_OK:
            out += _b16(body["value"])
        return bytes(out)
    if msg_type == KV_PUT:
        prev = body.get("prev")
        out += bytes([0 if prev is None else 1])
        if prev is not None:
            out += _b16(prev)
    elif msg_type == KV_REMOVE:
        out += bytes([1 if body["was_present"] else 0])
    elif msg_type == KV_SCAN:
        out += _U64.pack(body["sid"])
        out += _U32.pack(len(body["entries"]))
        for k, v in body["entries"]:
            out += _b16(k) + _b16(v)
    elif msg_type in (SNAP_CREATE, SNAP_FOR_SCAN):
        out += _U64.pack(body["sid"]) + body["loc"].pack()
    elif msg_type == BRANCH_CREATE:
        out += _U64.pack(body["new_sid"])
    elif msg_type == GC_SET_LOWEST:
        out += _U64.pack(body["freed"])
    elif msg_type == STATS:
        out += _b32(json.dumps(body["stats"], sort_keys=True).encode())
    else:
        raise MalformedMessage(f"unknown message type {msg_type}")
    return bytes(out)


def decode_response(msg_type: int, payload: bytes) -> dict:
    r = _Reader(payload)
    if msg_type in (MT_PREPARE, MT_EXEC1):
        out = {"status": ST_OK, "result": decode_mt_result(r)}
        r.done()
        return out
    if msg_type == MT_FINALIZE:
        out = {"status": r.u8(), "known": bool(r.u8())}
        r.done()
        return out
    status = r.u8()
    out = {"status": status}
    if status != ST_OK and msg_type != KV_GET:
        r.done()
        return out
    if msg_type == KV_GET:
        if status == ST_OK:
            out["value"] = r.bytes16()
    elif msg_type == KV_PUT:
        out["prev"] = r.bytes16() if r.u8() else None
    elif msg_type == KV_REMOVE:
        out["was_present"] = bool(r.u8())
    elif msg_type == KV_SCAN:
        out["sid"] = r.u64()
        out["entries"] = [(r.bytes16(), r.bytes16()) for _ in range(r.u32())]
    elif msg_type in (SNAP_CREATE, SNAP_FOR_SCAN):
        out["sid"] = r.u64()
        out["loc"] = r.ptr()
    elif msg_type == BRANCH_CREATE:
        out["new_sid"] = r.u64()
    elif msg_type == GC_SET_LOWEST:
        out["freed"] = r.u64()
    elif msg_type == STATS:
        out["stats"] = json.loads(r.bytes32())
    else:
        raise MalformedMessage(f"unknown message type {msg_type}")
    r.done()
    return out


# --------------------------------------------------------------- connections

class _Conn:
    """One synchronous request/response connection; thread-confined."""

    def __init__(self, address: str, timeout: float):
        host, _, port = address.rpartition(":")
        self.sock = socket.create_connection((host, int(port)), timeout=timeout)
        self.sock.settimeout(timeout)
        self._next_id = 0

    def call(self, msg_type: int, body: dict) -> dict:
        self._next_id += 1
        rid = self._next_id
        self.sock.sendall(encode_frame(msg_type, rid, encode_request(msg_type, body)))
        frame = read_frame(self.sock)
        if frame is None:
            raise Unreachable("connection closed by peer")
        version, got_type, got_rid, payload = frame
        if version != PROTOCOL_VERSION or got_type != msg_type or got_rid != rid:
            raise MalformedMessage("reply does not match request")
        return decode_response(msg_type, payload)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


class NetworkTransport:
    """MemnodeClient over sockets; one connection per (thread, memnode)."""

    def __init__(self, memnode_addrs, timeout_ms: float, stats=None):
        from .transport import TransportStats
        self.addrs = list(memnode_addrs)
        self.timeout = timeout_ms / 1000.0
        self.stats = stats or TransportStats()
        self._local = threading.local()

    @property
    def memnode_count(self):
        return len(self.addrs)

    def _conn(self, mid: int) -> _Conn:
        conns = getattr(self._local, "conns", None)
        if conns is None:
            conns = self._local.conns = {}
        conn = conns.get(mid)
        if conn is None:
            try:
                conn = conns[mid] = _Conn(self.addrs[mid], self.timeout)
            except OSError as exc:
                raise Unreachable(f"memnode {mid}: {exc}") from exc
        return conn

    def _call(self, mid: int, msg_type: int, body: dict, kind: str) -> dict:
        self.stats.record(mid, kind)
        try:
            return self._conn(mid).call(msg_type, body)
        except (OSError, MalformedMessage) as exc:
            conns = getattr(self._local, "conns", {})
            conn = conns.pop(mid, None)
            if conn:
                conn.close()
            raise Unreachable(f"memnode {mid}: {exc}") from exc

    def prepare(self, mid, txn_id, mt):
        resp = self._call(mid, MT_PREPARE, {"txn_id": txn_id, "mt": mt}, "prepare")
        return resp["result"]

    def finalize(self, mid, txn_id, commit):
        resp = self._call(mid, MT_FINALIZE,
                          {"txn_id": txn_id, "commit": commit}, "finalize")
        return resp["known"]

    def exec_one_phase(self, mid, mt):
        resp = self._call(mid, MT_EXEC1, {"mt": mt}, "exec1")
        return resp["result"]


class ScsClient:
    """Proxy-side client for the snapshot creation service."""

    def __init__(self, address: str, timeout_ms: float):
        self.address = address
        self.timeout = timeout_ms / 1000.0
        self._local = threading.local()

    def _call(self, msg_type, body):
        conn = getattr(self._local, "conn", None)
        try:
            if conn is None:
                conn = self._local.conn = _Conn(self.address, self.timeout)
            return conn.call(msg_type, body)
        except (OSError, MalformedMessage) as exc:
            if conn is not None:
                conn.close()
                self._local.conn = None
            raise Unreachable(f"snapshot service: {exc}") from exc

    def create_snapshot(self, from_sid=None):
        resp = self._call(SNAP_CREATE,
                          {"from_sid": SID_TIP if from_sid is None else from_sid})
        _raise_for_status(resp["status"])
        return resp["sid"], resp["loc"]

    def snapshot_for_scan(self):
        resp = self._call(SNAP_FOR_SCAN, {})
        _raise_for_status(resp["status"])
        return resp["sid"], resp["loc"]

    def create_branch(self, from_sid):
        resp = self._call(BRANCH_CREATE, {"from_sid": from_sid})
        _raise_for_status(resp["status"])
        return resp["new_sid"]


def _raise_for_status(status: int):
    if status == ST_OK:
        return
    raise {ST_UNKNOWN_SNAPSHOT: UnknownSnapshot,
           ST_SNAPSHOT_RETIRED: SnapshotRetired,
           ST_ABORTED: RetriesExhausted}.get(status, MalformedMessage)(
               f"service answered status {status}")


# ------------------------------------------------------------------- servers

class _FrameServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, dispatcher):
        host, _, port = address.rpartition(":")
        try:
            super().__init__((host, int(port)), _FrameHandler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {address}: {exc}") from exc
        self.dispatcher = dispatcher


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        write_lock = threading.Lock()
        while True:
            try:
                frame = read_frame(sock)
            except MalformedMessage:
                with write_lock:
                    _try_send(sock, encode_frame(0, 0, bytes([ST_MALFORMED])))
                return  # cannot resynchronize a broken stream
            except OSError:
                return
            if frame is None:
                return
            version, msg_type, request_id, payload = frame

            def answer(version=version, msg_type=msg_type,
                       request_id=request_id, payload=payload):
                reply = self.server.dispatcher.dispatch(version, msg_type, payload)
                with write_lock:
                    _try_send(sock, encode_frame(msg_type, request_id, reply))

            threading.Thread(target=answer, daemon=True).start()


def _try_send(sock, data):
    try:
        sock.sendall(data)
    except OSError:
        pass


class _Dispatcher:
    """Shared request plumbing: version gate, payload parsing, error mapping."""

    def dispatch(self, version: int, msg_type: int, payload: bytes) -> bytes:
        if version != PROTOCOL_VERSION or msg_type not in ALL_TYPES:
            return bytes([ST_MALFORMED])
        try:
            body = decode_request(msg_type, payload)
        except (MalformedMessage, ValueError, struct.error):
            return bytes([ST_MALFORMED])
        try:
            return encode_response(msg_type, self.handle(msg_type, body))
        except (MalformedMessage, EntryTooLarge, ValueError):
            return bytes([ST_MALFORMED])
        except UnknownSnapshot:
            return bytes([ST_UNKNOWN_SNAPSHOT])
        except SnapshotRetired:
            return bytes([ST_SNAPSHOT_RETIRED])
        except MinuetError:
            return bytes([ST_ABORTED])

    def handle(self, msg_type: int, body: dict) -> dict:
        raise NotImplementedError


class MemnodeDispatcher(_Dispatcher):
    def __init__(self, memnode: Memnode):
        self.memnode = memnode

    def handle(self, msg_type, body):
        if msg_type == MT_PREPARE:
            return {"result": self.memnode.prepare(body["txn_id"], body["mt"])}
        if msg_type == MT_FINALIZE:
            return {"known": self.memnode.finalize(body["txn_id"], body["commit"])}
        if msg_type == MT_EXEC1:
            return {"result": self.memnode.exec_one_phase(body["mt"])}
        if msg_type == STATS:
            return {"stats": {"role": "memnode", "id": self.memnode.memnode_id}}
        raise MalformedMessage(f"memnode cannot serve message type {msg_type}")


class ProxyDispatcher(_Dispatcher):
    def __init__(self, config: ClusterConfig, proxy_id: int):
        self.config = config
        layout = AddressLayout(config)
        transport = NetworkTransport(config.memnodes, config.request_timeout_ms)
        self.directory = SnapshotDirectory()
        self.proxy = Proxy(config, layout, transport, proxy_id, self.directory)
        self.tree = BTree(self.proxy, config)
        self.scs = ScsClient(config.scs, config.request_timeout_ms)

    def handle(self, msg_type, body):
        if msg_type == KV_GET:
            sid = None if body["sid"] == SID_TIP else body["sid"]
            value = self.tree.get(body["key"], sid=sid)
            if value is None:
                return {"status": ST_NOT_FOUND}
            return {"value": value}
        if msg_type == KV_PUT:
            sid = None if body["sid"] == SID_TIP else body["sid"]
            prev = self.tree.put(body["key"], body["value"], sid=sid)
            return {"prev": prev}
        if msg_type == KV_REMOVE:
            sid = None if body["sid"] == SID_TIP else body["sid"]
            return {"was_present": self.tree.remove(body["key"], sid=sid)}
        if msg_type == KV_SCAN:
            if body["sid"] == SID_TIP:
                sid, loc = self.scs.snapshot_for_scan()
                self.directory.record(sid, loc)
            else:
                sid = body["sid"]
            entries = self.tree.scan(body["start"], body["count"], sid)
            return {"sid": sid, "entries": entries}
        if msg_type == SNAP_CREATE:
            from_sid = None if body["from_sid"] == SID_TIP else body["from_sid"]
            sid, loc = self.scs.create_snapshot(from_sid)
            self.directory.record(sid, loc)
            return {"sid": sid, "loc": loc}
        if msg_type == SNAP_FOR_SCAN:
            sid, loc = self.scs.snapshot_for_scan()
            self.directory.record(sid, loc)
            return {"sid": sid, "loc": loc}
        if msg_type == BRANCH_CREATE:
            return {"new_sid": self.scs.create_branch(body["from_sid"])}
        if msg_type == GC_SET_LOWEST:
            mvcc.set_lowest_snapshot(self.tree, body["sid"])
            freed = mvcc.gc_sweep(self.tree) if body["sweep"] else 0
            return {"freed": freed}
        if msg_type == STATS:
            return {"stats": self._stats()}
        raise MalformedMessage(f"proxy cannot serve message type {msg_type}")

    def _stats(self):
        reachable = {}
        for mid in range(len(self.config.memnodes)):
            try:
                self.proxy.transport.exec_one_phase(mid, MiniTransaction())
                reachable[str(mid)] = True
            except Unreachable:
                reachable[str(mid)] = False
        try:
            self.scs._call(STATS, {})
            scs_ok = True
        except (Unreachable, MinuetError):
            scs_ok = False
        return {"role": "proxy", "id": self.proxy.proxy_id,
                "counters": self.proxy.counters.as_dict(),
                "exchanges": self.proxy.transport.stats.exchanges,
                "memnodes_reachable": reachable, "scs_reachable": scs_ok}


class ScsDispatcher(_Dispatcher):
    def __init__(self, config: ClusterConfig):
        self.config = config
        layout = AddressLayout(config)
        transport = NetworkTransport(config.memnodes, config.request_timeout_ms)
        self.directory = SnapshotDirectory()
        proxy = Proxy(config, layout, transport, 9999, self.directory)
        self.service = SnapshotService(BTree(proxy, config), self.directory,
                                       clock=RealClock(),
                                       k=config.snapshot_interval_k)

    def handle(self, msg_type, body):
        if msg_type == SNAP_CREATE:
            from_sid = None if body["from_sid"] == SID_TIP else body["from_sid"]
            sid, loc = self.service.create_snapshot(from_sid)
            return {"sid": sid, "loc": loc}
        if msg_type == SNAP_FOR_SCAN:
            sid, loc = self.service.snapshot_for_scan()
            return {"sid": sid, "loc": loc}
        if msg_type == BRANCH_CREATE:
            return {"new_sid": self.service.create_branch(body["from_sid"])}
        if msg_type == STATS:
            return {"stats": {"role": "scs",
                              "created": self.service.created_count,
                              "borrowed": self.service.borrowed_count}}
        raise MalformedMessage(f"scs cannot serve message type {msg_type}")


class KvWireClient:
    """Client-side convenience wrapper over the proxy protocol."""

    def __init__(self, address: str, timeout_ms: float = 5000.0):
        self._conn = _Conn(address, timeout_ms / 1000.0)

    def close(self):
        self._conn.close()

    def _call(self, msg_type, body):
        return self._conn.call(msg_type, body)

    def get(self, key: bytes, sid: int | None = None):
        resp = self._call(KV_GET, {"sid": SID_TIP if sid is None else sid,
                                   "key": key})
        if resp["status"] == ST_NOT_FOUND:
            return None
        _raise_for_status(resp["status"])
        return resp["value"]

    def put(self, key: bytes, value: bytes, sid: int | None = None):
        resp = self._call(KV_PUT, {"sid": SID_TIP if sid is None else sid,
                                   "key": key, "value": value})
        _raise_for_status(resp["status"])
        return resp["prev"]

    def remove(self, key: bytes, sid: int | None = None):
        resp = self._call(KV_REMOVE, {"sid": SID_TIP if sid is None else sid,
                                      "key": key})
        _raise_for_status(resp["status"])
        return resp["was_present"]

    def scan(self, start: bytes, count: int, sid: int | None = None):
        resp = self._call(KV_SCAN, {"sid": SID_TIP if sid is None else sid,
                                    "start": start, "count": count})
        _raise_for_status(resp["status"])
        return resp["sid"], resp["entries"]

    def snap_create(self, from_sid=None):
        resp = self._call(SNAP_CREATE,
                          {"from_sid": SID_TIP if from_sid is None else from_sid})
        _raise_for_status(resp["status"])
        return resp["sid"], resp["loc"]

    def branch_create(self, from_sid: int):
        resp = self._call(BRANCH_CREATE, {"from_sid": from_sid})
        _raise_for_status(resp["status"])
        return resp["new_sid"]

    def gc_set_lowest(self, sid: int, sweep: bool = True):
        resp = self._call(GC_SET_LOWEST, {"sid": sid, "sweep": sweep})
        _raise_for_status(resp["status"])
        return resp["freed"]

    def stats(self):
        resp = self._call(STATS, {})
        _raise_for_status(resp["status"])
        return resp["stats"]

    def raw(self, data: bytes) -> bytes | None:
        """Send raw bytes and read one reply frame if any; fuzzing hook."""
        self._conn.sock.sendall(data)
        try:
            frame = read_frame(self._conn.sock)
        except (MalformedMessage, OSError):
            return None
        return frame[3] if frame else None


# ----------------------------------------------------------------- bootstrap

def bootstrap_memnodes(config: ClusterConfig):
    """Build the memnode objects with their initial images. The first memnode
    server to start does not coordinate with others; every memnode boots the
    same deterministic image, so any subset forms a consistent cluster."""
    from .cluster import LocalCluster
    cluster = LocalCluster(config, proxy_count=0)
    return cluster.memnodes


def serve(config: ClusterConfig, role: str, node_id: int = 0):
    """Run one server until interrupted. Roles: memnode, proxy, scs."""
    config.validate()
    if role == "memnode":
        memnodes = bootstrap_memnodes(config)
        dispatcher = MemnodeDispatcher(memnodes[node_id])
        address = config.memnodes[node_id]
    elif role == "proxy":
        dispatcher = ProxyDispatcher(config, node_id)
        address = config.proxies[node_id]
    elif role == "scs":
        dispatcher = ScsDispatcher(config)
        address = config.scs
    else:
        raise ValueError(f"unknown role {role!r}")
    server = _FrameServer(address, dispatcher)
    return server


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="minuet-server",
        description="Run one cluster role: memnode, proxy, or snapshot service.")
    parser.add_argument("--config", required=True, help="cluster config file")
    parser.add_argument("--role", required=True,
                        choices=["memnode", "proxy", "scs"])
    parser.add_argument("--id", type=int, default=0,
                        help="index within the role's address list")
    args = parser.parse_args(argv)
    config = load_config(args.config)
    server = serve(config, args.role, args.id)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
