"""Sampler + feature server over a length-prefixed binary protocol, and its client.

Connection preamble (both directions): ``b"OSGP"`` | version u16.  A
server that sees a different version answers with an Error frame and
closes the connection.

Frame (little-endian)::

    length u32 (payload bytes) | opcode u8 | request_id u64 | payload

Opcodes and payloads:

    0x00 Health          request: empty
                         reply:   node count u64 | schema length u32 | schema text
    0x01 SampleNeighbors request: node | sampling config
                         reply:   neighborhood
    0x02 FetchFeatures   request: count u32 | count x node
                         reply:   count u32 | per node: present u8 [| record]
    0x03 SampleAndFetch  request: as 0x01
                         reply:   neighborhood | features of [source, neighbors...] as in 0x02
    0x7F Error           reply:   code u16 | UTF-8 message

    node             = id u64 | type u8
    sampling config  = budget u32 | restart f64 | subsets u8 |
                       per subset: relations u8 | codes u8... | quotas u8 | (type u8, k u32)...
    neighborhood     = count u32 | count x (node, score f64)
    record           = feature-store record encoding

Replies echo the request id and may arrive out of order.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

from .errors import HetrepError, ProtocolError
from .features import FeatureRecord, decode_record, encode_record
from .graph import HeteroGraph
from .sampler import Neighborhood, RelationSubset, SamplingConfig, ScoredNeighbor, sample_neighborhood
from .schema import NodeRef, Schema

PREAMBLE_MAGIC = b"OSGP"
PROTOCOL_VERSION = 1
_PREAMBLE = struct.Struct("<4sH")
_HEADER = struct.Struct("<IBQ")
_NODE = struct.Struct("<QB")
_SCORED = struct.Struct("<QBd")

OP_HEALTH = 0x00
OP_SAMPLE = 0x01
OP_FETCH = 0x02
OP_SAMPLE_FETCH = 0x03
OP_ERROR = 0x7F

ERR_MALFORMED = 1
ERR_UNKNOWN_OPCODE = 2
ERR_TOO_LARGE = 3
ERR_VERSION = 4
ERR_INTERNAL = 5

DEFAULT_MAX_FRAME = 16 * 1024 * 1024
DEFAULT_TIMEOUT = 5.0


# -- encoding ----------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, st: struct.Struct) -> tuple:
        if self.pos + st.size > len(self.buf):
            raise ProtocolError("payload too short", ERR_MALFORMED)
        out = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return out

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise ProtocolError("trailing bytes in payload", ERR_MALFORMED)


_U8, _U32, _F64 = struct.Struct("<B"), struct.Struct("<I"), struct.Struct("<d")


def encode_config(cfg: SamplingConfig) -> bytes:
    parts = [struct.pack("<IdB", cfg.budget, cfg.restart_prob, len(cfg.subsets))]
    for s in cfg.subsets:
        rels = sorted(s.relations)
        parts.append(struct.pack(f"<B{len(rels)}B", len(rels), *rels))
        parts.append(_U8.pack(len(s.quotas)))
        for t, k in s.quotas.items():
            parts.append(struct.pack("<BI", t, k))
    return b"".join(parts)


def decode_config(r: _Reader) -> SamplingConfig:
    budget, restart, n = r.take(struct.Struct("<IdB"))
    subsets = []
    for _ in range(n):
        (nrel,) = r.take(_U8)
        rels = frozenset(r.take(_U8)[0] for _ in range(nrel))
        (nq,) = r.take(_U8)
        quotas = {}
        for _ in range(nq):
            t, k = r.take(struct.Struct("<BI"))
            quotas[t] = k
        subsets.append(RelationSubset(rels, quotas))
    return SamplingConfig(tuple(subsets), budget, restart)


def encode_neighborhood(nb: Neighborhood) -> bytes:
    return _U32.pack(len(nb.neighbors)) + b"".join(
        _SCORED.pack(n.node.id, n.node.type, n.score) for n in nb.neighbors)


def decode_neighborhood(source: NodeRef, r: _Reader) -> Neighborhood:
    (n,) = r.take(_U32)
    out = []
    for _ in range(n):
        i, t, s = r.take(_SCORED)
        out.append(ScoredNeighbor(NodeRef(i, t), s))
    return Neighborhood(source, out)


def encode_features(records: Sequence[FeatureRecord | None]) -> bytes:
    parts = [_U32.pack(len(records))]
    for rec in records:
        if rec is None:
            parts.append(b"\x00")
        else:
            parts.append(b"\x01" + encode_record(rec))
    return b"".join(parts)


def decode_features(nodes: Sequence[NodeRef], r: _Reader, schema: Schema) -> list[FeatureRecord | None]:
    (n,) = r.take(_U32)
    if n != len(nodes):
        raise ProtocolError("feature count does not match request", ERR_MALFORMED)
    out = []
    for node in nodes:
        (present,) = r.take(_U8)
        if present:
            rec, r.pos = decode_record(node, r.buf, r.pos, schema)
            out.append(rec)
        else:
            out.append(None)
    return out


def encode_frame(opcode: int, request_id: int, payload: bytes = b"") -> bytes:
    return _HEADER.pack(len(payload), opcode, request_id) + payload


def encode_error(code: int, message: str) -> bytes:
    return struct.pack("<H", code) + message.encode("utf-8")


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            return None
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


# -- server ------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    server: "GraphServer"

    def handle(self) -> None:
        sock = self.request
        srv = self.server
        write_lock = threading.Lock()

        def send(opcode: int, rid: int, payload: bytes) -> None:
            with write_lock:
                sock.sendall(encode_frame(opcode, rid, payload))

        pre = _recv_exact(sock, _PREAMBLE.size)
        if pre is None:
            return
        magic, version = _PREAMBLE.unpack(pre)
        sock.sendall(_PREAMBLE.pack(PREAMBLE_MAGIC, PROTOCOL_VERSION))
        if magic != PREAMBLE_MAGIC or version != PROTOCOL_VERSION:
            send(OP_ERROR, 0, encode_error(ERR_VERSION, f"protocol version {version} not supported"))
            return
        while not srv.stopping.is_set():
            head = _recv_exact(sock, _HEADER.size)
            if head is None:
                return
            length, opcode, rid = _HEADER.unpack(head)
            if length > srv.max_frame:
                remaining = length
                while remaining:
                    chunk = sock.recv(min(remaining, 1 << 20))
                    if not chunk:
                        return
                    remaining -= len(chunk)
                send(OP_ERROR, rid, encode_error(ERR_TOO_LARGE, f"frame of {length} bytes exceeds limit"))
                continue
            payload = _recv_exact(sock, length)
            if payload is None:
                return
            srv.submit(send, opcode, rid, payload)


class GraphServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    """Serves sampling and feature lookups over an immutable graph and store."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, graph: HeteroGraph, store, address: tuple[str, int] = ("127.0.0.1", 0),
                 max_frame: int = DEFAULT_MAX_FRAME, workers: int = 8):
        self.graph = graph
        self.store = store
        self.schema = graph.schema if graph.schema is not None else store.schema
        self.max_frame = max_frame
        self.stopping = threading.Event()
        self._pool = ThreadPoolExecutor(workers)
        self._thread: threading.Thread | None = None
        super().__init__(address, _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def submit(self, send, opcode: int, rid: int, payload: bytes) -> None:
        self._pool.submit(self._dispatch, send, opcode, rid, payload)

    def _dispatch(self, send, opcode: int, rid: int, payload: bytes) -> None:
        try:
            reply = self.handle_request_payload(opcode, payload)
            send(opcode, rid, reply)
        except ProtocolError as exc:
            self._safe_send(send, rid, exc.code, str(exc))
        except HetrepError as exc:
            self._safe_send(send, rid, ERR_MALFORMED, str(exc))
        except Exception as exc:  # the server must survive any single bad request
            self._safe_send(send, rid, ERR_INTERNAL, f"{type(exc).__name__}: {exc}")

    @staticmethod
    def _safe_send(send, rid: int, code: int, message: str) -> None:
        try:
            send(OP_ERROR, rid, encode_error(code, message))
        except OSError:
            pass

    def handle_request_payload(self, opcode: int, payload: bytes) -> bytes:
        r = _Reader(payload)
        if opcode == OP_HEALTH:
            r.done()
            text = self.schema.canonical().encode("utf-8")
            return struct.pack("<QI", self.graph.num_nodes, len(text)) + text
        if opcode in (OP_SAMPLE, OP_SAMPLE_FETCH):
            node = NodeRef(*r.take(_NODE))
            cfg = decode_config(r)
            r.done()
            nb = sample_neighborhood(self.graph, node, cfg)
            out = encode_neighborhood(nb)
            if opcode == OP_SAMPLE_FETCH:
                out += encode_features(self.store.fetch([node, *nb.nodes()]))
            return out
        if opcode == OP_FETCH:
            (n,) = r.take(_U32)
            nodes = [NodeRef(*r.take(_NODE)) for _ in range(n)]
            r.done()
            return encode_features(self.store.fetch(nodes))
        raise ProtocolError(f"unknown opcode 0x{opcode:02x}", ERR_UNKNOWN_OPCODE)

    def start(self) -> "GraphServer":
        self._thread = threading.Thread(target=self.serve_forever, kwargs={"poll_interval": 0.05}, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        """Stop accepting, finish in-flight requests, then close."""
        self.stopping.set()
        self.shutdown()
        self._pool.shutdown(wait=True)
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "GraphServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(graph: HeteroGraph, store, bind: str = "127.0.0.1:0", **kw) -> GraphServer:
    host, _, port = bind.rpartition(":")
    return GraphServer(graph, store, (host or "127.0.0.1", int(port)), **kw).start()


# -- client ------------------------------------------------------------------

class _Pending:
    __slots__ = ("event", "opcode", "payload")

    def __init__(self):
        self.event = threading.Event()
        self.opcode = None
        self.payload = b""


class GraphClient:
    """Thread-safe client; concurrent requests share one connection and are routed by request id."""

    def __init__(self, address: tuple[str, int] | str, timeout: float = DEFAULT_TIMEOUT,
                 version: int = PROTOCOL_VERSION):
        if isinstance(address, str):
            host, _, port = address.rpartition(":")
            address = (host, int(port))
        self.timeout = timeout
        self.sock = socket.create_connection(address, timeout=timeout)
        self.sock.sendall(_PREAMBLE.pack(PREAMBLE_MAGIC, version))
        pre = _recv_exact(self.sock, _PREAMBLE.size)
        if pre is None:
            raise ProtocolError("server closed during handshake", ERR_VERSION)
        magic, server_version = _PREAMBLE.unpack(pre)
        if magic != PREAMBLE_MAGIC or server_version != version:
            self.sock.close()
            raise ProtocolError(f"server speaks protocol {server_version}, client {version}", ERR_VERSION)
        self.sock.settimeout(None)
        self._lock = threading.Lock()
        self._write = threading.Lock()
        self._next = 1
        self._pending: dict[int, _Pending] = {}
        self._closed = False
        self._schema: Schema | None = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                head = _recv_exact(self.sock, _HEADER.size)
                if head is None:
                    break
                length, opcode, rid = _HEADER.unpack(head)
                payload = _recv_exact(self.sock, length)
                if payload is None:
                    break
                with self._lock:
                    slot = self._pending.pop(rid, None)
                if slot is not None:
                    slot.opcode, slot.payload = opcode, payload
                    slot.event.set()
        except OSError:
            pass
        finally:
            self._closed = True
            with self._lock:
                waiting = list(self._pending.values())
                self._pending.clear()
            for slot in waiting:
                slot.event.set()

    def request(self, opcode: int, payload: bytes = b"", timeout: float | None = None) -> bytes:
        """Send one frame and wait for its reply payload; Error replies raise :class:`ProtocolError`."""
        if self._closed:
            raise ProtocolError("connection closed", ERR_INTERNAL, retryable=True)
        slot = _Pending()
        with self._lock:
            rid = self._next
            self._next += 1
            self._pending[rid] = slot
        with self._write:
            self.sock.sendall(encode_frame(opcode, rid, payload))
        if not slot.event.wait(self.timeout if timeout is None else timeout):
            with self._lock:
                self._pending.pop(rid, None)
            raise ProtocolError(f"request {rid} timed out", ERR_INTERNAL, retryable=True)
        if slot.opcode is None:
            raise ProtocolError("connection closed before reply", ERR_INTERNAL, retryable=True)
        if slot.opcode == OP_ERROR:
            r = _Reader(slot.payload)
            (code,) = r.take(struct.Struct("<H"))
            raise ProtocolError(slot.payload[2:].decode("utf-8", "replace"), code,
                                retryable=code == ERR_INTERNAL)
        return slot.payload

    def health(self) -> tuple[int, Schema]:
        r = _Reader(self.request(OP_HEALTH))
        n, slen = r.take(struct.Struct("<QI"))
        text = r.buf[r.pos:r.pos + slen].decode("utf-8")
        r.pos += slen
        r.done()
        self._schema = Schema.from_text(text)
        return n, self._schema

    @property
    def schema(self) -> Schema:
        if self._schema is None:
            self.health()
        return self._schema

    def sample_neighbors(self, node: NodeRef, cfg: SamplingConfig) -> Neighborhood:
        node = NodeRef(int(node[0]), int(node[1]))
        r = _Reader(self.request(OP_SAMPLE, _NODE.pack(*node) + encode_config(cfg)))
        nb = decode_neighborhood(node, r)
        r.done()
        return nb

    def fetch_features(self, nodes: Sequence[NodeRef]) -> list[FeatureRecord | None]:
        nodes = [NodeRef(int(n[0]), int(n[1])) for n in nodes]
        payload = _U32.pack(len(nodes)) + b"".join(_NODE.pack(*n) for n in nodes)
        r = _Reader(self.request(OP_FETCH, payload))
        out = decode_features(nodes, r, self.schema)
        r.done()
        return out

    def sample_and_fetch(self, node: NodeRef, cfg: SamplingConfig) -> tuple[Neighborhood, list[FeatureRecord | None]]:
        """Neighborhood of ``node`` and the features of ``[node, *neighbors]``."""
        node = NodeRef(int(node[0]), int(node[1]))
        schema = self.schema
        r = _Reader(self.request(OP_SAMPLE_FETCH, _NODE.pack(*node) + encode_config(cfg)))
        nb = decode_neighborhood(node, r)
        feats = decode_features([node, *nb.nodes()], r, schema)
        r.done()
        return nb, feats

    def close(self) -> None:
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._reader.join(timeout=1.0)

    def __enter__(self) -> "GraphClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def client_sample_and_fetch(address, node: NodeRef, cfg: SamplingConfig, timeout: float = DEFAULT_TIMEOUT):
    with GraphClient(address, timeout=timeout) as c:
        return c.sample_and_fetch(node, cfg)
