"""Immutable heterogeneous graph in compressed sparse row layout.

Nodes are identified by ``NodeRef(id, type)``; ids of different node types
may collide.  Internal dense indices follow first-seen order during
:func:`build_graph`.  Every undirected edge is stored twice (once per
endpoint) and each node's adjacency segment is sorted by
``(edge type, neighbor index)``.
"""

from __future__ import annotations

import mmap
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import IntegrityError, NotFoundError, SchemaError, ValidationError
from .schema import NodeRef, Schema

SNAPSHOT_MAGIC = b"OSGR"
SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class EdgeRecord:
    src: NodeRef
    dst: NodeRef
    edge_type: int
    weight: float = 1.0


@dataclass(frozen=True)
class PruneConfig:
    alpha: float = 0.86
    d_min: int = 10
    d_max: int = 10000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.d_min < 1 or self.d_max < 1:
            raise ValidationError("d_min and d_max must be positive")
        if self.d_min > self.d_max:
            raise ValidationError(f"d_min={self.d_min} exceeds d_max={self.d_max}")


class HeteroGraph:
    """Read-only typed adjacency structure.

    Arrays may be backed by a memory-mapped snapshot; nothing here mutates
    them after construction.
    """

    def __init__(self, node_ids, node_types, indptr, nbr, etype, weight, schema: Schema | None = None):
        self.node_ids = np.asarray(node_ids, dtype=np.uint64)
        self.node_types = np.asarray(node_types, dtype=np.uint8)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.nbr = np.asarray(nbr, dtype=np.int64)
        self.etype = np.asarray(etype, dtype=np.uint8)
        self.weight = np.asarray(weight, dtype=np.float64)
        self.schema = schema
        # (type, id) sorted view for O(log n) lookups
        self._order = np.lexsort((self.node_ids, self.node_types))
        self._sorted_types = self.node_types[self._order]
        self._sorted_ids = self.node_ids[self._order]
        self._induced: dict[frozenset, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._mmap = None

    # -- basic sizes -------------------------------------------------------
    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return len(self.nbr) // 2

    def type_counts(self) -> dict[int, int]:
        types, counts = np.unique(self.node_types, return_counts=True)
        return {int(t): int(c) for t, c in zip(types, counts)}

    def node(self, index: int) -> NodeRef:
        return NodeRef(int(self.node_ids[index]), int(self.node_types[index]))

    def nodes(self) -> list[NodeRef]:
        return [NodeRef(int(i), int(t)) for i, t in zip(self.node_ids, self.node_types)]

    def find(self, ref: NodeRef) -> int:
        """Internal index of ``ref`` or -1."""
        lo = np.searchsorted(self._sorted_types, ref.type, side="left")
        hi = np.searchsorted(self._sorted_types, ref.type, side="right")
        if lo == hi:
            return -1
        pos = lo + np.searchsorted(self._sorted_ids[lo:hi], np.uint64(ref.id))
        if pos < hi and int(self._sorted_ids[pos]) == ref.id:
            return int(self._order[pos])
        return -1

    def index_of(self, ref: NodeRef) -> int:
        i = self.find(ref)
        if i < 0:
            raise NotFoundError(f"node {tuple(ref)} not in graph")
        return i

    def __contains__(self, ref: NodeRef) -> bool:
        return self.find(ref) >= 0

    # -- adjacency ---------------------------------------------------------
    def degree(self, ref: NodeRef) -> int:
        i = self.index_of(ref)
        return int(self.indptr[i + 1] - self.indptr[i])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, ref: NodeRef, relation_filter: Iterable[int] | None = None) -> list[tuple[NodeRef, float]]:
        """Neighbors of ``ref`` whose edge type is in ``relation_filter``.

        ``None`` means every edge type; an empty filter yields nothing.
        Order follows the stored adjacency: edge type, then neighbor index.
        """
        i = self.index_of(ref)
        lo, hi = self.indptr[i], self.indptr[i + 1]
        nb, et, w = self.nbr[lo:hi], self.etype[lo:hi], self.weight[lo:hi]
        if relation_filter is not None:
            keep = np.isin(et, np.fromiter(relation_filter, dtype=np.int64))
            nb, w = nb[keep], w[keep]
        return [(self.node(j), float(x)) for j, x in zip(nb, w)]

    def induced(self, relation_set: Iterable[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR arrays ``(indptr, nbr, weight)`` of the subgraph whose edges carry a type in ``relation_set``."""
        key = frozenset(int(r) for r in relation_set)
        cached = self._induced.get(key)
        if cached is not None:
            return cached
        keep = np.isin(self.etype, np.fromiter(key, dtype=np.int64, count=len(key)))
        rows = np.repeat(np.arange(self.num_nodes), np.diff(self.indptr))
        counts = np.bincount(rows[keep], minlength=self.num_nodes)
        indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        out = (indptr, self.nbr[keep].copy(), self.weight[keep].copy())
        self._induced[key] = out
        return out

    def edges(self) -> Iterator[EdgeRecord]:
        """Each undirected edge once, from its lower-index endpoint."""
        for u in range(self.num_nodes):
            for h in range(self.indptr[u], self.indptr[u + 1]):
                v = int(self.nbr[h])
                if u < v:
                    yield EdgeRecord(self.node(u), self.node(v), int(self.etype[h]), float(self.weight[h]))

    def edge_set(self) -> set[tuple[NodeRef, NodeRef, int]]:
        out = set()
        for e in self.edges():
            a, b = sorted((e.src, e.dst), key=NodeRef.sort_key)
            out.add((a, b, e.edge_type))
        return out

    # -- snapshot ----------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_snapshot(self, path)

    def close(self) -> None:
        if self._mmap is not None:
            try:
                self._mmap.close()
            except BufferError:
                # arrays still view the map; it is released with them
                return
            self._mmap = None


def _check_types(schema: Schema | None, rec: EdgeRecord) -> None:
    if schema is None:
        return
    schema.check_node_type(rec.src.type)
    schema.check_node_type(rec.dst.type)
    schema.check_edge_type(rec.edge_type)


def build_graph(records: Iterable[EdgeRecord], schema: Schema | None = None) -> HeteroGraph:
    """Build a graph from a stream of typed, weighted edges.

    Duplicate ``(u, v, edge type)`` triples are merged by summing weights.
    Self-loops are dropped.
    """
    index: dict[NodeRef, int] = {}
    refs: list[NodeRef] = []
    merged: dict[tuple[int, int, int], float] = {}
    for rec in records:
        _check_types(schema, rec)
        w = float(rec.weight)
        if not np.isfinite(w) or w < 0:
            raise ValidationError(f"edge weight must be finite and >= 0, got {rec.weight!r}")
        ids = []
        for ref in (rec.src, rec.dst):
            if not 0 <= ref.id < 2**64:
                raise ValidationError(f"node id {ref.id} does not fit in u64")
            i = index.get(ref)
            if i is None:
                i = index[ref] = len(refs)
                refs.append(NodeRef(int(ref.id), int(ref.type)))
            ids.append(i)
        u, v = ids
        if u == v:
            continue
        key = (min(u, v), max(u, v), int(rec.edge_type))
        merged[key] = merged.get(key, 0.0) + w

    # nodes touched only by self-loops are not endpoints of E
    used = np.zeros(len(refs), dtype=bool)
    for u, v, _ in merged:
        used[u] = used[v] = True
    keep_nodes = [r for r, ok in zip(refs, used) if ok]
    remap = np.full(len(refs), -1, dtype=np.int64)
    remap[used] = np.arange(len(keep_nodes))

    if merged:
        arr = np.array(list(merged.keys()), dtype=np.int64)
        w = np.fromiter(merged.values(), dtype=np.float64, count=len(merged))
        u, v, t = remap[arr[:, 0]], remap[arr[:, 1]], arr[:, 2]
    else:
        u = v = t = np.zeros(0, dtype=np.int64)
        w = np.zeros(0, dtype=np.float64)
    return _from_edge_arrays(keep_nodes, u, v, t, w, schema)


def _from_edge_arrays(refs: list[NodeRef], u, v, t, w, schema) -> HeteroGraph:
    n = len(refs)
    rows = np.concatenate([u, v])
    cols = np.concatenate([v, u])
    types = np.concatenate([t, t])
    weights = np.concatenate([w, w])
    order = np.lexsort((cols, types, rows))
    rows, cols, types, weights = rows[order], cols[order], types[order], weights[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    node_ids = np.array([r.id for r in refs], dtype=np.uint64)
    node_types = np.array([r.type for r in refs], dtype=np.uint8)
    return HeteroGraph(node_ids, node_types, indptr, cols, types, weights, schema)


def _mirror(g: HeteroGraph) -> np.ndarray:
    """For each half-edge, the index of its reverse half-edge."""
    rows = np.repeat(np.arange(g.num_nodes, dtype=np.int64), np.diff(g.indptr))
    cols = g.nbr
    lo, hi = np.minimum(rows, cols), np.maximum(rows, cols)
    order = np.lexsort((rows, g.etype, hi, lo))
    # consecutive pairs in `order` are the two halves of one edge
    mirror = np.empty(len(rows), dtype=np.int64)
    a, b = order[0::2], order[1::2]
    mirror[a] = b
    mirror[b] = a
    return mirror


def prune_targets(degrees: np.ndarray, cfg: PruneConfig) -> np.ndarray:
    """Per-node degree target ``max(min(d^alpha, d_max), d_min)``."""
    d = np.asarray(degrees, dtype=np.float64)
    return np.maximum(np.minimum(d ** cfg.alpha, cfg.d_max), cfg.d_min)


def prune_graph(g: HeteroGraph, cfg: PruneConfig) -> HeteroGraph:
    """Degree-based pruning.

    Each node ``u`` independently retains each of its incident edges with
    probability ``min(target_u / d_u, 1)`` where ``d_u`` is the degree
    before pruning.  An edge is dropped if either endpoint's pass drops it,
    and nodes left without edges are removed.
    """
    if g.num_edges == 0:
        return g
    deg = g.degrees().astype(np.float64)
    p = np.minimum(prune_targets(deg, cfg) / deg, 1.0)
    rows = np.repeat(np.arange(g.num_nodes), np.diff(g.indptr))
    rng = np.random.default_rng(cfg.seed)
    keep_half = rng.random(len(rows)) < p[rows]
    survive = keep_half & keep_half[_mirror(g)]
    half = survive & (rows < g.nbr)
    u, v = rows[half], g.nbr[half]
    used = np.zeros(g.num_nodes, dtype=bool)
    used[u] = used[v] = True
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[used] = np.arange(int(used.sum()))
    refs = [g.node(i) for i in np.flatnonzero(used)]
    return _from_edge_arrays(refs, remap[u], remap[v], g.etype[half].astype(np.int64), g.weight[half], g.schema)


# -- text input -------------------------------------------------------------

def read_edge_tsv(path: str | Path, schema: Schema) -> Iterator[EdgeRecord]:
    """Yield edges from a TSV with columns
    ``src_id src_type dst_id dst_type edge_type weight``."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) not in (5, 6):
                raise ValidationError(f"{path}:{lineno}: expected 6 columns, got {len(cols)}")
            try:
                src = NodeRef(int(cols[0]), schema.node_code(cols[1]))
                dst = NodeRef(int(cols[2]), schema.node_code(cols[3]))
                weight = float(cols[5]) if len(cols) == 6 else 1.0
            except ValueError as exc:
                if isinstance(exc, SchemaError):
                    raise
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            yield EdgeRecord(src, dst, schema.edge_code(cols[4]), weight)


def write_edge_tsv(records: Iterable[EdgeRecord], schema: Schema, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("# src_id\tsrc_type\tdst_id\tdst_type\tedge_type\tweight\n")
        for r in records:
            fh.write(f"{r.src.id}\t{schema.node_name(r.src.type)}\t{r.dst.id}\t"
                     f"{schema.node_name(r.dst.type)}\t{schema.edge_name(r.edge_type)}\t{r.weight!r}\n")


# -- binary snapshot ----------------------------------------------------------
#
# header : magic "OSGR" | version u16 | pad u16 | n_nodes u64 | n_half u64 | schema_len u64
# body   : schema text (utf-8), then each array padded to 8 bytes:
#          node_ids u64[n] | node_types u8[n] | indptr i64[n+1] | nbr i64[h] | etype u8[h] | weight f64[h]
# footer : crc32 u32 of everything before it
_HEADER = struct.Struct("<4sHHQQQ")


def _pad8(n: int) -> int:
    return (-n) % 8


def save_snapshot(g: HeteroGraph, path: str | Path) -> None:
    import zlib

    schema_text = g.schema.canonical().encode() if g.schema is not None else b""
    parts = [_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, 0, g.num_nodes, len(g.nbr), len(schema_text)),
             schema_text, b"\0" * _pad8(len(schema_text))]
    for arr, dt in ((g.node_ids, "<u8"), (g.node_types, "u1"), (g.indptr, "<i8"),
                    (g.nbr, "<i8"), (g.etype, "u1"), (g.weight, "<f8")):
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        parts += [raw, b"\0" * _pad8(len(raw))]
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


def load_snapshot(path: str | Path, use_mmap: bool = True, verify: bool = True) -> HeteroGraph:
    """Open a snapshot; arrays are zero-copy views over a read-only map when ``use_mmap``."""
    import zlib

    with open(path, "rb") as fh:
        if use_mmap:
            buf = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        else:
            buf = fh.read()
    if len(buf) < _HEADER.size + 4:
        raise IntegrityError(f"{path}: truncated snapshot")
    magic, version, _, n, h, slen = _HEADER.unpack_from(buf, 0)
    if magic != SNAPSHOT_MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}")
    if version != SNAPSHOT_VERSION:
        raise IntegrityError(f"{path}: unsupported snapshot version {version}")
    if verify:
        (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
        if zlib.crc32(memoryview(buf)[: len(buf) - 4]) != crc:
            raise IntegrityError(f"{path}: checksum mismatch")
    off = _HEADER.size
    schema = Schema.from_text(bytes(buf[off:off + slen]).decode()) if slen else None
    off += slen + _pad8(slen)
    arrays = []
    for count, dt in ((n, "<u8"), (n, "u1"), (n + 1, "<i8"), (h, "<i8"), (h, "u1"), (h, "<f8")):
        dtype = np.dtype(dt)
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += count * dtype.itemsize
        off += _pad8(count * dtype.itemsize)
        arrays.append(arr)
    if off + 4 != len(buf):
        raise IntegrityError(f"{path}: size mismatch")
    g = HeteroGraph(*arrays, schema=schema)
    if use_mmap:
        g._mmap = buf
    return g
