"""Batch inference into an embedding table, and recall@k evaluation.

Embedding file layout (little-endian)::

    magic "OSEM" | d u32 | count u64
    count x (node_id u64, node_type u8, d x f32)

Creation metadata goes to a ``<file>.meta.json`` sidecar.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IntegrityError, NotFoundError, ValidationError
from .schema import NodeRef, Schema

EMB_MAGIC = b"OSEM"
_EMB_HEADER = struct.Struct("<4sIQ")


def _record_dtype(d: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("type", "u1"), ("vec", "<f4", (d,))])


@dataclass
class EmbeddingTable:
    refs: list[NodeRef]
    vectors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32).reshape(len(self.refs), -1)
        self._index = {r: i for i, r in enumerate(self.refs)}
        if len(self._index) != len(self.refs):
            raise ValidationError("embedding table has duplicate node references")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.refs)

    def __contains__(self, ref) -> bool:
        return NodeRef(*ref) in self._index

    def lookup(self, refs: Sequence[NodeRef]) -> np.ndarray:
        missing = [tuple(r) for r in refs if NodeRef(*r) not in self._index]
        if missing:
            shown = ", ".join(f"({i}, {t})" for i, t in missing[:10])
            more = f" and {len(missing) - 10} more" if len(missing) > 10 else ""
            raise NotFoundError(f"{len(missing)} node(s) missing from embedding table: {shown}{more}")
        return self.vectors[[self._index[NodeRef(*r)] for r in refs]]

    def check_unit(self, tol: float = 1e-5) -> None:
        if len(self.refs):
            err = np.abs(np.linalg.norm(self.vectors.astype(np.float64), axis=1) - 1.0).max()
            if err > tol:
                raise ValidationError(f"embedding rows deviate from unit norm by {err:.3g}")

    # -- files -----------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        rec = np.zeros(len(self.refs), dtype=_record_dtype(self.dim))
        if len(self.refs):
            rec["id"] = [r.id for r in self.refs]
            rec["type"] = [r.type for r in self.refs]
            rec["vec"] = self.vectors
        path.write_bytes(_EMB_HEADER.pack(EMB_MAGIC, self.dim, len(self.refs)) + rec.tobytes())
        Path(str(path) + ".meta.json").write_text(json.dumps(self.meta, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        buf = Path(path).read_bytes()
        if len(buf) < _EMB_HEADER.size:
            raise IntegrityError(f"{path}: truncated embedding file")
        magic, d, count = _EMB_HEADER.unpack_from(buf, 0)
        if magic != EMB_MAGIC:
            raise IntegrityError(f"{path}: not an OSEM file")
        dt = _record_dtype(d)
        if len(buf) != _EMB_HEADER.size + count * dt.itemsize:
            raise IntegrityError(f"{path}: size does not match header")
        rec = np.frombuffer(buf, dtype=dt, count=count, offset=_EMB_HEADER.size)
        refs = [NodeRef(int(i), int(t)) for i, t in zip(rec["id"], rec["type"])]
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(refs, np.array(rec["vec"]), meta)

    def write_tsv(self, path: str | Path) -> None:
        """Debug text form: ``id <TAB> type <TAB> comma-separated values``."""
        with open(path, "w") as fh:
            for r, v in zip(self.refs, self.vectors):
                fh.write(f"{r.id}\t{r.type}\t{','.join(repr(float(x)) for x in v)}\n")


def batch_infer(graph, store, model, sampling, nodes: Sequence[NodeRef] | None = None,
                batch_size: int = 512, workers: int = 1, meta: dict | None = None) -> EmbeddingTable:
    """Embed ``nodes`` (default: every graph node) with neighborhoods sampled from ``graph``.

    Nodes outside the graph get an empty neighborhood; nodes without stored
    features get zero features, counted in ``meta["missing_features"]``.
    Shards of ``batch_size`` nodes are independent, so ``workers > 1``
    gives the same table as a serial run.
    """
    from .featurize import build_bank
    from .sampler import Neighborhood, sample_all

    nodes = list(graph.nodes()) if nodes is None else [NodeRef(int(n[0]), int(n[1])) for n in nodes]
    in_graph = [n for n in nodes if n in graph]
    neighborhoods = sample_all(graph, sampling, sorted(set(in_graph), key=NodeRef.sort_key))
    for n in nodes:
        neighborhoods.setdefault(n, Neighborhood(n, []))
    bank, table = build_bank(model.schema, store, neighborhoods, model.cfg.num_slots, extra=nodes)
    rows = np.array([bank.index[n] for n in nodes], dtype=np.int64)
    shards = [rows[lo:lo + batch_size] for lo in range(0, len(rows), batch_size)]

    def run(shard):
        return model.forward(grad=False).embed(bank, table, shard).value

    if workers > 1 and len(shards) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, shards))
    else:
        parts = [run(s) for s in shards]
    vecs = np.concatenate(parts) if parts else np.zeros((0, model.cfg.dim), np.float32)
    info = dict(meta or {})
    info["missing_features"] = int(sum(bank.missing[r] for r in rows.tolist()))
    info["cold_nodes"] = int(len(nodes) - len(in_graph))
    return EmbeddingTable(nodes, vecs, info)


# -- recall ------------------------------------------------------------------

def recall_at_k(Q: np.ndarray, P: np.ndarray, N: np.ndarray, k: int, chunk: int = 1024) -> float:
    """Fraction of rows with fewer than ``k`` shared negatives scoring ``>=`` the positive.

    A negative tied with the positive counts against the row.  Positive
    and negative scores for a row come out of the same matrix product.
    """
    Q = np.asarray(Q, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    N = np.asarray(N, dtype=np.float64).reshape(-1, Q.shape[1] if Q.ndim == 2 else 0)
    if k < 1:
        raise ValidationError("k must be >= 1")
    if Q.shape != P.shape or len(Q) == 0:
        raise ValidationError("need matching, nonempty query and positive matrices")
    hits = 0
    for lo in range(0, len(Q), chunk):
        q, p = Q[lo:lo + chunk], P[lo:lo + chunk]
        s = q @ np.vstack([N, p]).T
        pos = s[np.arange(len(q)), len(N) + np.arange(len(q))]
        beat = (s[:, :len(N)] >= pos[:, None]).sum(axis=1)
        hits += int((beat < k).sum())
    return hits / len(Q)


@dataclass
class EvalSet:
    queries: list[NodeRef]
    positives: list[NodeRef]
    # one negative list per row
    negatives: list[list[NodeRef]]

    def __post_init__(self):
        if not (len(self.queries) == len(self.positives) == len(self.negatives)):
            raise ValidationError("eval set columns differ in length")
        for i, (p, negs) in enumerate(zip(self.positives, self.negatives)):
            if p in negs:
                raise ValidationError(f"eval row {i}: positive {tuple(p)} is also listed as a negative")

    def __len__(self) -> int:
        return len(self.queries)

    def refs(self) -> list[NodeRef]:
        seen = dict.fromkeys(self.queries)
        seen.update(dict.fromkeys(self.positives))
        for negs in self.negatives:
            seen.update(dict.fromkeys(negs))
        return list(seen)


def evaluate_recall(table: EmbeddingTable, ev: EvalSet, k: int) -> float:
    """recall@k of ``ev`` scored with ``table``; unresolvable refs raise :class:`NotFoundError`."""
    table.lookup(ev.refs())
    if len(ev) == 0:
        raise ValidationError("eval set is empty")
    if all(n == ev.negatives[0] for n in ev.negatives):
        return recall_at_k(table.lookup(ev.queries), table.lookup(ev.positives), table.lookup(ev.negatives[0]), k)
    hits = 0
    for q, p, negs in zip(ev.queries, ev.positives, ev.negatives):
        hits += recall_at_k(table.lookup([q]), table.lookup([p]), table.lookup(negs), k) > 0
    return hits / len(ev)


def _node_type(tok: str, schema: Schema | None) -> int:
    if tok.isdigit():
        return int(tok)
    if schema is None:
        raise ValidationError(f"node type {tok!r} given by name but no schema supplied")
    return schema.node_code(tok)


def read_eval_tsv(path: str | Path, schema: Schema | None = None) -> EvalSet:
    """Rows ``query_id, query_type, pos_id, pos_type, neg_id...``; negatives share the positive's type."""
    qs, ps, ns = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.rstrip("\n").split("\t")
        if len(cols) < 4:
            raise ValidationError(f"{path}:{lineno}: expected at least 4 tab-separated columns")
        try:
            q = NodeRef(int(cols[0]), _node_type(cols[1], schema))
            p = NodeRef(int(cols[2]), _node_type(cols[3], schema))
            negs = [NodeRef(int(x), p.type) for x in cols[4:] if x]
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: malformed id") from None
        qs.append(q)
        ps.append(p)
        ns.append(negs)
    return EvalSet(qs, ps, ns)


def write_eval_tsv(ev: EvalSet, path: str | Path) -> None:
    with open(path, "w") as fh:
        for q, p, negs in zip(ev.queries, ev.positives, ev.negatives):
            fh.write("\t".join([str(q.id), str(q.type), str(p.id), str(p.type), *(str(n.id) for n in negs)]) + "\n")
