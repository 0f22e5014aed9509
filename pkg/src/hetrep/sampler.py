"""Heterogeneous neighborhood sampling with approximate random walk with restart.

For each relation subset ``R`` the graph is restricted to edges whose type
is in ``R``; forward push estimates visit probabilities of a walk that
restarts at the source; each node type keeps its own top-k; the final
neighborhood is the union over subsets, ordered by descending score.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError
from .graph import HeteroGraph
from .schema import NodeRef, Schema


@dataclass(frozen=True)
class RelationSubset:
    relations: frozenset[int]
    quotas: Mapping[int, int]

    def __post_init__(self):
        if not self.relations:
            raise ValidationError("relation subset must be nonempty")
        if any(k <= 0 for k in self.quotas.values()):
            raise ValidationError(f"quotas must be positive, got {dict(self.quotas)}")


@dataclass(frozen=True)
class SamplingConfig:
    subsets: tuple[RelationSubset, ...]
    budget: int = 10000
    restart_prob: float = 0.5

    def __post_init__(self):
        if self.budget < 1:
            raise ValidationError("budget must be >= 1")
        if not 0.0 < self.restart_prob < 1.0:
            raise ValidationError("restart_prob must lie in (0, 1)")

    @property
    def delta(self) -> float:
        return 1.0 / self.budget

    @property
    def max_neighbors(self) -> int:
        return sum(sum(s.quotas.values()) for s in self.subsets)

    @classmethod
    def parse(cls, text: str, schema: Schema, budget: int = 10000, restart_prob: float = 0.5) -> "SamplingConfig":
        """Parse ``"PB:Pin=25,Board=75;PP:Pin=50"``; relations inside a subset are joined by ``+``."""
        subsets = []
        for chunk in filter(None, (c.strip() for c in text.split(";"))):
            try:
                rels, quotas = chunk.split(":")
                rel_codes = frozenset(schema.edge_code(r.strip()) for r in rels.split("+"))
                q = {}
                for item in quotas.split(","):
                    name, k = item.split("=")
                    q[schema.node_code(name.strip())] = int(k)
            except ValueError as exc:
                if isinstance(exc, ValidationError):
                    raise
                raise ValidationError(f"cannot parse sampler subset {chunk!r}") from None
            subsets.append(RelationSubset(rel_codes, q))
        if not subsets:
            raise ValidationError("sampler needs at least one relation subset")
        return cls(tuple(subsets), budget, restart_prob)

    def format(self, schema: Schema) -> str:
        parts = []
        for s in self.subsets:
            rels = "+".join(schema.edge_name(r) for r in sorted(s.relations))
            q = ",".join(f"{schema.node_name(t)}={k}" for t, k in s.quotas.items())
            parts.append(f"{rels}:{q}")
        return ";".join(parts)


@dataclass(frozen=True)
class ScoredNeighbor:
    node: NodeRef
    score: float


@dataclass
class Neighborhood:
    source: NodeRef
    neighbors: list[ScoredNeighbor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.neighbors)

    def nodes(self) -> list[NodeRef]:
        return [n.node for n in self.neighbors]


def _order_key(ref: NodeRef, score: float):
    return (-score, ref.type, ref.id)


def forward_push(g: HeteroGraph, relation_set, source: NodeRef, restart_prob: float = 0.5,
                 budget: int = 10000) -> dict[NodeRef, float]:
    """Local push approximation of random walk with restart from ``source``.

    Maintains estimates ``p`` and residuals ``r`` (``r[source] = 1``).  A node
    whose residual exceeds ``deg(v) / budget`` keeps ``restart_prob`` of it and
    spreads the rest to its neighbors in proportion to edge weight.  The
    result never exceeds the exact visit probabilities.
    """
    s = g.find(source)
    if s < 0:
        return {}
    idx, p = _push(g, relation_set, s, restart_prob, budget)
    return {g.node(i): v for i, v in zip(idx, p)}


def _push_rows(g: HeteroGraph, relation_set):
    """Induced adjacency as Python lists: (indptr, neighbors, transition probs, degree).

    Built once per graph and relation set; rows whose weights sum to zero
    walk uniformly.
    """
    key = frozenset(int(r) for r in relation_set)
    cache = g.__dict__.setdefault("_push_rows", {})
    rows = cache.get(key)
    if rows is None:
        indptr, nbr, weight = g.induced(key)
        deg = np.diff(indptr)
        src = np.repeat(np.arange(g.num_nodes), deg)
        strength = np.bincount(src, weights=weight, minlength=g.num_nodes)
        safe = np.where(strength > 0, strength, 1.0)
        prob = np.where(strength[src] > 0, weight / safe[src], 1.0 / np.maximum(deg[src], 1))
        rows = cache[key] = (indptr.tolist(), nbr.tolist(), prob.tolist(), deg.astype(float).tolist())
    return rows


def _push(g: HeteroGraph, relation_set, s: int, c: float, budget: int) -> tuple[list[int], list[float]]:
    indptr, nbr, prob, deg = _push_rows(g, relation_set)
    if deg[s] == 0:
        return [s], [1.0]
    delta = 1.0 / budget
    p: dict[int, float] = {}
    r: dict[int, float] = {s: 1.0}
    queue = deque([s])
    queued = {s}
    while queue:
        u = queue.popleft()
        queued.discard(u)
        ru = r[u]
        if ru <= delta * deg[u]:
            continue
        r[u] = 0.0
        p[u] = p.get(u, 0.0) + c * ru
        spread = (1.0 - c) * ru
        lo, hi = indptr[u], indptr[u + 1]
        for v, pv in zip(nbr[lo:hi], prob[lo:hi]):
            rv = r.get(v, 0.0) + spread * pv
            r[v] = rv
            if v not in queued and rv > delta * deg[v]:
                queue.append(v)
                queued.add(v)
    keys = sorted(p)
    return keys, [p[k] for k in keys]


def exact_rwr(g: HeteroGraph, relation_set, source: NodeRef, restart_prob: float = 0.5,
              tol: float = 1e-12) -> dict[NodeRef, float]:
    """Power iteration of ``pi = c e_s + (1 - c) W^T pi`` on the induced subgraph.

    ``W`` is the weight-normalized transition matrix.  Only nodes reachable
    from the source get mass; the returned map lists those with nonzero score.
    """
    import scipy.sparse as sp

    s = g.find(source)
    if s < 0:
        return {}
    indptr, nbr, weight = g.induced(relation_set)
    if indptr[s + 1] == indptr[s]:
        return {source: 1.0}
    n = g.num_nodes
    deg = np.diff(indptr)
    rows = np.repeat(np.arange(n), deg)
    strength = np.bincount(rows, weights=weight, minlength=n)
    # rows whose weights sum to zero walk uniformly, as in the push
    trans = np.where(strength[rows] > 0, weight / np.where(strength > 0, strength, 1.0)[rows], 1.0 / deg[rows])
    # column-oriented: (W^T x)[v] = sum_u W[u, v] x[u]
    wt = sp.csr_matrix((trans, (nbr, rows)), shape=(n, n))
    e = np.zeros(n)
    e[s] = 1.0
    pi = e.copy()
    c = restart_prob
    for _ in range(100000):
        nxt = c * e + (1.0 - c) * (wt @ pi)
        diff = np.abs(nxt - pi).sum()
        pi = nxt
        if diff < tol:
            break
    nz = np.flatnonzero(pi)
    return {g.node(i): float(pi[i]) for i in nz}


def top_k_by_type(scores: Mapping[NodeRef, float], quotas: Mapping[int, int],
                  exclude: NodeRef | None = None) -> list[ScoredNeighbor]:
    """Keep the ``quotas[t]`` best-scoring nodes of each type ``t``.

    Types without a quota are dropped.  Ties are broken by ``(type, id)``
    ascending; the result is ordered by score descending.
    """
    by_type: dict[int, list[tuple[NodeRef, float]]] = {}
    for ref, score in scores.items():
        if ref == exclude or quotas.get(ref.type, 0) <= 0:
            continue
        by_type.setdefault(ref.type, []).append((ref, score))
    out = []
    for t, items in by_type.items():
        items.sort(key=lambda kv: _order_key(kv[0], kv[1]))
        out.extend(items[: quotas[t]])
    out.sort(key=lambda kv: _order_key(kv[0], kv[1]))
    return [ScoredNeighbor(r, s) for r, s in out]


def union_neighbors(parts: Sequence[Sequence[ScoredNeighbor]]) -> list[ScoredNeighbor]:
    best: dict[NodeRef, float] = {}
    for part in parts:
        for sn in part:
            if sn.score > best.get(sn.node, -np.inf):
                best[sn.node] = sn.score
    items = sorted(best.items(), key=lambda kv: _order_key(kv[0], kv[1]))
    return [ScoredNeighbor(r, s) for r, s in items]


def sample_neighborhood(g: HeteroGraph, u: NodeRef, cfg: SamplingConfig) -> Neighborhood:
    """Union over relation subsets of per-type top-k forward-push neighbors."""
    if g.find(u) < 0:
        return Neighborhood(u, [])
    parts = []
    for subset in cfg.subsets:
        scores = forward_push(g, subset.relations, u, cfg.restart_prob, cfg.budget)
        parts.append(top_k_by_type(scores, subset.quotas, exclude=u))
    return Neighborhood(u, union_neighbors(parts))


def sample_all(g: HeteroGraph, cfg: SamplingConfig, nodes: Sequence[NodeRef] | None = None) -> dict[NodeRef, Neighborhood]:
    nodes = g.nodes() if nodes is None else nodes
    return {u: sample_neighborhood(g, u, cfg) for u in nodes}
