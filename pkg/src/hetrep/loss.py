"""Sampled softmax with log-frequency correction, at the embedding level.

Every function here takes embedding matrices and returns the loss together
with its gradients with respect to those matrices; gradients are then
pushed through the model separately.

Score of a query ``q`` against a candidate ``v``::

    s(q, v) = lam * q.v - logQ(v)

Per-row loss is ``-log softmax`` of the positive over ``[positive] + negatives``.
Negatives are shared across rows; a negative whose id equals the row's
positive id (or query id, when given) is masked out for that row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericError, ValidationError


@dataclass(frozen=True)
class ScoreParams:
    lam: float = 20.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError(f"temperature must be positive, got {self.lam}")


@dataclass
class LossBatch:
    Q: np.ndarray
    P: np.ndarray
    N: np.ndarray
    logq_pos: np.ndarray
    logq_neg: np.ndarray
    pos_ids: np.ndarray | None = None
    neg_ids: np.ndarray | None = None
    query_ids: np.ndarray | None = None
    row_weights: np.ndarray | None = None
    # optional b x k boolean matrix; False removes that negative from that row
    allowed: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.P = np.asarray(self.P, dtype=np.float64)
        d = self.Q.shape[1] if self.Q.ndim == 2 else 0
        self.N = np.asarray(self.N, dtype=np.float64).reshape(-1, d)
        self.logq_pos = np.asarray(self.logq_pos, dtype=np.float64).reshape(-1)
        self.logq_neg = np.asarray(self.logq_neg, dtype=np.float64).reshape(-1)
        b, k = len(self.Q), len(self.N)
        if self.Q.ndim != 2 or self.P.shape != self.Q.shape:
            raise ValidationError(f"Q and P must be matching b x d matrices, got {self.Q.shape}, {self.P.shape}")
        if b < 1:
            raise ValidationError("batch needs at least one row")
        if self.logq_pos.shape != (b,) or self.logq_neg.shape != (k,):
            raise ValidationError("logQ vectors must match row and negative counts")
        if self.row_weights is not None:
            self.row_weights = np.asarray(self.row_weights, dtype=np.float64).reshape(-1)
            if self.row_weights.shape != (b,) or (self.row_weights < 0).any():
                raise ValidationError("row weights must be b nonnegative values")
        if self.allowed is not None:
            self.allowed = np.asarray(self.allowed, dtype=bool)
            if self.allowed.shape != (b, k):
                raise ValidationError(f"allowed mask must be {b} x {k}, got {self.allowed.shape}")

    @property
    def b(self) -> int:
        return len(self.Q)

    @property
    def k(self) -> int:
        return len(self.N)

    def weights(self) -> np.ndarray:
        return self.row_weights if self.row_weights is not None else np.full(self.b, 1.0 / self.b)

    def check_finite(self) -> None:
        for name in ("Q", "P", "N", "logq_pos", "logq_neg"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericError(f"non-finite values in {name}")

    def check_unit_rows(self, tol: float = 1e-5) -> None:
        for name in ("Q", "P", "N"):
            m = getattr(self, name)
            if len(m) and np.abs(np.linalg.norm(m, axis=1) - 1.0).max() > tol:
                raise ValidationError(f"rows of {name} are not unit length")


def corrected_score(q, v, logq: float, params: ScoreParams) -> float:
    return params.lam * float(np.dot(q, v)) - logq


def _allowed(batch: LossBatch, rows: slice) -> np.ndarray | None:
    if batch.neg_ids is None:
        return None if batch.allowed is None else batch.allowed[rows]
    neg = np.asarray(batch.neg_ids)[None, :]
    mask = np.ones((rows.stop - rows.start, batch.k), dtype=bool)
    if batch.allowed is not None:
        mask &= batch.allowed[rows]
    if batch.pos_ids is not None:
        mask &= neg != np.asarray(batch.pos_ids)[rows, None]
    if batch.query_ids is not None:
        mask &= neg != np.asarray(batch.query_ids)[rows, None]
    return mask


def _kernel(batch: LossBatch, rows: slice, w: np.ndarray, lam: float, telemetry: dict | None):
    """Weighted loss and gradients for ``rows``; ``dN`` is this slice's contribution."""
    Q, P = batch.Q[rows], batch.P[rows]
    N = batch.N
    pos = lam * np.einsum("ij,ij->i", Q, P) - batch.logq_pos[rows]
    neg = lam * (Q @ N.T) - batch.logq_neg[None, :]
    if telemetry is not None:
        telemetry["peak_logits"] = max(telemetry.get("peak_logits", 0), neg.size)
        telemetry["chunks"] = telemetry.get("chunks", 0) + 1
    allowed = _allowed(batch, rows)
    if allowed is not None:
        neg = np.where(allowed, neg, -np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        if neg.shape[1]:
            m = neg.max(axis=1)
            m = np.where(np.isfinite(m), m, 0.0)
            e = np.exp(neg - m[:, None])
            lse = m + np.log(e.sum(axis=1))
        else:
            e = neg
            lse = np.full(len(pos), -np.inf)
        gap = lse - pos
        loss_rows = np.logaddexp(0.0, gap)
        # share of the softmax mass on the negatives: sigmoid(gap)
        neg_share = np.exp(gap - loss_rows)
        if neg.shape[1]:
            a_neg = np.where(np.isfinite(lse)[:, None], np.exp(neg - lse[:, None]), 0.0) * neg_share[:, None]
        else:
            a_neg = np.zeros_like(neg)
    g_pos = -w * neg_share
    g_neg = w[:, None] * a_neg
    dQ = lam * (g_pos[:, None] * P + g_neg @ N)
    dP = lam * g_pos[:, None] * Q
    dN = lam * (g_neg.T @ Q)
    return float(w @ loss_rows), dQ, dP, dN


def sampled_softmax_loss(batch: LossBatch, params: ScoreParams, telemetry: dict | None = None):
    """Reference (unchunked) loss: weighted mean of per-row losses, plus exact gradients.

    Returns ``(loss, dQ, dP, dN)``.
    """
    batch.check_finite()
    return _kernel(batch, slice(0, batch.b), batch.weights(), params.lam, telemetry)


def chunked_softmax_backward(batch: LossBatch, params: ScoreParams, chunk_size: int,
                             telemetry: dict | None = None):
    """Same result as :func:`sampled_softmax_loss`, computed ``chunk_size`` rows at a time.

    Only a ``chunk_size x k`` logit block exists at any moment.  Each row keeps
    its global weight (``1/b`` by default), so a short final chunk is weighted
    by its row count rather than counted as a full chunk.
    """
    if chunk_size < 1:
        raise ValidationError("chunk size must be >= 1")
    batch.check_finite()
    w = batch.weights()
    dQ = np.empty_like(batch.Q)
    dP = np.empty_like(batch.P)
    dN = np.zeros_like(batch.N)
    loss = 0.0
    for start in range(0, batch.b, chunk_size):
        rows = slice(start, min(start + chunk_size, batch.b))
        l, dq, dp, dn = _kernel(batch, rows, w[rows], params.lam, telemetry)
        loss += l
        dQ[rows] = dq
        dP[rows] = dp
        dN += dn
    return loss, dQ, dP, dN


def softmax_loss(batch: LossBatch, params: ScoreParams, chunk_size: int | None = None,
                 telemetry: dict | None = None):
    if chunk_size is None or chunk_size >= batch.b:
        return sampled_softmax_loss(batch, params, telemetry)
    return chunked_softmax_backward(batch, params, chunk_size, telemetry)


# -- task losses -------------------------------------------------------------

@dataclass
class PairSource:
    dataset_id: str
    weight: float
    batches: Sequence[LossBatch]


def pair_loss(sources: Sequence[PairSource], params: ScoreParams, chunk_size: int | None = None):
    """``sum_i w_i * mean_batches(loss)``; returns ``(loss, grads)`` with
    ``grads[i][j] = (dQ, dP, dN)`` already scaled by ``w_i / len(batches_i)``."""
    total, grads = 0.0, []
    for src in sources:
        if src.weight < 0:
            raise ValidationError(f"source {src.dataset_id!r} has negative weight")
        per = []
        if not src.batches:
            grads.append(per)
            continue
        scale = src.weight / len(src.batches)
        for batch in src.batches:
            l, dq, dp, dn = softmax_loss(batch, params, chunk_size)
            total += scale * l
            per.append((scale * dq, scale * dp, scale * dn))
        grads.append(per)
    return total, grads


def feature_loss(node_batches: Mapping[str, LossBatch], params: ScoreParams, chunk_size: int | None = None):
    """Entity-feature loss.

    ``node_batches[x]`` holds, for feature type ``x``, query rows ``g_x(u)``,
    positives ``f(u)`` and shared negatives; ``query_ids`` identify ``u``.
    Each node contributes the mean over its feature types, and nodes are
    averaged.  Returns ``(loss, {x: (dQ, dP, dN)})``.
    """
    counts: dict[int, int] = {}
    for x, batch in node_batches.items():
        if batch.query_ids is None:
            raise ValidationError(f"feature batch {x!r} needs query_ids")
        for q in np.asarray(batch.query_ids).tolist():
            counts[q] = counts.get(q, 0) + 1
    if not counts:
        return 0.0, {}
    n_nodes = len(counts)
    total, grads = 0.0, {}
    for x, batch in node_batches.items():
        ids = np.asarray(batch.query_ids).tolist()
        w = np.array([1.0 / (n_nodes * counts[q]) for q in ids])
        weighted = LossBatch(batch.Q, batch.P, batch.N, batch.logq_pos, batch.logq_neg,
                             batch.pos_ids, batch.neg_ids, batch.query_ids, w, batch.allowed)
        l, dq, dp, dn = softmax_loss(weighted, params, chunk_size)
        total += l
        grads[x] = (dq, dp, dn)
    return total, grads


@dataclass
class SequenceGrads:
    dU: np.ndarray
    dP: np.ndarray
    dN: np.ndarray
    terms: int = 0
    extra: dict = field(default_factory=dict)


def next_action_loss(U, Pseq, mask, N, logq_seq, logq_neg, params: ScoreParams,
                     seq_ids=None, neg_ids=None, chunk_size: int | None = None):
    """Each valid step's user embedding ``U[b, t]`` predicts ``Pseq[b, t + 1]``.

    ``mask[b, t]`` marks real (non-padding) positions.  The loss is the mean
    over all valid ``(b, t)`` terms; returns ``(loss, SequenceGrads)``.
    """
    U = np.asarray(U, dtype=np.float64)
    Pseq = np.asarray(Pseq, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    B, T, d = U.shape
    N = np.asarray(N, dtype=np.float64).reshape(-1, d)
    grads = SequenceGrads(np.zeros_like(U), np.zeros_like(Pseq), np.zeros_like(N))
    if T < 2:
        return 0.0, grads
    valid = mask[:, :-1] & mask[:, 1:]
    bs, ts = np.nonzero(valid)
    if len(bs) == 0:
        return 0.0, grads
    logq_seq = np.asarray(logq_seq, dtype=np.float64)
    pos_ids = None if seq_ids is None else np.asarray(seq_ids)[bs, ts + 1]
    batch = LossBatch(U[bs, ts], Pseq[bs, ts + 1], N, logq_seq[bs, ts + 1], logq_neg,
                      pos_ids=pos_ids, neg_ids=neg_ids)
    loss, dq, dp, dn = softmax_loss(batch, params, chunk_size)
    grads.dU[bs, ts] = dq
    grads.dP[bs, ts + 1] = dp
    grads.dN = dn
    grads.terms = len(bs)
    return loss, grads


def future_action_loss(U, mask, future, N, logq_future, logq_neg, params: ScoreParams,
                       future_ids=None, neg_ids=None, chunk_size: int | None = None):
    """Every valid ``U[b, t]`` is contrasted against the same future positive ``future[b]``.

    Sequences whose future row is NaN-free but fully masked contribute
    nothing.  Mean over valid terms; ``SequenceGrads.dP`` is the gradient for
    ``future`` (shape ``B x d``).
    """
    U = np.asarray(U, dtype=np.float64)
    future = np.asarray(future, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    B, T, d = U.shape
    N = np.asarray(N, dtype=np.float64).reshape(-1, d)
    grads = SequenceGrads(np.zeros_like(U), np.zeros_like(future), np.zeros_like(N))
    bs, ts = np.nonzero(mask)
    if len(bs) == 0:
        return 0.0, grads
    logq_future = np.asarray(logq_future, dtype=np.float64)
    pos_ids = None if future_ids is None else np.asarray(future_ids)[bs]
    batch = LossBatch(U[bs, ts], future[bs], N, logq_future[bs], logq_neg,
                      pos_ids=pos_ids, neg_ids=neg_ids)
    loss, dq, dp, dn = softmax_loss(batch, params, chunk_size)
    grads.dU[bs, ts] = dq
    np.add.at(grads.dP, bs, dp)
    grads.dN = dn
    grads.terms = len(bs)
    return loss, grads


@dataclass(frozen=True)
class TaskWeights:
    pair: float = 1.0
    feat: float = 1.0
    seq: float = 1.0
    source_weights: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        vals = [self.pair, self.feat, self.seq, *self.source_weights.values()]
        if any(v < 0 for v in vals):
            raise ValidationError("task weights must be nonnegative")
        if not any(v > 0 for v in (self.pair, self.feat, self.seq)):
            raise ValidationError("at least one task weight must be positive")

    def source_weight(self, dataset_id: str) -> float:
        return self.source_weights.get(dataset_id, 1.0)


def total_loss(components: Mapping[str, float], weights: TaskWeights) -> float:
    """``pair*L_pair + feat*L_feat + seq*(L_next + L_fut)``; missing components count as 0."""
    c = {k: components.get(k, 0.0) for k in ("pair", "feat", "next", "fut")}
    return weights.pair * c["pair"] + weights.feat * c["feat"] + weights.seq * (c["next"] + c["fut"])
