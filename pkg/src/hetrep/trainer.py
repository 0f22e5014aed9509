"""Multi-task training: pair, feature and user-sequence contrastive losses.

One optimizer step draws a batch for every task with positive weight, embeds
all nodes it touches in a single forward pass, evaluates the losses on the
embeddings, and pushes the combined embedding gradients back through the
model once.  Batch contents depend only on ``(seed, step)``, so a resumed
run replays exactly the batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autograd import scatter_add_rows
from .checkpoint import load_archive, save_archive
from .errors import NumericError, ValidationError
from .featurize import FeatureBank, NeighborTable, build_bank
from .graph import HeteroGraph
from .infer import recall_at_k
from .loss import (LossBatch, PairSource, ScoreParams, TaskWeights, feature_loss, future_action_loss,
                   next_action_loss, pair_loss, total_loss)
from .model import Model, ModelConfig
from .optim import AdamW, warmup_cosine
from .sampler import Neighborhood, SamplingConfig, sample_all
from .schema import TEXT, NodeRef, Schema
from .sketch import CountMinSketch

TASKS = ("pair", "feat", "seq")


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    seq_batch_size: int = 16
    random_negatives: int = 256
    in_batch: bool = True
    lr: float = 0.005
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    chunk_size: int = 64
    lam: float = 20.0
    weights: TaskWeights = field(default_factory=TaskWeights)
    t_max: int = 8
    future_window: int = 4
    eval_every: int = 0
    eval_negatives: int = 10000
    eval_pairs: int = 500
    eval_user_frac: float = 0.2
    pair_types: str = "Pin:Pin,Board:Pin"
    prefetch: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.seq_batch_size < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.future_window < 1 or self.t_max < 1:
            raise ValidationError("t_max and future_window must be >= 1")
        if self.random_negatives < 0 or self.steps < 0 or self.eval_negatives < 0:
            raise ValidationError("steps and negative counts must be >= 0")
        if self.chunk_size < 1:
            raise ValidationError("chunk size must be >= 1")
        if not 0.0 <= self.eval_user_frac < 1.0:
            raise ValidationError("eval_user_frac must be in [0, 1)")

    @classmethod
    def from_run_config(cls, cfg) -> "TrainConfig":
        t = cfg.section("train")
        sources = parse_source_weights(cfg["loss.source_weights"])
        weights = TaskWeights(cfg["loss.pair_weight"], cfg["loss.feat_weight"], cfg["loss.seq_weight"], sources)
        keys = {k for k in cls.__dataclass_fields__ if k not in ("weights", "lam", "chunk_size")}
        return cls(weights=weights, lam=cfg["loss.lambda"], chunk_size=cfg["loss.chunk_size"],
                   **{k: v for k, v in t.items() if k in keys})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = {"pair": self.weights.pair, "feat": self.weights.feat, "seq": self.weights.seq,
                        "source_weights": dict(self.weights.source_weights)}
        return d


def parse_source_weights(text: str) -> dict[str, float]:
    """``"id=w,id2=w2"`` into a dict."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"source weight {item!r} is not 'id=weight'")
        out[key.strip()] = float(value)
    return out


def parse_pair_types(text: str, schema: Schema) -> list[tuple[int, int]]:
    out = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        q, sep, p = item.partition(":")
        if not sep:
            raise ValidationError(f"pair type {item!r} is not 'QueryType:PositiveType'")
        out.append((schema.node_code(q.strip()), schema.node_code(p.strip())))
    return out


# -- datasets ----------------------------------------------------------------

@dataclass
class PairDataset:
    dataset_id: str
    queries: list[NodeRef]
    positives: list[NodeRef]

    def __len__(self) -> int:
        return len(self.queries)


@dataclass
class EngagementPair:
    query: NodeRef
    positive: NodeRef
    dataset_id: str


def read_engagement_tsv(path: str | Path, schema: Schema) -> list[EngagementPair]:
    """``query_id, query_type, pos_id, pos_type, dataset_id`` per line; types by name or code."""
    def node_type(tok: str) -> int:
        if tok.isdigit():
            t = int(tok)
            schema.check_node_type(t)
            return t
        return schema.node_code(tok)

    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            raise ValidationError(f"{path}:{lineno}: expected 5 tab-separated columns, got {len(cols)}")
        try:
            q = NodeRef(int(cols[0]), node_type(cols[1]))
            p = NodeRef(int(cols[2]), node_type(cols[3]))
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: malformed node reference") from None
        out.append(EngagementPair(q, p, cols[4].strip()))
    return out


def build_pair_dataset(graph: HeteroGraph, neighborhoods: Mapping[NodeRef, Neighborhood],
                       pair_types: Sequence[tuple[int, int]], engagement: Iterable[EngagementPair] = (),
                       exclude: set[tuple[NodeRef, NodeRef]] = frozenset()) -> list[PairDataset]:
    """Graph pairs ``(u, v)`` with ``v`` in ``N(u)``, plus logged engagement pairs per dataset id.

    The graph source is named ``"graph"``.  Nodes with an empty neighborhood
    contribute nothing; pairs listed in ``exclude`` are left out.
    """
    allowed: dict[int, set[int]] = {}
    for q, p in pair_types:
        allowed.setdefault(q, set()).add(p)
    qs, ps = [], []
    for u in sorted(neighborhoods, key=NodeRef.sort_key):
        if u.type not in allowed or u not in graph:
            continue
        for sn in neighborhoods[u].neighbors:
            v = sn.node
            if v.type in allowed[u.type] and v != u and (u, v) not in exclude:
                qs.append(u)
                ps.append(v)
    out = [PairDataset("graph", qs, ps)]
    by_id: dict[str, PairDataset] = {}
    for e in engagement:
        ds = by_id.setdefault(e.dataset_id, PairDataset(e.dataset_id, [], []))
        ds.queries.append(e.query)
        ds.positives.append(e.positive)
    out.extend(by_id[k] for k in sorted(by_id))
    return out


@dataclass
class SequenceSplit:
    """Input windows (``t_max`` bank rows, padded) and future windows per user."""

    user_ids: np.ndarray
    inputs: np.ndarray
    mask: np.ndarray
    future: np.ndarray
    future_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.user_ids)


def split_sequences(sequences, bank: FeatureBank, t_max: int, window: int, pin_type: int = 0) -> SequenceSplit:
    """First ``t_max`` actions are inputs, the next ``window`` are the future; users with no future are dropped."""
    users, inputs, mask, future, fmask = [], [], [], [], []
    for s in sequences:
        rows = [bank.index[NodeRef(int(p), pin_type)] for p in s.pins]
        head, tail = rows[:t_max], rows[t_max:t_max + window]
        if not tail or not head:
            continue
        users.append(s.user_id)
        inputs.append(head + [0] * (t_max - len(head)))
        mask.append([True] * len(head) + [False] * (t_max - len(head)))
        future.append(tail + [0] * (window - len(tail)))
        fmask.append([True] * len(tail) + [False] * (window - len(tail)))
    return SequenceSplit(np.array(users, np.int64), np.array(inputs, np.int64).reshape(-1, t_max),
                         np.array(mask, bool).reshape(-1, t_max), np.array(future, np.int64).reshape(-1, window),
                         np.array(fmask, bool).reshape(-1, window))


@dataclass
class TrainData:
    schema: Schema
    bank: FeatureBank
    table: NeighborTable
    pairs: list[PairDataset]
    pair_rows: list[tuple[np.ndarray, np.ndarray]]
    feat_rows: np.ndarray
    corpus: np.ndarray
    train_seqs: SequenceSplit
    eval_seqs: SequenceSplit
    eval_pairs: tuple[np.ndarray, np.ndarray]
    eval_negatives: np.ndarray

    @property
    def num_slots(self) -> int:
        return self.table.num_slots


def prepare_data(graph: HeteroGraph, store, sampling: SamplingConfig, cfg: TrainConfig, sequences=(),
                 engagement: Sequence[EngagementPair] = (), extra_nodes: Iterable[NodeRef] = (),
                 corpus_type: int = 0, neighborhoods: Mapping[NodeRef, Neighborhood] | None = None) -> TrainData:
    """Sample neighborhoods, load features and assemble every training and evaluation set.

    Evaluation pairs take a random Pin ``u`` with its best-scored Pin
    neighbor ``v``; both orientations of those pairs are excluded from
    training, and ``u`` and ``v`` are dropped from each other's neighbor
    slots so the encoder never sees the answer.  A fixed fraction of users is held out for evaluation.
    """
    schema = graph.schema
    if neighborhoods is None:
        neighborhoods = sample_all(graph, sampling)
    seq_nodes = [NodeRef(int(p), corpus_type) for s in sequences for p in s.pins]
    eng_nodes = [n for e in engagement for n in (e.query, e.positive)]
    bank, table = build_bank(schema, store, neighborhoods, sampling.max_neighbors,
                             extra=[*extra_nodes, *seq_nodes, *eng_nodes])
    rng = np.random.default_rng([cfg.seed, 7919])

    candidates = [u for u in graph.nodes() if u.type == corpus_type
                  and any(sn.node.type == corpus_type for sn in neighborhoods[u].neighbors)]
    pick = rng.permutation(len(candidates))[:cfg.eval_pairs]
    eval_q, eval_p, exclude = [], [], set()
    for i in sorted(pick):
        u = candidates[i]
        v = next(sn.node for sn in neighborhoods[u].neighbors if sn.node.type == corpus_type)
        eval_q.append(bank.index[u])
        eval_p.append(bank.index[v])
        exclude.update({(u, v), (v, u)})
        table.drop(bank.index[u], bank.index[v])
        table.drop(bank.index[v], bank.index[u])
    pairs = build_pair_dataset(graph, neighborhoods, parse_pair_types(cfg.pair_types, schema), engagement, exclude)
    pair_rows = [(np.array([bank.index[q] for q in ds.queries], np.int64),
                  np.array([bank.index[p] for p in ds.positives], np.int64)) for ds in pairs]

    missing = np.array(bank.missing, bool)
    in_graph = np.array([ref in graph for ref in bank.refs], bool)
    feat_rows = np.flatnonzero(~missing & in_graph)
    corpus = np.flatnonzero(bank.types == corpus_type)

    split = split_sequences(sequences, bank, cfg.t_max, cfg.future_window, corpus_type)
    order = rng.permutation(len(split))
    n_eval = int(round(cfg.eval_user_frac * len(split)))
    ev, tr = np.sort(order[:n_eval]), np.sort(order[n_eval:])

    def sub(idx):
        return SequenceSplit(split.user_ids[idx], split.inputs[idx], split.mask[idx],
                             split.future[idx], split.future_mask[idx])

    reserved = set(eval_q) | set(eval_p)
    pool = np.array([r for r in corpus if int(r) not in reserved], np.int64)
    n_neg = min(cfg.eval_negatives, len(pool))
    eval_negs = np.sort(rng.choice(pool, size=n_neg, replace=False)) if n_neg else np.zeros(0, np.int64)
    return TrainData(schema, bank, table, pairs, pair_rows, feat_rows, corpus, sub(tr), sub(ev),
                     (np.array(eval_q, np.int64), np.array(eval_p, np.int64)), eval_negs)


# -- negatives ---------------------------------------------------------------

def sample_negatives(rng: np.random.Generator, corpus: np.ndarray, n_random: int,
                     batch_positives: np.ndarray, in_batch: bool = True) -> np.ndarray:
    """Random corpus draws followed by the batch's positives (the in-batch negatives).

    With a single-row batch there are no other rows, so no in-batch
    negatives are added.  Per-row exclusion of a row's own positive happens
    in the loss by id.
    """
    if n_random and len(corpus) == 0:
        raise ValidationError("negative corpus is empty")
    rand = corpus[rng.integers(len(corpus), size=n_random)] if n_random else np.zeros(0, np.int64)
    return with_in_batch(batch_positives, rand, in_batch)


def with_in_batch(batch_positives: np.ndarray, random: np.ndarray, in_batch: bool = True) -> np.ndarray:
    batch_positives = np.asarray(batch_positives, np.int64)
    inb = batch_positives if in_batch and len(batch_positives) > 1 else np.zeros(0, np.int64)
    return np.concatenate([inb, np.asarray(random, np.int64)])


def log_q_rows(sketch: CountMinSketch, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sketch log-frequency of bank ``rows``; ``cols`` holds every bank row's bucket columns."""
    return sketch.log_q_columns(cols[np.asarray(rows, np.int64)])


# -- one step ----------------------------------------------------------------

@dataclass
class StepBatch:
    pairs: list[tuple[np.ndarray, np.ndarray]]
    feat: np.ndarray
    seq_users: np.ndarray
    seq_future: np.ndarray
    random: np.ndarray


class Trainer:
    def __init__(self, model: Model, data: TrainData, cfg: TrainConfig, run_config: Mapping | None = None):
        if model.cfg.t_max < cfg.t_max:
            raise ValidationError("model t_max is shorter than the training window")
        self.model = model
        self.data = data
        self.cfg = cfg
        self.run_config = dict(run_config or {})
        self.opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
        self.sketches = {t: CountMinSketch(seed=cfg.seed) for t in TASKS}
        self.step_num = 0
        self.score = ScoreParams(cfg.lam)
        self.source_weights = [cfg.weights.source_weight(ds.dataset_id) for ds in data.pairs]
        self._cms_cols: dict[tuple, np.ndarray] = {}

    def _columns(self, sk: CountMinSketch) -> np.ndarray:
        key = (sk.width, sk.depth, tuple(sk.a), tuple(sk.b))
        if key not in self._cms_cols:
            self._cms_cols[key] = sk.columns(self.data.bank.refs)
        return self._cms_cols[key]

    # -- batch drawing -------------------------------------------------------
    def draw(self, step: int) -> StepBatch:
        cfg, data, w = self.cfg, self.data, self.cfg.weights
        rng = np.random.default_rng([cfg.seed, step])
        pairs = []
        for (q, p), sw in zip(data.pair_rows, self.source_weights):
            if w.pair > 0 and sw > 0 and len(q):
                idx = rng.integers(len(q), size=cfg.batch_size)
                pairs.append((q[idx], p[idx]))
            else:
                pairs.append((np.zeros(0, np.int64), np.zeros(0, np.int64)))
        feat = np.zeros(0, np.int64)
        if w.feat > 0 and len(data.feat_rows):
            k = min(cfg.batch_size, len(data.feat_rows))
            feat = np.sort(rng.choice(data.feat_rows, size=k, replace=False))
        users = np.zeros(0, np.int64)
        future = np.zeros(0, np.int64)
        seqs = data.train_seqs
        if w.seq > 0 and len(seqs):
            users = np.sort(rng.choice(len(seqs), size=min(cfg.seq_batch_size, len(seqs)), replace=False))
            future = np.array([seqs.future[u, rng.choice(np.flatnonzero(seqs.future_mask[u]))] for u in users],
                              np.int64)
        rand = sample_negatives(rng, data.corpus, cfg.random_negatives, np.zeros(0, np.int64))
        return StepBatch(pairs, feat, users, future, rand)

    # -- loss and gradients --------------------------------------------------
    def compute(self, batch: StepBatch, update_sketches: bool = True, sketches=None):
        """Forward pass, task losses and parameter gradients for ``batch``.

        Returns ``(breakdown, grads)``.  Sketches are updated with the batch
        positives before their frequencies are read, unless disabled.
        """
        cfg, data, model = self.cfg, self.data, self.model
        bank, table = data.bank, data.table
        sketches = self.sketches if sketches is None else sketches
        w = cfg.weights
        seqs = data.train_seqs
        seq_in = seqs.inputs[batch.seq_users]
        seq_mask = seqs.mask[batch.seq_users]

        parts = [batch.random, batch.feat, seq_in.reshape(-1), batch.seq_future]
        uniq = np.unique(np.concatenate(parts)) if any(len(x) for x in parts) else np.zeros(0, np.int64)
        if len(uniq) == 0 and not any(len(q) for q, _ in batch.pairs):
            raise ValidationError("batch touches no nodes")

        def pos(rows):
            return np.searchsorted(uniq, rows)

        fp = model.forward(grad=True)
        E = fp.embed(bank, table, uniq) if len(uniq) else None
        Ev = E.value.astype(np.float64) if len(uniq) else np.zeros((0, model.cfg.dim))
        dE = np.zeros_like(Ev)
        seeds = []
        comp: dict[str, float] = {}

        if update_sketches:
            for q, p in batch.pairs:
                sketches["pair"].update_columns(self._columns(sketches["pair"])[p])
            sketches["feat"].update_columns(self._columns(sketches["feat"])[batch.feat])
            seen = np.concatenate([seq_in[seq_mask], batch.seq_future])
            sketches["seq"].update_columns(self._columns(sketches["seq"])[seen])

        # entity-entity pairs: each side is embedded with the other hidden
        # from its neighbor slots, matching how held-out pairs are scored
        if any(len(q) for q, _ in batch.pairs):
            q_all = np.concatenate([q for q, _ in batch.pairs])
            p_all = np.concatenate([p for _, p in batch.pairs])
            nq = len(q_all)
            QP = fp.embed(bank, table, np.concatenate([q_all, p_all]), exclude=np.concatenate([p_all, q_all]))
            QPv = QP.value.astype(np.float64)
            dQP = np.zeros_like(QPv)
            sources, lo = [], 0
            for (q, p), ds, sw in zip(batch.pairs, data.pairs, self.source_weights):
                if not len(q):
                    continue
                at = np.arange(lo, lo + len(q))
                lo += len(q)
                negs = with_in_batch(p, batch.random, cfg.in_batch)
                inb = len(negs) - len(batch.random)
                sk = sketches["pair"]
                cols = self._columns(sk)
                # in-batch negatives come from the positives' masked embeddings
                Nv = np.vstack([QPv[nq + at[:inb]], Ev[pos(batch.random)]])
                lb = LossBatch(QPv[at], QPv[nq + at], Nv, log_q_rows(sk, cols, p), log_q_rows(sk, cols, negs),
                               pos_ids=p, neg_ids=negs, query_ids=q)
                sources.append((PairSource(ds.dataset_id, sw, [lb]), at, inb))
            loss, grads = pair_loss([s[0] for s in sources], self.score, cfg.chunk_size)
            comp["pair"] = loss
            for (_, at, inb), per in zip(sources, grads):
                dq, dp, dn = per[0]
                dQP[at] += w.pair * dq
                dQP[nq + at] += w.pair * dp
                dQP[nq + at[:inb]] += w.pair * dn[:inb]
                _scatter(dE, pos(batch.random), w.pair * dn[inb:])
            seeds.append((QP, dQP.astype(model.dtype)))

        # entity-feature
        if len(batch.feat):
            feats = batch.feat
            negs = with_in_batch(feats, batch.random, cfg.in_batch)
            sk = sketches["feat"]
            cols = self._columns(sk)
            lq_neg = log_q_rows(sk, cols, negs)
            nbr_slots = table.get(feats)
            node_batches, encoded = {}, {}
            types = bank.types[feats]
            for t in np.unique(types):
                rows_t = feats[types == t]
                for spec in data.schema.feature_specs(int(t)):
                    if spec.kind == TEXT:
                        rows_x = rows_t[bank.token_counts(int(t), spec.code, bank.local[rows_t]) > 0]
                    else:
                        rows_x = rows_t
                    if not len(rows_x):
                        continue
                    G = fp.encode_bank_feature(bank, rows_x, spec.name)
                    key = f"{int(t)}.{spec.name}"
                    own = nbr_slots[np.searchsorted(feats, rows_x)]
                    allowed = ~(own[:, :, None] == negs[None, None, :]).any(axis=1)
                    node_batches[key] = LossBatch(G.value, Ev[pos(rows_x)], Ev[pos(negs)],
                                                  log_q_rows(sk, cols, rows_x), lq_neg,
                                                  pos_ids=rows_x, neg_ids=negs, query_ids=rows_x, allowed=allowed)
                    encoded[key] = (G, rows_x)
            loss, grads = feature_loss(node_batches, self.score, cfg.chunk_size)
            comp["feat"] = loss
            for key, (dq, dp, dn) in grads.items():
                G, rows_x = encoded[key]
                seeds.append((G, (w.feat * dq).astype(model.dtype)))
                _scatter(dE, pos(rows_x), w.feat * dp)
                _scatter(dE, pos(negs), w.feat * dn)

        # user sequences
        if len(batch.seq_users):
            B, T = seq_in.shape
            p_idx = pos(seq_in.reshape(-1))
            P = fp.tape.reshape(fp.tape.index(E, p_idx), (B, T, model.cfg.dim))
            U = fp.user(P, seq_mask)
            Uv = U.value.astype(np.float64)
            inb = np.unique(np.concatenate([seq_in[seq_mask], batch.seq_future])) if cfg.in_batch else np.zeros(0, np.int64)
            negs = np.concatenate([inb, batch.random])
            sk = sketches["seq"]
            cols = self._columns(sk)
            lq_neg = log_q_rows(sk, cols, negs)
            lq_seq = log_q_rows(sk, cols, seq_in.reshape(-1)).reshape(B, T)
            Nv = Ev[pos(negs)]
            l_next, g_next = next_action_loss(Uv, Ev[p_idx].reshape(B, T, -1), seq_mask, Nv, lq_seq, lq_neg,
                                              self.score, seq_ids=seq_in, neg_ids=negs, chunk_size=cfg.chunk_size)
            l_fut, g_fut = future_action_loss(Uv, seq_mask, Ev[pos(batch.seq_future)], Nv,
                                              log_q_rows(sk, cols, batch.seq_future), lq_neg, self.score,
                                              future_ids=batch.seq_future, neg_ids=negs, chunk_size=cfg.chunk_size)
            comp["next"], comp["fut"] = l_next, l_fut
            seeds.append((U, (w.seq * (g_next.dU + g_fut.dU)).astype(model.dtype)))
            _scatter(dE, p_idx, w.seq * g_next.dP.reshape(B * T, -1))
            _scatter(dE, pos(batch.seq_future), w.seq * g_fut.dP)
            _scatter(dE, pos(negs), w.seq * (g_next.dN + g_fut.dN))

        total = total_loss(comp, w)
        if not np.isfinite(total):
            raise NumericError(f"non-finite loss at step {self.step_num}: {comp}")
        if E is not None:
            seeds.append((E, dE.astype(model.dtype)))
        grads = fp.backward(seeds)
        breakdown = {"pair": comp.get("pair", 0.0), "feat": comp.get("feat", 0.0),
                     "next": comp.get("next", 0.0), "fut": comp.get("fut", 0.0), "total": total}
        return breakdown, grads

    def lr_at(self, step: int) -> float:
        return warmup_cosine(step, self.cfg.steps, self.cfg.lr, self.cfg.warmup_frac)

    def train_step(self, batch: StepBatch | None = None) -> dict:
        """One optimizer update; returns the loss breakdown and learning rate."""
        if batch is None:
            batch = self.draw(self.step_num)
        breakdown, grads = self.compute(batch)
        lr = self.lr_at(self.step_num)
        self.opt.step(self.model.params, grads, lr)
        self.step_num += 1
        return {"step": self.step_num, "lr": lr, **{f"loss_{k}": v for k, v in breakdown.items()}}

    # -- evaluation ----------------------------------------------------------
    def evaluate(self, k: int = 10) -> dict:
        """Recall@k on the held-out pairs, feature queries and users."""
        data, model = self.data, self.model
        neg = data.eval_negatives
        out = {}
        q, p = data.eval_pairs
        rows = np.unique(np.concatenate([q, p, neg, data.eval_seqs.inputs.reshape(-1), data.eval_seqs.future.reshape(-1)]))
        emb = model.embed_rows(data.bank, data.table, rows).astype(np.float64)

        def E(r):
            return emb[np.searchsorted(rows, r)]

        N = E(neg)
        if len(q):
            out["recall_pair"] = recall_at_k(E(q), E(p), N, k)
            fp = model.forward(grad=False)
            feats = []
            for t in np.unique(data.bank.types[q]):
                rows_t = q[data.bank.types[q] == t]
                for spec in data.schema.feature_specs(int(t)):
                    G = fp.encode_bank_feature(data.bank, rows_t, spec.name).value
                    feats.append(recall_at_k(G, E(rows_t), N, k))
            if feats:
                out["recall_feat"] = float(np.mean(feats))
        ev = data.eval_seqs
        if len(ev):
            U = model.user_embeddings(E(ev.inputs.reshape(-1)).reshape(len(ev), ev.inputs.shape[1], -1), ev.mask)
            last = ev.mask.sum(axis=1) - 1
            Ul = U[np.arange(len(ev)), last].astype(np.float64)
            rng = np.random.default_rng([self.cfg.seed, 104729])
            fut = np.array([ev.future[i, rng.choice(np.flatnonzero(ev.future_mask[i]))] for i in range(len(ev))])
            out["recall_user_next"] = recall_at_k(Ul, E(ev.future[:, 0]), N, k)
            out["recall_user_fut"] = recall_at_k(Ul, E(fut), N, k)
            out["recall_user"] = 0.5 * (out["recall_user_next"] + out["recall_user_fut"])
        return out

    # -- checkpoints ---------------------------------------------------------
    def save(self, path: str | Path) -> None:
        tensors = {f"param.{k}": v for k, v in self.model.params.items()}
        opt_meta, opt_tensors = self.opt.state()
        tensors.update({f"opt.{k}": v for k, v in opt_tensors.items()})
        cms_meta = {}
        for task, sk in self.sketches.items():
            meta, counters = sk.state()
            cms_meta[task] = meta
            tensors[f"cms.{task}"] = counters
        meta = {"kind": "train", "step": self.step_num, "model": self.model.config_dict(),
                "train": self.cfg.to_dict(), "config": self.run_config, "optimizer": opt_meta, "cms": cms_meta}
        save_archive(path, tensors, meta)

    def restore(self, path: str | Path) -> None:
        tensors, meta = load_archive(path)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
        restored = Model.from_params(self.model.schema, self.model.cfg, params, self.model.seed)
        self.model.params = restored.params
        self.opt.load_state(meta["optimizer"], {k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
        self.sketches = {t: CountMinSketch.from_state(meta["cms"][t], tensors[f"cms.{t}"]) for t in TASKS}
        self.step_num = int(meta["step"])


def load_model(path: str | Path) -> tuple[Model, dict]:
    """Model (and archive metadata) from a training checkpoint."""
    tensors, meta = load_archive(path)
    m = meta["model"]
    schema = Schema.from_text(m["schema"])
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
    return Model.from_params(schema, ModelConfig(**m["model"]), params, int(m["seed"])), meta


def _scatter(target: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    target += scatter_add_rows(len(target), idx, vals)


def _fmt(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train_loop(trainer: Trainer, checkpoint: str | Path | None = None, metrics: str | Path | None = None,
               log=None) -> list[dict]:
    """Run ``trainer`` to ``cfg.steps``; writes line-delimited JSON metrics and a final checkpoint.

    Evaluation runs every ``eval_every`` steps (and at the end when positive).
    With ``prefetch`` enabled a background thread draws upcoming batches.
    """
    cfg = trainer.cfg
    records = []
    fh = open(metrics, "a" if trainer.step_num else "w") if metrics else None

    def emit(rec):
        records.append(rec)
        if fh:
            fh.write(_fmt(rec) + "\n")
            fh.flush()
        if log:
            log(rec)

    def batches():
        if not cfg.prefetch:
            for s in range(trainer.step_num, cfg.steps):
                yield trainer.draw(s)
            return
        q: queue.Queue = queue.Queue(maxsize=2)
        stop = threading.Event()

        def work():
            for s in range(trainer.step_num, cfg.steps):
                if stop.is_set():
                    return
                q.put(trainer.draw(s))
            q.put(None)

        th = threading.Thread(target=work, daemon=True)
        th.start()
        try:
            while (b := q.get()) is not None:
                yield b
        finally:
            stop.set()

    try:
        for batch in batches():
            rec = trainer.train_step(batch)
            emit(rec)
            if cfg.eval_every and (trainer.step_num % cfg.eval_every == 0 or trainer.step_num == cfg.steps):
                emit({"step": trainer.step_num, "eval": True, **trainer.evaluate()})
        if checkpoint:
            trainer.save(checkpoint)
    finally:
        if fh:
            fh.close()
    return records
