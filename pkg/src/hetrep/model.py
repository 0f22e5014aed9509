"""Feature encoders, per-type node embedders and the causal user-sequence model.

Every parameter lives in ``Model.params`` under a dotted name.  A forward
pass records onto a :class:`~hetrep.autograd.Tape`; its ``backward`` turns
gradients at the embedding outputs into a gradient bundle keyed like the
parameters.

Node embedder for type ``t``, over a batch of nodes::

    raw(v)      = concat(dense features, mean hash embedding of each text feature)
    tokens      = [cls_t, proj_t,type(self)(raw(self)), proj_t,type(n_1)(raw(n_1)), ...] + pos_t
    h           = pre-norm transformer blocks (empty neighbor slots masked as keys)
    embedding   = l2_normalize(head_t(layernorm(h[CLS])))
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .autograd import Tape, Tensor
from .errors import StateError, ValidationError
from .featurize import FeatureBank, NeighborTable
from .schema import DENSE, FeatureSpec, Schema


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    layers: int = 1
    heads: int = 4
    mlp_dim: int = 256
    feat_hidden: int = 128
    feat_layers: int = 2
    text_dim: int = 32
    seq_dim: int = 64
    seq_layers: int = 1
    seq_heads: int = 4
    seq_mlp_dim: int = 128
    num_slots: int = 150
    t_max: int = 8
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("dim", "layers", "heads", "mlp_dim", "feat_hidden", "text_dim",
                     "seq_dim", "seq_layers", "seq_heads", "seq_mlp_dim", "t_max"):
            if getattr(self, name) < 1:
                raise ValidationError(f"model.{name} must be >= 1")
        if self.feat_layers < 0 or self.num_slots < 0:
            raise ValidationError("model.feat_layers and num_slots must be >= 0")
        if self.dim % self.heads or self.seq_dim % self.seq_heads:
            raise ValidationError("model dims must be divisible by the head counts")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def from_section(cls, section: Mapping, **extra) -> "ModelConfig":
        keys = cls.__dataclass_fields__
        return cls(**{k: v for k, v in {**section, **extra}.items() if k in keys})


def _feature_input_dim(spec: FeatureSpec, cfg: ModelConfig) -> int:
    return spec.dim if spec.kind == DENSE else cfg.text_dim


class Model:
    def __init__(self, schema: Schema, cfg: ModelConfig, seed: int = 0):
        self.schema = schema
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(cfg.dtype)
        self.params: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(seed)
        self._init_params()
        del self._rng

    # -- parameter construction ------------------------------------------------
    def _normal(self, name: str, shape, std: float) -> None:
        self.params[name] = (self._rng.standard_normal(shape) * std).astype(self.dtype)

    def _const(self, name: str, shape, value: float) -> None:
        self.params[name] = np.full(shape, value, dtype=self.dtype)

    def _linear(self, name: str, n_in: int, n_out: int) -> None:
        self._normal(name + ".W", (n_in, n_out), 1.0 / math.sqrt(max(n_in, 1)))
        # small nonzero biases keep all-zero (imputed) inputs off ReLU kinks
        self._normal(name + ".b", (n_out,), 0.02)

    def _block(self, name: str, dim: int, mlp_dim: int) -> None:
        for ln in ("ln1", "ln2"):
            self._const(f"{name}.{ln}.g", (dim,), 1.0)
            self._const(f"{name}.{ln}.b", (dim,), 0.0)
        for proj in ("q", "k", "v", "o"):
            self._linear(f"{name}.attn.{proj}", dim, dim)
        self._linear(f"{name}.mlp.l0", dim, mlp_dim)
        self._linear(f"{name}.mlp.l1", mlp_dim, dim)

    def raw_dim(self, node_type: int) -> int:
        return sum(_feature_input_dim(s, self.cfg) for s in self.schema.feature_specs(node_type))

    def _init_params(self) -> None:
        cfg, schema = self.cfg, self.schema
        self._normal("hash.table", (schema.hash_vocab, cfg.text_dim), 1.0)
        for tname, t in sorted(schema.node_types.items(), key=lambda kv: kv[1]):
            for spec in schema.feature_specs(t):
                prefix = f"feat.{tname}.{spec.name}"
                width = _feature_input_dim(spec, cfg)
                for i in range(cfg.feat_layers):
                    self._linear(f"{prefix}.l{i}", width, cfg.feat_hidden)
                    width = cfg.feat_hidden
                self._linear(f"{prefix}.l{cfg.feat_layers}", width, cfg.dim)
        slots = 2 + cfg.num_slots
        for tname, t in sorted(schema.node_types.items(), key=lambda kv: kv[1]):
            prefix = f"emb.{tname}"
            self._normal(prefix + ".cls", (cfg.dim,), 1.0)
            self._normal(prefix + ".pos", (slots, cfg.dim), 0.1)
            for sname, s in sorted(schema.node_types.items(), key=lambda kv: kv[1]):
                self._linear(f"{prefix}.proj.{sname}.l0", self.raw_dim(s), cfg.dim)
                self._linear(f"{prefix}.proj.{sname}.l1", cfg.dim, cfg.dim)
            for i in range(cfg.layers):
                self._block(f"{prefix}.blk{i}", cfg.dim, cfg.mlp_dim)
            self._const(prefix + ".lnf.g", (cfg.dim,), 1.0)
            self._const(prefix + ".lnf.b", (cfg.dim,), 0.0)
            self._linear(prefix + ".head.l0", cfg.dim, cfg.dim)
            self._linear(prefix + ".head.l1", cfg.dim, cfg.dim)
        self._linear("seq.in", cfg.dim, cfg.seq_dim)
        self._normal("seq.pos", (cfg.t_max, cfg.seq_dim), 0.1)
        for i in range(cfg.seq_layers):
            self._block(f"seq.blk{i}", cfg.seq_dim, cfg.seq_mlp_dim)
        self._const("seq.lnf.g", (cfg.seq_dim,), 1.0)
        self._const("seq.lnf.b", (cfg.seq_dim,), 0.0)
        self._linear("seq.out", cfg.seq_dim, cfg.dim)

    # -- convenience -----------------------------------------------------------
    def forward(self, grad: bool = True) -> "ForwardPass":
        return ForwardPass(self, grad)

    def embed_rows(self, bank: FeatureBank, table: NeighborTable, rows, batch_size: int = 512) -> np.ndarray:
        """Embeddings (no gradient) for bank ``rows``, computed in fixed-size batches."""
        rows = np.asarray(rows, dtype=np.int64)
        out = np.zeros((len(rows), self.cfg.dim), dtype=self.dtype)
        for lo in range(0, len(rows), batch_size):
            fp = self.forward(grad=False)
            out[lo:lo + batch_size] = fp.embed(bank, table, rows[lo:lo + batch_size]).value
        return out

    def encode_feature(self, node_type: int, name: str, raw: np.ndarray) -> np.ndarray:
        """Feature encoder output for one raw feature (dense vector or token id list)."""
        fp = self.forward(grad=False)
        spec = next((s for s in self.schema.feature_specs(node_type) if s.name == name), None)
        if spec is None:
            raise ValidationError(f"node type {node_type} has no feature {name!r}")
        raw = np.asarray(raw)
        if spec.kind == DENSE:
            if raw.shape != (spec.dim,):
                raise ValidationError(f"feature {name!r} expects shape ({spec.dim},), got {raw.shape}")
            x = Tensor(raw.astype(self.dtype)[None, :])
        else:
            ids = raw.astype(np.int64).reshape(-1)
            if ids.size and (ids.min() < 0 or ids.max() >= self.schema.hash_vocab):
                raise ValidationError(f"feature {name!r}: token id out of vocabulary")
            x = fp.pool_tokens(ids, np.zeros(len(ids), np.int64), 1)
        return fp.feature_encoder(node_type, name, x).value[0]

    def user_embeddings(self, P: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        P = np.asarray(P, dtype=self.dtype)
        squeeze = P.ndim == 2
        if squeeze:
            P = P[None]
            mask = None if mask is None else np.asarray(mask)[None]
        fp = self.forward(grad=False)
        out = fp.user(Tensor(P), mask).value
        return out[0] if squeeze else out

    # -- checkpoint state ------------------------------------------------------
    def config_dict(self) -> dict:
        return {"model": asdict(self.cfg), "seed": self.seed, "schema": self.schema.canonical()}

    @classmethod
    def from_params(cls, schema: Schema, cfg: ModelConfig, params: Mapping[str, np.ndarray], seed: int = 0) -> "Model":
        m = cls.__new__(cls)
        m.schema, m.cfg, m.seed, m.dtype = schema, cfg, seed, np.dtype(cfg.dtype)
        ref = cls(schema, cfg, seed).params
        if set(ref) != set(params):
            missing = sorted(set(ref) ^ set(params))[:5]
            raise ValidationError(f"parameter names do not match the model layout: {missing}")
        m.params = {}
        for k, v in ref.items():
            if params[k].shape != v.shape:
                raise ValidationError(f"parameter {k!r}: shape {params[k].shape} != {v.shape}")
            m.params[k] = np.asarray(params[k], dtype=m.dtype).copy()
        return m


class ForwardPass:
    """One recorded forward computation over the model's current parameters."""

    def __init__(self, model: Model, grad: bool = True):
        self.model = model
        self.cfg = model.cfg
        self.tape = Tape(grad=grad)
        self._backward_done = False

    def p(self, name: str) -> Tensor:
        return self.tape.param(name, self.model.params[name])

    def _const(self, x: np.ndarray) -> Tensor:
        return Tensor(np.asarray(x, dtype=self.model.dtype))

    # -- building blocks -------------------------------------------------------
    def _linear(self, x: Tensor, name: str) -> Tensor:
        return self.tape.linear(x, self.p(name + ".W"), self.p(name + ".b"))

    def _mlp(self, x: Tensor, name: str, n_layers: int) -> Tensor:
        for i in range(n_layers):
            x = self._linear(x, f"{name}.l{i}")
            if i < n_layers - 1:
                x = self.tape.relu(x)
        return x

    def _layernorm(self, x: Tensor, name: str) -> Tensor:
        return self.tape.layernorm(x, self.p(name + ".g"), self.p(name + ".b"))

    def _attention(self, x: Tensor, name: str, heads: int, mask: np.ndarray) -> Tensor:
        tape = self.tape
        n, s, dim = x.shape
        dh = dim // heads

        def split(t: Tensor) -> Tensor:
            return tape.transpose(tape.reshape(t, (n, s, heads, dh)), (0, 2, 1, 3))

        q = split(self._linear(x, name + ".q"))
        k = split(self._linear(x, name + ".k"))
        v = split(self._linear(x, name + ".v"))
        scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        att = tape.softmax(scores, mask)
        ctx = tape.reshape(tape.transpose(tape.matmul(att, v), (0, 2, 1, 3)), (n, s, dim))
        return self._linear(ctx, name + ".o")

    def _block(self, x: Tensor, name: str, heads: int, mask: np.ndarray, act) -> Tensor:
        tape = self.tape
        x = tape.add(x, self._attention(self._layernorm(x, name + ".ln1"), name + ".attn", heads, mask))
        h = act(self._linear(self._layernorm(x, name + ".ln2"), name + ".mlp.l0"))
        return tape.add(x, self._linear(h, name + ".mlp.l1"))

    # -- raw features ----------------------------------------------------------
    def pool_tokens(self, ids: np.ndarray, segments: np.ndarray, n: int) -> Tensor:
        return self.tape.segment_mean(self.p("hash.table"), ids, segments, n)

    def raw_feature(self, bank: FeatureBank, node_type: int, spec: FeatureSpec, local_rows: np.ndarray) -> Tensor:
        if spec.kind == DENSE:
            return self._const(bank.dense(node_type, spec.code, local_rows))
        ids, seg = bank.tokens(node_type, spec.code, local_rows)
        return self.pool_tokens(ids, seg, len(local_rows))

    def raw_features(self, bank: FeatureBank, node_type: int, local_rows: np.ndarray) -> Tensor:
        specs = self.model.schema.feature_specs(node_type)
        if not specs:
            return self._const(np.zeros((len(local_rows), 0)))
        parts = [self.raw_feature(bank, node_type, s, local_rows) for s in specs]
        return parts[0] if len(parts) == 1 else self.tape.concat(parts, axis=1)

    def feature_encoder(self, node_type: int, name: str, raw: Tensor) -> Tensor:
        """Feature encoder output, unit-normalized rows of width ``dim``."""
        tname = self.model.schema.node_name(node_type)
        h = self._mlp(raw, f"feat.{tname}.{name}", self.cfg.feat_layers + 1)
        return self.tape.l2_normalize(h)

    def encode_bank_feature(self, bank: FeatureBank, rows: np.ndarray, name: str) -> Tensor:
        """Feature encoder outputs for feature ``name`` of bank ``rows`` (all of one node type)."""
        rows = np.asarray(rows, dtype=np.int64)
        t = int(bank.types[rows[0]])
        spec = next(s for s in self.model.schema.feature_specs(t) if s.name == name)
        raw = self.raw_feature(bank, t, spec, bank.local[rows])
        return self.feature_encoder(t, name, raw)

    # -- node embedder ---------------------------------------------------------
    def embed(self, bank: FeatureBank, table: NeighborTable, rows, exclude=None) -> Tensor:
        """Unit embeddings for bank ``rows`` (any mix of node types), in row order.

        ``exclude[i]``, when given, is a bank row hidden from row ``i``'s
        neighbor slots (-1 hides nothing).
        """
        rows = np.asarray(rows, dtype=np.int64)
        if exclude is not None:
            exclude = np.asarray(exclude, dtype=np.int64)
            if exclude.shape != rows.shape:
                raise ValidationError("exclude must have one entry per row")
        types = bank.types[rows]
        uniq = np.unique(types)
        if len(uniq) == 1:
            return self._embed_type(bank, table, rows, int(uniq[0]), exclude)
        parts = [(np.flatnonzero(types == t), None) for t in uniq]
        parts = [(idx, self._embed_type(bank, table, rows[idx], int(t), None if exclude is None else exclude[idx]))
                 for (idx, _), t in zip(parts, uniq)]
        return self.tape.scatter_rows(len(rows), parts, self.cfg.dim, self.model.dtype)

    def _embed_type(self, bank: FeatureBank, table: NeighborTable, rows: np.ndarray, t: int,
                    exclude: np.ndarray | None = None) -> Tensor:
        tape, cfg, schema = self.tape, self.cfg, self.model.schema
        prefix = f"emb.{schema.node_name(t)}"
        n, dim = len(rows), cfg.dim
        local = bank.local
        self_tok = self._mlp(self.raw_features(bank, t, local[rows]), f"{prefix}.proj.{schema.node_name(t)}", 2)

        slots = table.get(rows)[:, :cfg.num_slots] if cfg.num_slots else np.zeros((n, 0), np.int64)
        if exclude is not None:
            slots = np.where(slots == exclude[:, None], -1, slots)
        used = int((slots >= 0).any(axis=0).nonzero()[0].max() + 1) if (slots >= 0).any() else 0
        slots = slots[:, :used]
        seq = [tape.reshape(tape.add(self._const(np.zeros((n, dim))), self.p(prefix + ".cls")), (n, 1, dim)),
               tape.reshape(self_tok, (n, 1, dim))]
        if used:
            flat = slots.reshape(-1)
            ntypes = np.where(flat >= 0, bank.types[np.maximum(flat, 0)], -1)
            parts = []
            for s in np.unique(ntypes[ntypes >= 0]):
                idx = np.flatnonzero(ntypes == s)
                raw = self.raw_features(bank, int(s), local[flat[idx]])
                parts.append((idx, self._mlp(raw, f"{prefix}.proj.{schema.node_name(int(s))}", 2)))
            nbr = tape.scatter_rows(n * used, parts, dim, self.model.dtype)
            seq.append(tape.reshape(nbr, (n, used, dim)))
        x = tape.concat(seq, axis=1)
        length = 2 + used
        x = tape.add(x, tape.index(self.p(prefix + ".pos"), slice(0, length)))
        keys = np.ones((n, length), dtype=bool)
        keys[:, 2:] = slots >= 0
        mask = keys[:, None, None, :]
        for i in range(cfg.layers):
            x = self._block(x, f"{prefix}.blk{i}", cfg.heads, mask, tape.relu)
        cls = tape.index(x, (slice(None), 0))
        h = self._layernorm(cls, prefix + ".lnf")
        h = self._mlp(h, prefix + ".head", 2)
        return tape.l2_normalize(h)

    # -- sequence model --------------------------------------------------------
    def user(self, P: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Causal user embeddings ``U[:, tau]`` from entity embeddings ``P[:, :tau+1]``.

        ``P`` is ``(B, T, dim)``; ``mask`` (``B x T`` bool) marks real positions.
        Padded positions neither influence other positions nor produce output
        (their rows are zero).
        """
        tape, cfg = self.tape, self.cfg
        B, T, _ = P.shape
        if T > cfg.t_max:
            raise ValidationError(f"sequence length {T} exceeds t_max {cfg.t_max}")
        if T == 0:
            return self._const(np.zeros((B, 0, cfg.dim)))
        valid = np.ones((B, T), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        x = self._linear(P, "seq.in")
        x = tape.add(x, tape.index(self.p("seq.pos"), slice(0, T)))
        allowed = np.tril(np.ones((T, T), dtype=bool))[None] & (valid[:, None, :] | np.eye(T, dtype=bool)[None])
        att_mask = allowed[:, None, :, :]
        for i in range(cfg.seq_layers):
            x = self._block(x, f"seq.blk{i}", cfg.seq_heads, att_mask, tape.gelu)
        x = self._layernorm(x, "seq.lnf")
        u = tape.l2_normalize(self._linear(x, "seq.out"))
        if mask is not None and not valid.all():
            u = tape.mul_const(u, valid[:, :, None].astype(self.model.dtype))
        return u

    # -- backward --------------------------------------------------------------
    def backward(self, seeds) -> dict[str, np.ndarray]:
        """Gradient bundle for every model parameter, given output-gradient ``seeds``.

        ``seeds`` is an iterable of ``(tensor, gradient)`` pairs for tensors
        produced by this pass.  Parameters the pass never touched get zeros.
        """
        if not self.tape.grad_enabled:
            raise StateError("forward pass was recorded without gradients")
        if self._backward_done:
            raise StateError("backward already ran for this forward pass")
        self._backward_done = True
        grads = self.tape.backward(seeds)
        return {k: grads[k] if k in grads else np.zeros_like(v) for k, v in self.model.params.items()}

