"""A small reverse-mode tape over named numpy tensors.

Ops append their output to the tape together with a closure that maps the
output gradient to parent gradients.  ``Tape.backward`` walks the tape once
in reverse creation order; a tape can be differentiated only once.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import StateError, ValidationError


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_backward")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, name: str | None = None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape})"

    def _acc(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def scatter_add_rows(n: int, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """``out[idx[j]] += vals[j]`` over rows of an ``n``-row zero array; repeated indices accumulate."""
    idx = np.asarray(idx, dtype=np.int64)
    flat = vals.reshape(len(idx), -1)
    # one entry per column, so the compressed-column layout is immediate
    m = sp.csc_matrix((np.ones(len(idx), dtype=flat.dtype), idx, np.arange(len(idx) + 1)), shape=(n, len(idx)))
    return np.asarray(m @ flat).reshape((n,) + vals.shape[1:])


_GELU_C = math.sqrt(2.0 / math.pi)


class Tape:
    """Records a forward computation.  With ``grad=False`` nothing is recorded."""

    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self.done = False

    # -- leaves ------------------------------------------------------------
    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = self.params.get(name)
        if t is None:
            t = self.params[name] = Tensor(value, requires_grad=self.grad_enabled, name=name)
        return t

    @staticmethod
    def const(value) -> Tensor:
        return value if isinstance(value, Tensor) else Tensor(np.asarray(value))

    def _out(self, value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
        needs = self.grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(value, requires_grad=needs)
        if needs:
            out._backward = backward
            self.nodes.append(out)
        return out

    # -- backward ------------------------------------------------------------
    def backward(self, seeds: Iterable[tuple[Tensor, np.ndarray]]) -> dict[str, np.ndarray]:
        """Accumulate ``seeds`` and propagate; returns gradients keyed by parameter name."""
        if not self.grad_enabled:
            raise StateError("tape was recorded without gradients")
        if self.done:
            raise StateError("backward already ran for this forward pass")
        self.done = True
        for t, g in seeds:
            g = np.asarray(g)
            if g.shape != t.shape:
                raise ValidationError(f"seed gradient shape {g.shape} does not match tensor {t.shape}")
            t._acc(g.astype(t.value.dtype, copy=False))
        for node in reversed(self.nodes):
            if node.grad is not None:
                node._backward(node.grad)
                node.grad = None
        return {name: (p.grad if p.grad is not None else np.zeros_like(p.value))
                for name, p in self.params.items()}

    # -- ops -------------------------------------------------------------------
    def linear(self, x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
        xv = x.value
        y = xv @ W.value
        if b is not None:
            y = y + b.value

        def back(g):
            if x.requires_grad:
                x._acc(g @ W.value.T)
            if W.requires_grad:
                W._acc(xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
            if b is not None and b.requires_grad:
                b._acc(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return self._out(y, [x, W] + ([b] if b is not None else []), back)

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """Batched product over identical leading dimensions."""
        av, bv = a.value, b.value

        def back(g):
            if a.requires_grad:
                a._acc(g @ np.swapaxes(bv, -1, -2))
            if b.requires_grad:
                b._acc(np.swapaxes(av, -1, -2) @ g)
        return self._out(av @ bv, [a, b], back)

    def add(self, a: Tensor, b) -> Tensor:
        b = self.const(b)
        ashape, bshape = a.shape, b.shape

        def back(g):
            if a.requires_grad:
                a._acc(_unbroadcast(g, ashape))
            if b.requires_grad:
                b._acc(_unbroadcast(g, bshape))
        return self._out(a.value + b.value, [a, b], back)

    def scale(self, x: Tensor, s: float) -> Tensor:
        return self._out(x.value * s, [x], lambda g: x._acc(g * s))

    def mul_const(self, x: Tensor, c: np.ndarray) -> Tensor:
        """Elementwise product with a fixed (broadcastable) array."""
        return self._out(x.value * c, [x], lambda g: x._acc(_unbroadcast(g * c, x.shape)))

    def relu(self, x: Tensor) -> Tensor:
        on = x.value > 0
        return self._out(np.maximum(x.value, 0), [x], lambda g: x._acc(g * on))

    def gelu(self, x: Tensor) -> Tensor:
        """Tanh approximation of GELU."""
        v = x.value
        inner = _GELU_C * (v + 0.044715 * v ** 3)
        th = np.tanh(inner)
        y = 0.5 * v * (1.0 + th)

        def back(g):
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
            x._acc(g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * dinner))
        return self._out(y, [x], back)

    def layernorm(self, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
        v = x.value
        mu = v.mean(axis=-1, keepdims=True)
        xc = v - mu
        inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        y = xhat * gamma.value + beta.value

        def back(g):
            if gamma.requires_grad:
                gamma._acc((g * xhat).reshape(-1, v.shape[-1]).sum(axis=0))
            if beta.requires_grad:
                beta._acc(g.reshape(-1, v.shape[-1]).sum(axis=0))
            if x.requires_grad:
                gx = g * gamma.value
                x._acc(inv * (gx - gx.mean(axis=-1, keepdims=True)
                              - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
        return self._out(y, [x, gamma, beta], back)

    def softmax(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Softmax over the last axis; ``mask`` (broadcastable, bool) drops False entries."""
        v = x.value
        if mask is not None:
            v = np.where(mask, v, -np.inf)
        m = v.max(axis=-1, keepdims=True)
        e = np.exp(v - m)
        y = e / e.sum(axis=-1, keepdims=True)

        def back(g):
            x._acc(y * (g - (g * y).sum(axis=-1, keepdims=True)))
        return self._out(y, [x], back)

    def l2_normalize(self, x: Tensor, eps: float = 1e-12) -> Tensor:
        """Row normalization with the full Jacobian ``(I - y y^T) / |x|``."""
        v = x.value
        norm = np.sqrt((v * v).sum(axis=-1, keepdims=True))
        norm = np.maximum(norm, eps)
        y = v / norm

        def back(g):
            x._acc((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm)
        return self._out(y, [x], back)

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        old = x.shape
        return self._out(x.value.reshape(shape), [x], lambda g: x._acc(g.reshape(old)))

    def transpose(self, x: Tensor, axes: tuple[int, ...]) -> Tensor:
        inv = tuple(np.argsort(axes))
        return self._out(np.transpose(x.value, axes), [x], lambda g: x._acc(np.transpose(g, inv)))

    def index(self, x: Tensor, key) -> Tensor:
        """``x[key]`` for a basic-slice key or a 1-D integer row array (repeats allowed)."""
        def back(g):
            if isinstance(key, np.ndarray):
                x._acc(scatter_add_rows(x.shape[0], key, g))
            else:
                # basic slicing never repeats an element
                gx = np.zeros_like(x.value)
                gx[key] = g
                x._acc(gx)
        return self._out(x.value[key], [x], back)

    def concat(self, xs: Sequence[Tensor], axis: int) -> Tensor:
        sizes = [t.shape[axis] for t in xs]
        bounds = np.cumsum([0] + sizes)

        def back(g):
            for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    t._acc(g[tuple(sl)])
        return self._out(np.concatenate([t.value for t in xs], axis=axis), list(xs), back)

    def scatter_rows(self, n: int, parts: Sequence[tuple[np.ndarray, Tensor]], width: int, dtype) -> Tensor:
        """Rows ``idx`` of an ``n x width`` zero matrix set from each part; indices must be disjoint."""
        out = np.zeros((n, width), dtype=dtype)
        for idx, t in parts:
            out[idx] = t.value

        def back(g):
            for idx, t in parts:
                t._acc(g[idx])
        return self._out(out, [t for _, t in parts], back)

    def segment_mean(self, table: Tensor, ids: np.ndarray, segments: np.ndarray, n: int) -> Tensor:
        """Row ``s`` is the mean of ``table[ids[j]]`` over ``j`` with ``segments[j] == s``; empty rows are zero."""
        dtype = table.value.dtype
        counts = np.bincount(segments, minlength=n)
        weights = (1.0 / counts[segments]).astype(dtype) if len(segments) else np.zeros(0, dtype)
        order = np.argsort(segments, kind="stable")
        indptr = np.concatenate([[0], np.cumsum(counts)])
        m = sp.csr_matrix((weights[order], np.asarray(ids)[order], indptr), shape=(n, table.shape[0]))
        out = np.asarray(m @ table.value, dtype=dtype)

        def back(g):
            table._acc(np.asarray(m.T @ g, dtype=dtype))
        return self._out(out, [table], back)
