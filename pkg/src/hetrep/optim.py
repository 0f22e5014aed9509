"""Adaptive-moment optimizer with decoupled weight decay and a warmup-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import NumericError, ValidationError


def warmup_cosine(step: int, total: int, base_lr: float, warmup_frac: float = 0.05) -> float:
    """Learning rate for 0-based ``step``: linear warmup, then cosine decay to zero at ``total``."""
    if total <= 0:
        return base_lr
    warm = max(1, int(round(warmup_frac * total))) if warmup_frac > 0 else 0
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(1, total - warm)
    frac = min(1.0, (step - warm) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamW:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0:
            raise ValidationError("learning rate and weight decay must be non-negative")
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        """Update ``params`` in place.  Decay skips biases, norms and 1-D tensors."""
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in sorted(params):
            p = params[name]
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim > 1:
                upd = upd + self.weight_decay * p
            if lr:
                params[name] = (p - lr * upd).astype(p.dtype)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        tensors = {}
        for name in self.m:
            tensors[f"m.{name}"] = self.m[name]
            tensors[f"v.{name}"] = self.v[name]
        meta = {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step_count}
        return meta, tensors

    def load_state(self, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(meta["step"])
        self.m = {k[2:]: np.array(v, dtype=np.float64) for k, v in tensors.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v, dtype=np.float64) for k, v in tensors.items() if k.startswith("v.")}
