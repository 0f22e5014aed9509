"""Count-min sketch over node references, used for sampling-bias correction."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .errors import ValidationError
from .schema import NodeRef

_PRIME = (1 << 61) - 1


def _key(ref: NodeRef) -> int:
    return ((int(ref.id) << 8) | int(ref.type)) % _PRIME


class CountMinSketch:
    """``depth`` rows of ``width`` counters with hashes ``((a x + b) mod p) mod width``.

    Estimates never undercount.  Two sketches built with the same seed share
    hash functions and can be merged by adding counters.
    """

    def __init__(self, width: int = 2048, depth: int = 4, seed: int = 0):
        if width < 1 or depth < 1:
            raise ValidationError(f"width and depth must be positive, got {width}, {depth}")
        self.width = width
        self.depth = depth
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.a = [int(x) for x in rng.integers(1, _PRIME, size=depth, dtype=np.int64)]
        self.b = [int(x) for x in rng.integers(0, _PRIME, size=depth, dtype=np.int64)]
        self.counters = np.zeros((depth, width), dtype=np.uint64)
        self.total = 0

    def _buckets(self, ref: NodeRef) -> list[int]:
        x = _key(ref)
        return [((a * x + b) % _PRIME) % self.width for a, b in zip(self.a, self.b)]

    def update(self, ref: NodeRef, count: int = 1) -> None:
        for row, col in enumerate(self._buckets(ref)):
            self.counters[row, col] += np.uint64(count)
        self.total += count

    def update_many(self, refs: Iterable[NodeRef]) -> None:
        for ref in refs:
            self.update(ref)

    def estimate(self, ref: NodeRef) -> int:
        return int(min(self.counters[row, col] for row, col in enumerate(self._buckets(ref))))

    def log_q(self, ref: NodeRef) -> float:
        """Add-one smoothed log frequency ``log((est + 1) / (N + width))``."""
        if self.total < 1:
            raise ValidationError("log_q needs at least one update")
        return math.log((self.estimate(ref) + 1) / (self.total + self.width))

    def log_q_unseen(self) -> float:
        if self.total < 1:
            raise ValidationError("log_q needs at least one update")
        return math.log(1.0 / (self.total + self.width))

    def log_q_many(self, refs: Iterable[NodeRef]) -> np.ndarray:
        return np.array([self.log_q(r) for r in refs], dtype=np.float64)

    # -- precomputed bucket columns ---------------------------------------------
    # Callers that hash the same keys every step compute ``columns`` once and
    # pass rows of it instead of node references.
    def columns(self, refs: Iterable[NodeRef]) -> np.ndarray:
        """``(n, depth)`` bucket index of every ref in every row."""
        return np.array([self._buckets(r) for r in refs], dtype=np.int64).reshape(-1, self.depth)

    def update_columns(self, cols: np.ndarray) -> None:
        rows = np.broadcast_to(np.arange(self.depth), cols.shape)
        np.add.at(self.counters, (rows, cols), np.uint64(1))
        self.total += len(cols)

    def log_q_columns(self, cols: np.ndarray) -> np.ndarray:
        if self.total < 1:
            raise ValidationError("log_q needs at least one update")
        est = self.counters[np.arange(self.depth), cols].min(axis=1).astype(np.float64)
        return np.log((est + 1.0) / (self.total + self.width))

    def merge(self, other: "CountMinSketch") -> "CountMinSketch":
        if (self.width, self.depth, self.a, self.b) != (other.width, other.depth, other.a, other.b):
            raise ValidationError("can only merge sketches with identical shape and seeds")
        out = CountMinSketch(self.width, self.depth, self.seed)
        out.counters = self.counters + other.counters
        out.total = self.total + other.total
        return out

    def copy(self) -> "CountMinSketch":
        out = CountMinSketch(self.width, self.depth, self.seed)
        out.counters = self.counters.copy()
        out.total = self.total
        return out

    # -- checkpoint state ------------------------------------------------------
    def state(self) -> tuple[dict, np.ndarray]:
        return {"width": self.width, "depth": self.depth, "seed": self.seed, "total": self.total}, self.counters

    @classmethod
    def from_state(cls, meta: dict, counters: np.ndarray) -> "CountMinSketch":
        out = cls(int(meta["width"]), int(meta["depth"]), int(meta["seed"]))
        out.counters = np.array(counters, dtype=np.uint64).reshape(out.depth, out.width)
        out.total = int(meta["total"])
        return out
