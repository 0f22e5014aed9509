"""In-memory feature bank and neighbor slot table used to batch model inputs.

The bank assigns every node a row; rows are grouped per node type so raw
features can be gathered with array indexing.  Nodes without stored
features get zero dense vectors and empty token lists.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from .features import FeatureRecord, FeatureStore
from .sampler import Neighborhood
from .schema import DENSE, NodeRef, Schema


class FeatureBank:
    def __init__(self, schema: Schema):
        self.schema = schema
        self.refs: list[NodeRef] = []
        self.index: dict[NodeRef, int] = {}
        self._type: list[int] = []
        self._local: list[int] = []
        self._count: dict[int, int] = {}
        self._dense: dict[int, dict[int, list[np.ndarray]]] = {}
        self._text: dict[int, dict[int, list[np.ndarray]]] = {}
        self.missing: list[bool] = []
        self._frozen = None

    def __len__(self) -> int:
        return len(self.refs)

    def add(self, ref: NodeRef, record: FeatureRecord | None) -> int:
        row = self.index.get(ref)
        if row is not None:
            return row
        self.schema.check_node_type(ref.type)
        row = self.index[ref] = len(self.refs)
        self.refs.append(ref)
        self._type.append(ref.type)
        self._local.append(self._count.get(ref.type, 0))
        self._count[ref.type] = self._local[-1] + 1
        dense = self._dense.setdefault(ref.type, {})
        text = self._text.setdefault(ref.type, {})
        values = record.values if record is not None else {}
        for spec in self.schema.feature_specs(ref.type):
            v = values.get(spec.code)
            if spec.kind == DENSE:
                dense.setdefault(spec.code, []).append(
                    np.zeros(spec.dim, np.float32) if v is None else np.asarray(v, np.float32))
            else:
                text.setdefault(spec.code, []).append(
                    np.zeros(0, np.int64) if v is None else np.asarray(v, np.int64))
        self.missing.append(record is None)
        self._frozen = None
        return row

    def add_many(self, refs: Iterable[NodeRef], store: FeatureStore | None) -> list[int]:
        refs = [r for r in refs if r not in self.index]
        records = store.fetch(refs) if store is not None else [None] * len(refs)
        for ref, rec in zip(refs, records):
            self.add(ref, rec)
        return [self.index[r] for r in refs]

    def _freeze(self):
        if self._frozen is None:
            dense = {t: {c: np.stack(v) for c, v in d.items()} for t, d in self._dense.items()}
            text = {}
            for t, d in self._text.items():
                text[t] = {}
                for c, lists in d.items():
                    lengths = np.array([len(x) for x in lists], dtype=np.int64)
                    indptr = np.zeros(len(lists) + 1, dtype=np.int64)
                    np.cumsum(lengths, out=indptr[1:])
                    flat = np.concatenate(lists) if lists else np.zeros(0, np.int64)
                    text[t][c] = (indptr, flat)
            self._frozen = (dense, text, np.array(self._type, np.int64), np.array(self._local, np.int64))
        return self._frozen

    @property
    def types(self) -> np.ndarray:
        return self._freeze()[2]

    @property
    def local(self) -> np.ndarray:
        return self._freeze()[3]

    def rows_of_type(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.types == t)

    def dense(self, t: int, code: int, local_rows: np.ndarray) -> np.ndarray:
        return self._freeze()[0][t][code][local_rows]

    def token_counts(self, t: int, code: int, local_rows: np.ndarray) -> np.ndarray:
        indptr = self._freeze()[1][t][code][0]
        return indptr[local_rows + 1] - indptr[local_rows]

    def tokens(self, t: int, code: int, local_rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flattened token ids and their segment (batch position) ids."""
        indptr, flat = self._freeze()[1][t][code]
        starts = indptr[local_rows]
        lengths = indptr[local_rows + 1] - starts
        total = int(lengths.sum())
        seg = np.repeat(np.arange(len(local_rows)), lengths)
        offs = np.arange(total) - np.repeat(np.cumsum(lengths) - lengths, lengths) + np.repeat(starts, lengths)
        return flat[offs], seg


class NeighborTable:
    """``slots[row]`` lists the bank rows of ``row``'s neighbors in order, padded with -1."""

    def __init__(self, num_slots: int):
        self.num_slots = num_slots
        self.slots = np.full((0, num_slots), -1, dtype=np.int64)
        self.scores = np.zeros((0, num_slots), dtype=np.float64)

    def _grow(self, n: int) -> None:
        if n > len(self.slots):
            extra = n - len(self.slots)
            self.slots = np.vstack([self.slots, np.full((extra, self.num_slots), -1, np.int64)])
            self.scores = np.vstack([self.scores, np.zeros((extra, self.num_slots))])

    def set(self, row: int, neighbor_rows: Sequence[int], scores: Sequence[float] | None = None) -> None:
        self._grow(row + 1)
        k = min(len(neighbor_rows), self.num_slots)
        self.slots[row] = -1
        self.slots[row, :k] = neighbor_rows[:k]
        if scores is not None:
            self.scores[row, :k] = scores[:k]

    def drop(self, row: int, neighbor_row: int) -> None:
        """Empty every slot of ``row`` holding ``neighbor_row``; other slots keep their positions."""
        hit = self.slots[row] == neighbor_row
        self.slots[row, hit] = -1
        self.scores[row, hit] = 0.0

    def get(self, rows: np.ndarray) -> np.ndarray:
        self._grow(int(np.max(rows, initial=-1)) + 1)
        return self.slots[rows]


def build_bank(schema: Schema, store: FeatureStore | None, neighborhoods: Mapping[NodeRef, Neighborhood],
               num_slots: int, extra: Iterable[NodeRef] = ()) -> tuple[FeatureBank, NeighborTable]:
    """Bank holding every source, neighbor and extra node, with the slot table filled in."""
    bank = FeatureBank(schema)
    wanted: dict[NodeRef, None] = {}
    for src, nb in neighborhoods.items():
        wanted.setdefault(src, None)
        for sn in nb.neighbors:
            wanted.setdefault(sn.node, None)
    for ref in extra:
        wanted.setdefault(ref, None)
    bank.add_many(list(wanted), store)
    table = NeighborTable(num_slots)
    table._grow(len(bank))
    for src, nb in neighborhoods.items():
        table.set(bank.index[src], [bank.index[sn.node] for sn in nb.neighbors],
                  [sn.score for sn in nb.neighbors])
    return bank, table
