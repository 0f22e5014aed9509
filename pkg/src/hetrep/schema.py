"""Type registry for nodes, edges and node features.

A schema is loaded from a flat ``key = value`` file::

    node.Pin = 0
    node.Board = 1
    edge.PB = 0
    edge.PP = 1
    feature.Pin.visual = 0 dense 16
    feature.Pin.title = 1 text 24
    hash.vocab = 4096
    hash.ngram = 3

For ``dense`` features the trailing number is the vector length; for
``text`` features it is the maximum number of hashed tokens per record.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .config import parse_kv_text
from .errors import SchemaError

DENSE = "dense"
TEXT = "text"
FEATURE_KINDS = (DENSE, TEXT)


class NodeRef(NamedTuple):
    id: int
    type: int

    def sort_key(self) -> tuple[int, int]:
        return (self.type, self.id)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    code: int
    dim: int
    kind: str

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise SchemaError(f"unknown feature kind {self.kind!r}")
        if self.dim <= 0:
            raise SchemaError(f"feature {self.name!r} needs a positive dimension")
        if not 0 <= self.code < 256:
            raise SchemaError(f"feature code {self.code} does not fit in u8")


@dataclass
class Schema:
    node_types: dict[str, int] = field(default_factory=dict)
    edge_types: dict[str, int] = field(default_factory=dict)
    # node type code -> ordered feature specs
    features: dict[int, list[FeatureSpec]] = field(default_factory=dict)
    hash_vocab: int = 4096
    ngram: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for kind, table in (("node", self.node_types), ("edge", self.edge_types)):
            codes = list(table.values())
            if len(set(codes)) != len(codes):
                raise SchemaError(f"duplicate {kind} type codes: {table}")
            for name, code in table.items():
                if not 0 <= code < 256:
                    raise SchemaError(f"{kind} type {name!r} code {code} does not fit in u8")
        node_codes = set(self.node_types.values())
        for t, specs in self.features.items():
            if t not in node_codes:
                raise SchemaError(f"features declared for unregistered node type {t}")
            codes = [s.code for s in specs]
            if len(set(codes)) != len(codes):
                raise SchemaError(f"duplicate feature codes for node type {t}")
        if self.hash_vocab < 1:
            raise SchemaError("hash.vocab must be >= 1")
        if self.ngram < 1:
            raise SchemaError("hash.ngram must be >= 1")

    # -- lookups -----------------------------------------------------------
    def node_code(self, name: str) -> int:
        try:
            return self.node_types[name]
        except KeyError:
            raise SchemaError(f"unregistered node type {name!r}") from None

    def edge_code(self, name: str) -> int:
        try:
            return self.edge_types[name]
        except KeyError:
            raise SchemaError(f"unregistered edge type {name!r}") from None

    def node_name(self, code: int) -> str:
        for name, c in self.node_types.items():
            if c == code:
                return name
        raise SchemaError(f"unregistered node type code {code}")

    def edge_name(self, code: int) -> str:
        for name, c in self.edge_types.items():
            if c == code:
                return name
        raise SchemaError(f"unregistered edge type code {code}")

    def check_node_type(self, code: int) -> None:
        if code not in self.node_types.values():
            raise SchemaError(f"unregistered node type code {code}")

    def check_edge_type(self, code: int) -> None:
        if code not in self.edge_types.values():
            raise SchemaError(f"unregistered edge type code {code}")

    def feature_specs(self, node_type: int) -> list[FeatureSpec]:
        return self.features.get(node_type, [])

    def feature_names(self) -> list[str]:
        """Distinct feature names in first-declared order."""
        seen: dict[str, None] = {}
        for t in sorted(self.features):
            for s in self.features[t]:
                seen.setdefault(s.name, None)
        return list(seen)

    # -- serialization -----------------------------------------------------
    def canonical(self) -> str:
        lines = [f"node.{n} = {c}" for n, c in sorted(self.node_types.items(), key=lambda kv: kv[1])]
        lines += [f"edge.{n} = {c}" for n, c in sorted(self.edge_types.items(), key=lambda kv: kv[1])]
        for t in sorted(self.features):
            tname = self.node_name(t)
            for s in self.features[t]:
                lines.append(f"feature.{tname}.{s.name} = {s.code} {s.kind} {s.dim}")
        lines.append(f"hash.vocab = {self.hash_vocab}")
        lines.append(f"hash.ngram = {self.ngram}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.canonical())

    @classmethod
    def from_text(cls, text: str) -> "Schema":
        kv = parse_kv_text(text)
        node_types: dict[str, int] = {}
        edge_types: dict[str, int] = {}
        pending: list[tuple[str, str, str]] = []
        hash_vocab, ngram = 4096, 3
        for key, value in kv.items():
            parts = key.split(".")
            if parts[0] == "node" and len(parts) == 2:
                node_types[parts[1]] = int(value)
            elif parts[0] == "edge" and len(parts) == 2:
                edge_types[parts[1]] = int(value)
            elif parts[0] == "feature" and len(parts) == 3:
                pending.append((parts[1], parts[2], value))
            elif key == "hash.vocab":
                hash_vocab = int(value)
            elif key == "hash.ngram":
                ngram = int(value)
            else:
                raise SchemaError(f"unknown schema key {key!r}")
        features: dict[int, list[FeatureSpec]] = {}
        for tname, fname, value in pending:
            if tname not in node_types:
                raise SchemaError(f"feature {fname!r} declared for unknown node type {tname!r}")
            try:
                code, kind, dim = value.split()
            except ValueError:
                raise SchemaError(f"feature value must be '<code> <kind> <dim>', got {value!r}") from None
            features.setdefault(node_types[tname], []).append(
                FeatureSpec(fname, int(code), int(dim), kind))
        return cls(node_types, edge_types, features, hash_vocab, ngram)

    @classmethod
    def load(cls, path: str | Path) -> "Schema":
        return cls.from_text(Path(path).read_text())

    def fingerprint(self) -> int:
        from .features import fnv1a_64

        return fnv1a_64(self.canonical().encode())
