"""Partitioned binary feature store and text hashing.

Partition file layout (all little-endian)::

    magic "OSFS" | version u16 | schema hash u64 | record count u64
    index: count x (node_id u64, node_type u8, offset u64), sorted by (id, type)
    records: feature count u8, then per feature: code u8, length u32, payload
             (f32 values for dense features, u32 token ids for text)
    crc32 u32 over every preceding byte

Offsets are relative to the start of the record block.  Node ``(id, type)``
lives in partition ``id % P``.  ``manifest.txt`` lists the partitions.
"""

from __future__ import annotations

import mmap
import os
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import IntegrityError, SchemaError, ValidationError
from .schema import DENSE, TEXT, NodeRef, Schema

STORE_MAGIC = b"OSFS"
STORE_VERSION = 1
MANIFEST = "manifest.txt"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_HEADER = struct.Struct("<4sHQQ")
_INDEX_DTYPE = np.dtype([("id", "<u8"), ("type", "u1"), ("off", "<u8")])
_FEATURE_HEADER = struct.Struct("<BI")


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def hash_text_tokens(text: str, n: int = 3, vocab: int = 4096) -> list[int]:
    """Character n-grams of ``text`` hashed with FNV-1a 64, reduced mod ``vocab``.

    Text shorter than ``n`` (but nonempty) yields one token for the whole string.
    """
    if vocab < 1:
        raise ValidationError("vocab must be >= 1")
    if n < 1:
        raise ValidationError("n-gram size must be >= 1")
    if not text:
        return []
    grams = [text[i:i + n] for i in range(len(text) - n + 1)] or [text]
    return [fnv1a_64(g.encode("utf-8")) % vocab for g in grams]


@dataclass
class FeatureRecord:
    node: NodeRef
    # feature code -> float32 vector (dense) or uint32 token ids (text)
    values: dict[int, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureRecord) or self.node != other.node:
            return False
        if self.values.keys() != other.values.keys():
            return False
        return all(a.dtype == other.values[k].dtype and a.tobytes() == other.values[k].tobytes()
                   for k, a in self.values.items())


def validate_record(rec: FeatureRecord, schema: Schema) -> FeatureRecord:
    """Check ``rec`` against the schema and normalize payload dtypes."""
    schema.check_node_type(rec.node.type)
    specs = {s.code: s for s in schema.feature_specs(rec.node.type)}
    out = {}
    for code, value in rec.values.items():
        spec = specs.get(code)
        if spec is None:
            raise SchemaError(f"feature code {code} not declared for node type {rec.node.type}")
        if spec.kind == DENSE:
            arr = np.asarray(value, dtype="<f4")
            if arr.shape != (spec.dim,):
                raise ValidationError(f"feature {spec.name!r}: expected shape ({spec.dim},), got {arr.shape}")
        else:
            arr = np.asarray(value, dtype="<u4")
            if arr.ndim != 1 or len(arr) > spec.dim:
                raise ValidationError(f"feature {spec.name!r}: expected at most {spec.dim} tokens")
            if len(arr) and int(arr.max()) >= schema.hash_vocab:
                raise ValidationError(f"feature {spec.name!r}: token id >= vocab {schema.hash_vocab}")
        out[code] = arr
    return FeatureRecord(NodeRef(int(rec.node.id), int(rec.node.type)), out)


def encode_record(rec: FeatureRecord) -> bytes:
    parts = [struct.pack("<B", len(rec.values))]
    for code in sorted(rec.values):
        arr = rec.values[code]
        parts.append(_FEATURE_HEADER.pack(code, len(arr)))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_record(node: NodeRef, buf, offset: int, schema: Schema) -> tuple[FeatureRecord, int]:
    """Decode one record starting at ``offset``; returns it with the end offset."""
    kinds = {s.code: s.kind for s in schema.feature_specs(node.type)}
    (count,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    values = {}
    for _ in range(count):
        code, length = _FEATURE_HEADER.unpack_from(buf, offset)
        offset += _FEATURE_HEADER.size
        kind = kinds.get(code)
        if kind is None:
            raise IntegrityError(f"record for {tuple(node)} has undeclared feature code {code}")
        dtype = np.dtype("<f4") if kind == DENSE else np.dtype("<u4")
        nbytes = length * dtype.itemsize
        if offset + nbytes > len(buf):
            raise IntegrityError("record payload runs past end of buffer")
        values[code] = np.frombuffer(bytes(buf[offset:offset + nbytes]), dtype=dtype)
        offset += nbytes
    return FeatureRecord(node, values), offset


def _partition_name(i: int) -> str:
    return f"part-{i:05d}.osfs"


def write_store(records: Iterable[FeatureRecord], schema: Schema, num_partitions: int, path: str | Path) -> "FeatureStore":
    """Write ``records`` into ``num_partitions`` partition files plus a manifest.

    Later records for the same node replace earlier ones.  The layout only
    depends on the set of records, not their input order.
    """
    if num_partitions < 1:
        raise ValidationError("need at least one partition")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    buckets: list[dict[NodeRef, FeatureRecord]] = [{} for _ in range(num_partitions)]
    for rec in records:
        rec = validate_record(rec, schema)
        buckets[rec.node.id % num_partitions][rec.node] = rec
    schema_hash = schema.fingerprint()
    for i, bucket in enumerate(buckets):
        keys = sorted(bucket, key=lambda r: (r.id, r.type))
        index = np.zeros(len(keys), dtype=_INDEX_DTYPE)
        blobs, off = [], 0
        for j, ref in enumerate(keys):
            blob = encode_record(bucket[ref])
            index[j] = (ref.id, ref.type, off)
            blobs.append(blob)
            off += len(blob)
        body = b"".join([_HEADER.pack(STORE_MAGIC, STORE_VERSION, schema_hash, len(keys)),
                         index.tobytes(), *blobs])
        tmp = path / (_partition_name(i) + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(body)
            fh.write(struct.pack("<I", zlib.crc32(body)))
        os.replace(tmp, path / _partition_name(i))
    schema.save(path / "schema.cfg")
    lines = [f"format OSFS {STORE_VERSION}", f"partitions {num_partitions}", f"schema_hash {schema_hash:016x}"]
    lines += [_partition_name(i) for i in range(num_partitions)]
    # the manifest is written last: its presence commits the store
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path / MANIFEST)
    return FeatureStore(path)


class _Partition:
    def __init__(self, file: Path, schema_hash: int):
        self.file = file
        self.schema_hash = schema_hash
        self._lock = threading.Lock()
        self._loaded = False

    def _load(self) -> None:
        with self._lock:
            if self._loaded:
                return
            with open(self.file, "rb") as fh:
                size = os.fstat(fh.fileno()).st_size
                buf = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ) if size else b""
            if len(buf) < _HEADER.size + 4:
                raise IntegrityError(f"{self.file}: truncated partition")
            (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
            if zlib.crc32(memoryview(buf)[: len(buf) - 4]) != crc:
                raise IntegrityError(f"{self.file}: checksum mismatch")
            magic, version, schema_hash, count = _HEADER.unpack_from(buf, 0)
            if magic != STORE_MAGIC or version != STORE_VERSION:
                raise IntegrityError(f"{self.file}: not an OSFS v{STORE_VERSION} partition")
            if schema_hash != self.schema_hash:
                raise IntegrityError(f"{self.file}: schema hash mismatch")
            self.index = np.frombuffer(buf, dtype=_INDEX_DTYPE, count=count, offset=_HEADER.size)
            self.ids = np.ascontiguousarray(self.index["id"])
            self.records_at = _HEADER.size + count * _INDEX_DTYPE.itemsize
            self.buf = buf
            self._loaded = True

    def lookup(self, ref: NodeRef) -> int:
        """Absolute byte offset of ``ref``'s record, or -1."""
        self._load()
        pos = int(np.searchsorted(self.ids, np.uint64(ref.id)))
        while pos < len(self.ids) and int(self.ids[pos]) == ref.id:
            if int(self.index["type"][pos]) == ref.type:
                return self.records_at + int(self.index["off"][pos])
            pos += 1
        return -1


class FeatureStore:
    """Read-only handle over a committed store directory; safe for concurrent readers."""

    def __init__(self, path: str | Path, schema: Schema | None = None):
        self.path = Path(path)
        manifest = self.path / MANIFEST
        if not manifest.exists():
            raise IntegrityError(f"{self.path}: no manifest (store not committed)")
        fields = {}
        for line in manifest.read_text().splitlines():
            key, _, value = line.partition(" ")
            fields[key] = value.strip()
        try:
            if fields.get("format") != f"OSFS {STORE_VERSION}":
                raise ValueError
            self.num_partitions = int(fields["partitions"])
            schema_hash = int(fields["schema_hash"], 16)
        except (KeyError, ValueError):
            raise IntegrityError(f"{manifest}: malformed manifest") from None
        self.schema = schema if schema is not None else Schema.load(self.path / "schema.cfg")
        if self.schema.fingerprint() != schema_hash:
            raise IntegrityError(f"{self.path}: schema does not match manifest")
        self.partitions = [_Partition(self.path / _partition_name(i), schema_hash)
                           for i in range(self.num_partitions)]

    def fetch_one(self, ref: NodeRef) -> FeatureRecord | None:
        part = self.partitions[ref.id % self.num_partitions]
        off = part.lookup(ref)
        if off < 0:
            return None
        rec, _ = decode_record(ref, part.buf, off, self.schema)
        return rec

    def fetch(self, nodes: Sequence[NodeRef]) -> list[FeatureRecord | None]:
        """Records in request order; ``None`` marks a node with no stored features."""
        return [self.fetch_one(NodeRef(int(n[0]), int(n[1]))) for n in nodes]

    def __len__(self) -> int:
        total = 0
        for p in self.partitions:
            p._load()
            total += len(p.ids)
        return total

    def keys(self) -> list[NodeRef]:
        out = []
        for p in self.partitions:
            p._load()
            out.extend(NodeRef(int(i), int(t)) for i, t in zip(p.index["id"], p.index["type"]))
        return out


def open_store(path: str | Path) -> FeatureStore:
    return FeatureStore(path)


def text_feature(text: str, schema: Schema, max_tokens: int) -> np.ndarray:
    """Hash ``text`` and truncate to ``max_tokens`` ids."""
    return np.asarray(hash_text_tokens(text, schema.ngram, schema.hash_vocab)[:max_tokens], dtype="<u4")


__all__ = [
    "DENSE", "TEXT", "FeatureRecord", "FeatureStore", "decode_record", "encode_record", "fnv1a_64",
    "hash_text_tokens", "open_store", "text_feature", "validate_record", "write_store",
]
