import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetrep.errors import IntegrityError, SchemaError, ValidationError
from hetrep.features import FeatureRecord, FeatureStore, fnv1a_64, hash_text_tokens, text_feature, write_store
from hetrep.schema import NodeRef, Schema

from conftest import BOARD, PIN, SCHEMA_TEXT


def pin(i, rng=None, tokens=(1, 2, 3)):
    vis = np.arange(4, dtype=np.float32) + i if rng is None else rng.standard_normal(4).astype(np.float32)
    return FeatureRecord(NodeRef(i, PIN), {0: vis, 1: np.array(tokens, dtype=np.uint32)})


def test_fnv_reference_vectors():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_hash_text_tokens_golden():
    assert hash_text_tokens("") == []
    assert hash_text_tokens("abc", 2, 2**64) == [fnv1a_64(b"ab"), fnv1a_64(b"bc")]
    assert hash_text_tokens("abc", 2, 4096) == [2154, 882]
    assert hash_text_tokens("hello world") == hash_text_tokens("hello world")
    assert hash_text_tokens("ab", 3, 10) == [fnv1a_64(b"ab") % 10]
    with pytest.raises(ValidationError):
        hash_text_tokens("x", 3, 0)


def test_empty_store(tmp_path, schema):
    store = write_store([], schema, 3, tmp_path / "s")
    assert len(store) == 0
    assert store.fetch([NodeRef(1, PIN), NodeRef(2, BOARD)]) == [None, None]


def test_single_record_roundtrip_bit_exact(tmp_path, schema):
    vis = np.array([0.0, -0.0, np.float32(1e-40), np.inf], dtype=np.float32)
    rec = FeatureRecord(NodeRef(5, PIN), {0: vis, 1: np.array([63, 0], dtype=np.uint32)})
    store = write_store([rec], schema, 2, tmp_path / "s")
    got = FeatureStore(tmp_path / "s").fetch_one(NodeRef(5, PIN))
    assert got == rec
    assert got.values[0].tobytes() == vis.tobytes()  # keeps the sign of -0.0
    assert store.fetch_one(NodeRef(5, BOARD)) is None


def test_partitioning_by_modulus(tmp_path, schema, rng):
    recs = [pin(int(i), rng) for i in rng.choice(10**6, 10_000, replace=False)]
    store = write_store(recs, schema, 4, tmp_path / "s")
    for k, part in enumerate(store.partitions):
        part._load()
        assert all(int(i) % 4 == k for i in part.ids)
    assert len(store) == 10_000
    sample = [recs[j] for j in rng.choice(len(recs), 200, replace=False)]
    assert store.fetch([r.node for r in sample]) == sample


def test_fetch_order_and_duplicates(tmp_path, schema):
    a, b = pin(1), pin(2)
    store = write_store([a, b], schema, 2, tmp_path / "s")
    got = store.fetch([a.node, NodeRef(3, PIN), b.node, a.node])
    assert got[0] == got[3] == a and got[1] is None and got[2] == b


def test_layout_independent_of_input_order(tmp_path, schema, rng):
    recs = [pin(i, rng) for i in range(50)]
    write_store(recs, schema, 3, tmp_path / "a")
    write_store(recs[::-1], schema, 3, tmp_path / "b")
    for i in range(3):
        name = f"part-{i:05d}.osfs"
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_schema_violations(tmp_path, schema):
    with pytest.raises(ValidationError):
        write_store([FeatureRecord(NodeRef(1, PIN), {0: np.zeros(3)})], schema, 1, tmp_path / "s")
    with pytest.raises(SchemaError):
        write_store([FeatureRecord(NodeRef(1, PIN), {9: np.zeros(4)})], schema, 1, tmp_path / "s")
    with pytest.raises(ValidationError):
        write_store([FeatureRecord(NodeRef(1, PIN), {1: np.array([64])})], schema, 1, tmp_path / "s")
    with pytest.raises(ValidationError):
        write_store([FeatureRecord(NodeRef(1, PIN), {1: np.arange(9)})], schema, 1, tmp_path / "s")
    with pytest.raises(SchemaError):
        write_store([FeatureRecord(NodeRef(1, 5), {})], schema, 1, tmp_path / "s")


def test_corruption_detected(tmp_path, schema):
    write_store([pin(i) for i in range(10)], schema, 1, tmp_path / "s")
    part = tmp_path / "s" / "part-00000.osfs"
    raw = bytearray(part.read_bytes())
    raw[40] ^= 1
    part.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        FeatureStore(tmp_path / "s").fetch_one(NodeRef(1, PIN))


def test_uncommitted_store_rejected(tmp_path, schema):
    write_store([pin(1)], schema, 1, tmp_path / "s")
    (tmp_path / "s" / "manifest.txt").unlink()
    with pytest.raises(IntegrityError):
        FeatureStore(tmp_path / "s")


def test_schema_mismatch_rejected(tmp_path, schema):
    write_store([pin(1)], schema, 1, tmp_path / "s")
    other = Schema.from_text(SCHEMA_TEXT.replace("hash.vocab = 64", "hash.vocab = 65"))
    with pytest.raises(IntegrityError):
        FeatureStore(tmp_path / "s", schema=other)


def test_concurrent_readers(tmp_path, schema, rng):
    recs = [pin(i, rng) for i in range(300)]
    store = write_store(recs, schema, 4, tmp_path / "s")
    store = FeatureStore(tmp_path / "s")
    errors = []

    def read():
        try:
            for _ in range(5):
                assert store.fetch([r.node for r in recs]) == recs
        except AssertionError as exc:
            errors.append(exc)

    threads = [threading.Thread(target=read) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**63), st.lists(st.floats(width=32, allow_nan=False), min_size=4, max_size=4),
                          st.text(max_size=12)), max_size=30, unique_by=lambda t: t[0]),
       st.integers(1, 5))
def test_roundtrip_property(tmp_path_factory, items, parts):
    schema = Schema.from_text(SCHEMA_TEXT)
    recs = [FeatureRecord(NodeRef(i, PIN), {0: np.array(v, dtype=np.float32), 1: text_feature(t, schema, 8)})
            for i, v, t in items]
    store = write_store(recs, schema, parts, tmp_path_factory.mktemp("s"))
    assert store.fetch([r.node for r in recs]) == recs
    assert sorted(store.keys(), key=NodeRef.sort_key) == sorted((r.node for r in recs), key=NodeRef.sort_key)
