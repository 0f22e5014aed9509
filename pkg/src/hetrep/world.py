"""Planted-partition Pin/Board world used to check that training learns something.

Pins and Boards are split into ``clusters``.  Each Pin is saved to Boards
with probability ``p_intra`` inside its cluster and ``p_inter`` across
clusters; Pins that share a Board are linked with probability ``pin_link``.
Pin features are the cluster centroid plus noise and a title drawn from the
cluster's word list; Board names combine a cluster word with a word unique to
the Board.  User sequences walk Pin -> Board -> Pin and jump to a random
cluster with probability ``drift`` per step.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .features import FeatureRecord, FeatureStore, text_feature, write_store
from .graph import EdgeRecord, HeteroGraph, build_graph, write_edge_tsv
from .schema import NodeRef, Schema

PIN, BOARD = 0, 1
PB, PP = 0, 1

WORLD_SCHEMA = """\
node.Pin = 0
node.Board = 1
edge.PB = 0
edge.PP = 1
feature.Pin.visual = 0 dense {visual_dim}
feature.Pin.title = 1 text 24
feature.Board.name = 0 text 24
hash.vocab = {vocab}
hash.ngram = 3
"""


@dataclass
class UserSequence:
    user_id: int
    pins: list[int]
    timestamps: list[int]


@dataclass
class SyntheticWorld:
    schema: Schema
    edges: list[EdgeRecord]
    records: list[FeatureRecord]
    sequences: list[UserSequence]
    pin_cluster: np.ndarray
    board_cluster: np.ndarray
    params: dict = field(default_factory=dict)

    def graph(self) -> HeteroGraph:
        return build_graph(self.edges, self.schema)

    def pins(self) -> list[NodeRef]:
        return [NodeRef(i, PIN) for i in range(len(self.pin_cluster))]

    def boards(self) -> list[NodeRef]:
        return [NodeRef(i, BOARD) for i in range(len(self.board_cluster))]

    def cluster_of(self, ref: NodeRef) -> int:
        return int((self.pin_cluster if ref.type == PIN else self.board_cluster)[ref.id])

    def store(self) -> "MemoryStore":
        return MemoryStore(self.records)

    def write(self, directory: str | Path, num_partitions: int = 4) -> dict[str, Path]:
        """Write ``schema.cfg``, ``edges.tsv``, ``sequences.tsv`` and a feature store."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"schema": d / "schema.cfg", "edges": d / "edges.tsv",
                 "sequences": d / "sequences.tsv", "store": d / "features"}
        self.schema.save(paths["schema"])
        write_edge_tsv(self.edges, self.schema, paths["edges"])
        write_sequences_tsv(self.sequences, paths["sequences"])
        write_store(self.records, self.schema, num_partitions, paths["store"])
        return paths


class MemoryStore:
    """In-memory stand-in for :class:`FeatureStore` with the same ``fetch`` contract."""

    def __init__(self, records):
        self._by_node = {r.node: r for r in records}

    def fetch(self, nodes) -> list[FeatureRecord | None]:
        return [self._by_node.get(NodeRef(int(n[0]), int(n[1]))) for n in nodes]

    def fetch_one(self, ref: NodeRef) -> FeatureRecord | None:
        return self._by_node.get(ref)


def _word(rng: np.random.Generator, length: int = 6) -> str:
    letters = np.array(list(string.ascii_lowercase))
    return "".join(rng.choice(letters, size=length))


def generate_synthetic_world(clusters: int = 8, pins_per_cluster: int = 250, boards_per_cluster: int = 60,
                             p_intra: float = 0.05, p_inter: float = 0.0005, users: int = 800,
                             seq_len: int = 12, drift: float = 0.1, seed: int = 0,
                             visual_dim: int = 16, feature_noise: float = 4.5, pin_link: float = 0.3,
                             words_per_cluster: int = 20, vocab: int = 4096,
                             title_cluster_words: int = 2) -> SyntheticWorld:
    if clusters < 1 or pins_per_cluster < 1 or boards_per_cluster < 1:
        raise ValidationError("clusters and per-cluster counts must be positive")
    for name, p in (("p_intra", p_intra), ("p_inter", p_inter), ("drift", drift), ("pin_link", pin_link)):
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"{name} must be a probability, got {p}")
    if not p_intra > p_inter:
        raise ValidationError("p_intra must exceed p_inter")
    if seq_len < 2 or users < 0:
        raise ValidationError("seq_len must be >= 2 and users >= 0")
    if visual_dim < 1 or feature_noise < 0 or title_cluster_words < 0 or words_per_cluster < 1:
        raise ValidationError("visual_dim and words_per_cluster must be positive, noise and title words nonnegative")
    rng = np.random.default_rng(seed)
    schema = Schema.from_text(WORLD_SCHEMA.format(visual_dim=visual_dim, vocab=vocab))
    n_pins, n_boards = clusters * pins_per_cluster, clusters * boards_per_cluster
    pin_cluster = np.repeat(np.arange(clusters), pins_per_cluster)
    board_cluster = np.repeat(np.arange(clusters), boards_per_cluster)

    same = pin_cluster[:, None] == board_cluster[None, :]
    prob = np.where(same, p_intra, p_inter)
    saved = rng.random((n_pins, n_boards)) < prob
    edges: list[EdgeRecord] = []
    for p, b in zip(*np.nonzero(saved)):
        edges.append(EdgeRecord(NodeRef(int(p), PIN), NodeRef(int(b), BOARD), PB, 1.0))
    linked = set()
    for b in range(n_boards):
        members = np.flatnonzero(saved[:, b])
        if len(members) < 2:
            continue
        iu, ju = np.triu_indices(len(members), k=1)
        keep = rng.random(len(iu)) < pin_link
        for i, j in zip(members[iu[keep]], members[ju[keep]]):
            linked.add((int(i), int(j)))
    for i, j in sorted(linked):
        edges.append(EdgeRecord(NodeRef(i, PIN), NodeRef(j, PIN), PP, 1.0))

    centroids = rng.standard_normal((clusters, visual_dim))
    words = [[_word(rng) for _ in range(words_per_cluster)] for _ in range(clusters)]
    records = []
    for p in range(n_pins):
        c = pin_cluster[p]
        visual = centroids[c] + feature_noise * rng.standard_normal(visual_dim)
        title = " ".join(rng.choice(words[c], size=title_cluster_words)) + " " + _word(rng, 4)
        records.append(FeatureRecord(NodeRef(p, PIN), {
            0: visual.astype(np.float32), 1: text_feature(title, schema, 24)}))
    for b in range(n_boards):
        name = f"{rng.choice(words[board_cluster[b]])} {_word(rng)}"
        records.append(FeatureRecord(NodeRef(b, BOARD), {0: text_feature(name, schema, 24)}))

    boards_of = [np.flatnonzero(saved[p]) for p in range(n_pins)]
    pins_of = [np.flatnonzero(saved[:, b]) for b in range(n_boards)]
    by_cluster = [np.flatnonzero(pin_cluster == c) for c in range(clusters)]
    sequences = []
    for u in range(users):
        c = int(rng.integers(clusters))
        pin = int(rng.choice(by_cluster[c]))
        seq = [pin]
        for _ in range(seq_len - 1):
            if rng.random() < drift:
                c = int(rng.integers(clusters))
                pin = int(rng.choice(by_cluster[c]))
            elif len(boards_of[pin]):
                b = int(rng.choice(boards_of[pin]))
                pin = int(rng.choice(pins_of[b]))
            else:
                pin = int(rng.choice(by_cluster[int(pin_cluster[pin])]))
            seq.append(pin)
        stamps = np.cumsum(rng.integers(1, 100, size=seq_len)).tolist()
        sequences.append(UserSequence(u, seq, [int(t) for t in stamps]))

    params = dict(clusters=clusters, pins_per_cluster=pins_per_cluster, boards_per_cluster=boards_per_cluster,
                  p_intra=p_intra, p_inter=p_inter, users=users, seq_len=seq_len, drift=drift, seed=seed,
                  visual_dim=visual_dim, feature_noise=feature_noise, pin_link=pin_link,
                  words_per_cluster=words_per_cluster, vocab=vocab, title_cluster_words=title_cluster_words)
    return SyntheticWorld(schema, edges, records, sequences, pin_cluster, board_cluster, params)


def write_sequences_tsv(sequences, path: str | Path) -> None:
    """``user_id <TAB> comma-separated pin ids <TAB> comma-separated timestamps``."""
    lines = [f"{s.user_id}\t{','.join(map(str, s.pins))}\t{','.join(map(str, s.timestamps))}"
             for s in sequences]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_sequences_tsv(path: str | Path) -> list[UserSequence]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise ValidationError(f"{path}:{lineno}: expected 3 tab-separated columns")
        try:
            pins = [int(x) for x in cols[1].split(",") if x]
            stamps = [int(x) for x in cols[2].split(",") if x]
            user = int(cols[0])
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-integer field") from None
        if len(pins) != len(stamps):
            raise ValidationError(f"{path}:{lineno}: pin and timestamp counts differ")
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValidationError(f"{path}:{lineno}: timestamps must be nondecreasing")
        out.append(UserSequence(user, pins, stamps))
    return out
