import numpy as np
import pytest

from hetrep.schema import Schema

SCHEMA_TEXT = """\
node.Pin = 0
node.Board = 1
edge.PB = 0
edge.PP = 1
feature.Pin.visual = 0 dense 4
feature.Pin.title = 1 text 8
feature.Board.name = 0 text 8
hash.vocab = 64
hash.ngram = 3
"""

PIN, BOARD, PB, PP = 0, 1, 0, 1


@pytest.fixture
def schema():
    return Schema.from_text(SCHEMA_TEXT)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMOKE_CONFIG = """\
world.clusters = 3
world.pins_per_cluster = 40
world.boards_per_cluster = 10
world.users = 60
world.p_intra = 0.3
world.p_inter = 0.005
world.seq_len = 10
sampler.subsets = PB:Pin=6,Board=3;PP:Pin=6
sampler.budget = 2000
model.dim = 16
model.heads = 2
model.mlp_dim = 24
model.feat_hidden = 16
model.feat_layers = 1
model.text_dim = 8
model.seq_dim = 16
model.seq_heads = 2
model.seq_mlp_dim = 24
train.steps = 50
train.batch_size = 16
train.seq_batch_size = 8
train.random_negatives = 32
train.t_max = 6
train.future_window = 3
train.eval_every = 25
train.eval_pairs = 30
train.eval_negatives = 40
train.prefetch = true
"""


def run_smoke_pipeline(root, seed=7, threads=1):
    """synth-data -> build -> prune -> train -> infer -> eval through the CLI; returns artifact paths."""
    from hetrep.cli import main

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.cfg"
    cfg.write_text(SMOKE_CONFIG)
    common = ["--config", str(cfg), "--threads", str(threads)]
    world = root / "world"
    out = {"graph": root / "graph.osgr", "pruned": root / "pruned.osgr", "ckpt": root / "model.osck",
           "metrics": root / "metrics.jsonl", "table": root / "emb.osem", "evalset": root / "eval.tsv"}
    steps = [
        ["synth-data", "--out", str(world), "--seed", str(seed), "--partitions", "2"],
        ["build", "--edges", str(world / "edges.tsv"), "--schema", str(world / "schema.cfg"), "--out", str(out["graph"])],
        ["prune", "--graph", str(out["graph"]), "--out", str(out["pruned"]), "--d-min", "3", "--seed", str(seed)],
        ["train", "--graph", str(out["pruned"]), "--store", str(world / "features"), "--sequences",
         str(world / "sequences.tsv"), "--out", str(out["ckpt"]), "--metrics", str(out["metrics"]),
         "--eval-set-out", str(out["evalset"]), "--seed", str(seed)],
        ["infer", "--graph", str(out["pruned"]), "--store", str(world / "features"), "--checkpoint",
         str(out["ckpt"]), "--out", str(out["table"])],
        ["eval", "--table", str(out["table"]), "--eval-set", str(out["evalset"])],
    ]
    for argv in steps:
        code = main(argv + common)
        assert code == 0, (argv[0], code)
    return out
