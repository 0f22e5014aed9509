"""Train a small multi-task encoder and compare recall before and after.

The synthetic world plants clusters: Pins in one cluster share boards,
visual features and title words, and users browse mostly inside one cluster.
Held-out Pin pairs should land near each other once the encoder has trained.

Run: python demos/03_train_and_eval.py   (about half a minute on one core)
"""

from threadpoolctl import threadpool_limits

from hetrep.loss import TaskWeights
from hetrep.model import Model, ModelConfig
from hetrep.sampler import SamplingConfig
from hetrep.trainer import TrainConfig, Trainer, prepare_data, train_loop
from hetrep.world import generate_synthetic_world

with threadpool_limits(1):
    world = generate_synthetic_world(clusters=4, pins_per_cluster=150, boards_per_cluster=40, users=300, seed=0)
    g = world.graph()
    sampling = SamplingConfig.parse("PB:Pin=8,Board=4;PP:Pin=8", world.schema, budget=10_000)
    cfg = TrainConfig(steps=400, eval_every=100, eval_negatives=500, eval_pairs=300,
                      weights=TaskWeights(pair=1.0, feat=0.2, seq=0.2), seed=0)
    data = prepare_data(g, world.store(), sampling, cfg, world.sequences, extra_nodes=world.pins())
    mc = ModelConfig(dim=32, heads=2, mlp_dim=64, feat_hidden=32, text_dim=16, seq_dim=32, seq_heads=2,
                     seq_mlp_dim=64, num_slots=sampling.max_neighbors, t_max=cfg.t_max)
    trainer = Trainer(Model(world.schema, mc, seed=0), data, cfg)

    def show(rec):
        if rec.get("eval"):
            print(f"step {rec['step']:4d}  pair {rec['recall_pair']:.3f}  feature {rec['recall_feat']:.3f}  "
                  f"user {rec['recall_user']:.3f}")

    show({"eval": True, "step": 0, **trainer.evaluate()})
    train_loop(trainer, log=show)
