"""Command-line entry point: ``hetrep <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Every subcommand accepts ``--config FILE`` and repeated ``--set key=value``;
dedicated flags override both.  ``--threads 1`` forces single-threaded,
bit-reproducible execution.
"""

from __future__ import annotations

import argparse
import signal
import sys
import threading
from pathlib import Path

from .config import RunConfig
from .errors import HetrepError, NotFoundError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--threads", type=int, default=None, help="thread cap for numeric libraries; 1 = reproducible")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hetrep", description="Heterogeneous graph representation pipeline.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate a synthetic Pin/Board world")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="world seed (world.seed)")
    p.add_argument("--partitions", type=int, default=4, help="feature store partitions")
    _common(p)

    p = sub.add_parser("build", help="build a graph snapshot from an edge TSV")
    p.add_argument("--edges", required=True, help="TSV: src_id src_type dst_id dst_type edge_type [weight]")
    p.add_argument("--schema", required=True, help="schema file")
    p.add_argument("--out", required=True, help="snapshot path")
    _common(p)

    p = sub.add_parser("prune", help="degree-based edge pruning")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--d-min", type=int)
    p.add_argument("--d-max", type=int)
    p.add_argument("--seed", type=int)
    _common(p)

    p = sub.add_parser("sample", help="print the sampled neighborhood of one node")
    p.add_argument("--graph", required=True)
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--type", required=True, help="node type name or code")
    p.add_argument("--subsets", help="relation subsets and quotas, e.g. 'PB:Pin=25,Board=75;PP:Pin=50'")
    _common(p)

    p = sub.add_parser("serve", help="serve sampling and features over TCP")
    p.add_argument("--graph", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--bind", default="127.0.0.1:7878")
    _common(p)

    p = sub.add_parser("train", help="multi-task training")
    p.add_argument("--graph", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--sequences", help="sequence TSV (user_id, pin ids, timestamps)")
    p.add_argument("--engagement", help="engagement TSV (query_id, query_type, pos_id, pos_type, dataset_id)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics log (JSON lines)")
    p.add_argument("--eval-set-out", help="write the held-out pair eval set as TSV")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    _common(p)

    p = sub.add_parser("infer", help="embed every graph and feature-store node")
    p.add_argument("--graph", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="OSEM embedding file")
    p.add_argument("--tsv", help="also write a TSV debug dump")
    p.add_argument("--nodes", help="TSV of 'id<TAB>type' lines to embed instead of graph and store nodes")
    _common(p)

    p = sub.add_parser("eval", help="recall@k of an embedding table on an eval set")
    p.add_argument("--table", required=True)
    p.add_argument("--eval-set", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--schema", help="schema file, when the eval set names node types")
    _common(p)
    return ap


def _run_config(args, extra: dict | None = None) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return RunConfig.load(args.config, overrides)


def _write_config_echo(path: str | Path, cfg: RunConfig) -> None:
    Path(str(path) + ".config").write_text(cfg.to_text())


def _node_type(schema, tok: str) -> int:
    if tok.isdigit():
        schema.check_node_type(int(tok))
        return int(tok)
    return schema.node_code(tok)


def _sampling(cfg: RunConfig, schema, subsets: str | None = None):
    from .sampler import SamplingConfig
    return SamplingConfig.parse(subsets or cfg["sampler.subsets"], schema, cfg["sampler.budget"],
                                cfg["sampler.restart_prob"])


def cmd_synth(args) -> int:
    from .world import generate_synthetic_world
    cfg = _run_config(args, {"world.seed": args.seed})
    world = generate_synthetic_world(**cfg.section("world"))
    paths = world.write(args.out, args.partitions)
    _write_config_echo(Path(args.out) / "world", cfg)
    for name, path in paths.items():
        print(f"{name}\t{path}")
    return EXIT_OK


def cmd_build(args) -> int:
    from .graph import build_graph, read_edge_tsv, save_snapshot
    from .schema import Schema
    cfg = _run_config(args)
    schema = Schema.load(args.schema)
    g = build_graph(read_edge_tsv(args.edges, schema), schema)
    save_snapshot(g, args.out)
    _write_config_echo(args.out, cfg)
    print(f"nodes\t{g.num_nodes}\nedges\t{g.num_edges}")
    return EXIT_OK


def cmd_prune(args) -> int:
    from .graph import PruneConfig, load_snapshot, prune_graph, save_snapshot
    cfg = _run_config(args, {"graph.alpha": args.alpha, "graph.d_min": args.d_min,
                             "graph.d_max": args.d_max, "graph.seed": args.seed})
    g = load_snapshot(args.graph)
    pruned = prune_graph(g, PruneConfig(cfg["graph.alpha"], cfg["graph.d_min"], cfg["graph.d_max"], cfg["graph.seed"]))
    save_snapshot(pruned, args.out)
    _write_config_echo(args.out, cfg)
    print(f"edges_before\t{g.num_edges}\nedges_after\t{pruned.num_edges}")
    return EXIT_OK


def cmd_sample(args) -> int:
    from .graph import load_snapshot
    from .sampler import sample_neighborhood
    from .schema import NodeRef
    cfg = _run_config(args)
    g = load_snapshot(args.graph)
    ref = NodeRef(args.node, _node_type(g.schema, args.type))
    nb = sample_neighborhood(g, ref, _sampling(cfg, g.schema, args.subsets))
    for sn in nb.neighbors:
        print(f"{sn.node.id}\t{g.schema.node_name(sn.node.type)}\t{sn.score!r}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .features import FeatureStore
    from .graph import load_snapshot
    from .service import serve
    _run_config(args)
    g = load_snapshot(args.graph)
    store = FeatureStore(args.store)
    srv = serve(g, store, args.bind)
    host, port = srv.address
    print(f"listening\t{host}:{port}", flush=True)
    done = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: done.set())
    done.wait()
    srv.stop()
    return EXIT_OK


def _model_config(cfg: RunConfig, sampling):
    from .model import ModelConfig
    return ModelConfig.from_section(cfg.section("model"), num_slots=sampling.max_neighbors, t_max=cfg["train.t_max"])


def cmd_train(args) -> int:
    from .features import FeatureStore
    from .graph import load_snapshot
    from .infer import EvalSet, write_eval_tsv
    from .model import Model
    from .trainer import TrainConfig, Trainer, prepare_data, read_engagement_tsv, train_loop
    from .world import read_sequences_tsv
    cfg = _run_config(args, {"train.steps": args.steps, "train.seed": args.seed})
    if args.threads == 1:
        cfg.update({"train.prefetch": False})
    g = load_snapshot(args.graph)
    store = FeatureStore(args.store)
    sampling = _sampling(cfg, g.schema)
    tcfg = TrainConfig.from_run_config(cfg)
    sequences = read_sequences_tsv(args.sequences) if args.sequences else []
    engagement = read_engagement_tsv(args.engagement, g.schema) if args.engagement else []
    pin_type = g.schema.node_code("Pin") if "Pin" in g.schema.node_types else min(g.schema.node_types.values())
    data = prepare_data(g, store, sampling, tcfg, sequences, engagement, corpus_type=pin_type)
    model = Model(g.schema, _model_config(cfg, sampling), seed=tcfg.seed)
    trainer = Trainer(model, data, tcfg, cfg.values)
    if args.resume:
        trainer.restore(args.resume)
    if args.eval_set_out:
        q, p = data.eval_pairs
        refs = data.bank.refs
        negs = [refs[r] for r in data.eval_negatives]
        write_eval_tsv(EvalSet([refs[r] for r in q], [refs[r] for r in p], [negs] * len(q)), args.eval_set_out)
    records = train_loop(trainer, args.out, args.metrics)
    _write_config_echo(args.out, cfg)
    losses = [r for r in records if "loss_total" in r]
    last = losses[-1] if losses else {}
    print(f"steps\t{trainer.step_num}\nloss_total\t{last.get('loss_total', float('nan'))!r}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .features import FeatureStore
    from .graph import load_snapshot
    from .infer import batch_infer
    from .schema import NodeRef
    from .trainer import load_model
    import hashlib
    cfg = _run_config(args)
    g = load_snapshot(args.graph)
    store = FeatureStore(args.store)
    model, meta = load_model(args.checkpoint)
    if model.schema.fingerprint() != g.schema.fingerprint():
        raise ValidationError("checkpoint schema does not match the graph schema")
    saved = meta.get("config") or {}
    sampling_cfg = RunConfig({k: v for k, v in saved.items() if k.startswith("sampler.")}) if saved else cfg
    sampling = _sampling(sampling_cfg, g.schema)
    if args.nodes is None:
        # every graph node plus featured nodes the graph does not mention
        nodes = list(g.nodes())
        nodes += sorted((r for r in store.keys() if r not in g), key=NodeRef.sort_key)
    else:
        nodes = []
        for line in Path(args.nodes).read_text().splitlines():
            if line.strip() and not line.startswith("#"):
                i, t = line.split("\t")[:2]
                nodes.append(NodeRef(int(i), _node_type(g.schema, t)))
    info = {"checkpoint_sha256": hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest(),
            "graph_sha256": hashlib.sha256(Path(args.graph).read_bytes()).hexdigest(),
            "config": sampling_cfg.values}
    table = batch_infer(g, store, model, sampling, nodes, workers=args.threads or 1, meta=info)
    table.save(args.out)
    _write_config_echo(args.out, cfg)
    if args.tsv:
        table.write_tsv(args.tsv)
    print(f"embedded\t{len(table)}\nmissing_features\t{table.meta['missing_features']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .infer import EmbeddingTable, evaluate_recall, read_eval_tsv
    from .schema import Schema
    _run_config(args)
    schema = Schema.load(args.schema) if args.schema else None
    table = EmbeddingTable.load(args.table)
    ev = read_eval_tsv(args.eval_set, schema)
    print(f"recall@{args.k}\t{evaluate_recall(table, ev, args.k)!r}")
    return EXIT_OK


COMMANDS = {"synth-data": cmd_synth, "build": cmd_build, "prune": cmd_prune, "sample": cmd_sample,
            "serve": cmd_serve, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise ValidationError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                return COMMANDS[args.command](args)
        return COMMANDS[args.command](args)
    except (ValidationError, NotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (HetrepError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
