"""Command-line entry point: ``gmlm {synth,train,eval,dump-embeddings}``.

Exit codes: 0 success, 2 validation or argument error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import ValidationError
from .experiment import RunConfig, run_experiment
from .graph import SPLIT_NAMES, SplitAssignment, add_reverse_relations, generate_synthetic, load_graph, save_graph
from .model import load_checkpoint
from .tensor import no_grad
from .text import load_precomputed_embeddings
from .training import evaluate

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _heterophily(value: str) -> float:
    h = float(value)
    if not 0.0 <= h <= 1.0:
        raise argparse.ArgumentTypeError(f"heterophily must lie in [0, 1], got {value}")
    return h


def _seed_list(value: str) -> list[int]:
    try:
        if ".." in value:
            lo, hi = value.split("..")
            return list(range(int(lo), int(hi) + 1))
        return [int(v) for v in value.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {value!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmlm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic text graph")
    p.add_argument("--nodes", type=int, default=200)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--heterophily", type=_heterophily, default=0.8)
    p.add_argument("--vocab", type=int, default=12, help="words per class")
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--avg-degree", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="pretrain and fine-tune over one or more seeds")
    p.add_argument("--config", required=True)
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int)
    seeds.add_argument("--seeds", type=_seed_list, help="comma list or LO..HI")
    p.add_argument("--skip-pretrain", action="store_true")
    p.add_argument("--skip-finetune", action="store_true")
    p.add_argument("--workers", type=int)
    p.add_argument("--out")

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--split", choices=sorted(SPLIT_NAMES), required=True)
    p.add_argument("--splits", help="split file; defaults to the split stored in the checkpoint")
    p.add_argument("--embeddings", help="precomputed text embeddings (overrides the checkpoint's path)")
    p.add_argument("--out")

    p = sub.add_parser("dump-embeddings", help="write node embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--which", choices=("gnn", "text", "fused"), required=True)
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    return parser


def cmd_synth(args) -> int:
    g = generate_synthetic(args.nodes, args.classes, args.heterophily, args.vocab, args.seed,
                           feature_dim=args.feature_dim, avg_degree=args.avg_degree)
    save_graph(g, args.out)
    print(json.dumps({"nodes": g.num_nodes, "edges": len(g.edges), "classes": g.num_classes,
                      "heterophily": round(g.edge_heterophily(), 6)}))
    return EXIT_OK


def cmd_train(args) -> int:
    config_path = Path(args.config)
    cfg = RunConfig.load(config_path)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.skip_pretrain:
        cfg.skip_pretrain = True
    if args.skip_finetune:
        cfg.skip_finetune = True
    if args.workers is not None:
        cfg.workers = args.workers
    if args.out is not None:
        cfg.out = args.out
    summary = run_experiment(cfg, base_dir=config_path.parent)
    print(json.dumps({k: v for k, v in summary.items() if k != "per_seed"}))
    return EXIT_OK


def _load_for_inference(args):
    model, meta = load_checkpoint(args.checkpoint)
    g = load_graph(args.graph)
    if meta.get("reverse_relations") and g.num_relations * 2 == model.config.num_relations:
        g = add_reverse_relations(g)
    model.check_graph(g)
    text_matrix = None
    if model.config.text_source == "precomputed-file":
        path = args.embeddings or meta.get("embeddings")
        if path is None:
            raise ValidationError("checkpoint uses precomputed embeddings; pass --embeddings")
        text_matrix = load_precomputed_embeddings(path, g.num_nodes)
    return model, meta, g, model.prepare(g, text_matrix)


def cmd_eval(args) -> int:
    model, meta, g, inputs = _load_for_inference(args)
    if args.splits:
        splits = SplitAssignment.load(args.splits)
    elif "splits" in meta:
        splits = SplitAssignment.from_json(meta["splits"])
    else:
        raise ValidationError("no split stored in checkpoint; pass --splits")
    if len(splits.assignment) != g.num_nodes:
        raise ValidationError(f"split covers {len(splits.assignment)} nodes, graph has {g.num_nodes}")
    acc, f1 = evaluate(model, inputs, g.labels, splits.nodes(args.split))
    report = {"split": args.split, "accuracy": acc, "macro_f1": f1}
    text = json.dumps(report)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    model, _, g, inputs = _load_for_inference(args)
    with no_grad():
        out = model.forward(inputs, train=False)
    matrix = {"gnn": out.graph_embedding, "text": out.text_embedding, "fused": out.fused}[args.which].data
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "label"] + [f"e{k}" for k in range(matrix.shape[1])])
        for i, row in enumerate(matrix):
            w.writerow([i, int(g.labels[i])] + [repr(float(v)) for v in row])
    print(json.dumps({"which": args.which, "rows": matrix.shape[0], "width": matrix.shape[1]}))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "dump-embeddings": cmd_dump_embeddings}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
