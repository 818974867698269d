"""Command line entry point: generate, train, eval, answer, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys

ERROR_PREFIX = "error:"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("kgquery")


def _parse_counts(text):
    """``10`` (every type), ``1p=10,2in=5``, or a JSON file of ``{type: n}`` / ``{split: {type: n}}``."""
    if os.path.isfile(text):
        with open(text, encoding="utf-8") as f:
            return json.load(f)
    from .query import QUERY_TYPES

    text = text.strip()
    if text.isdigit():
        return {t: int(text) for t in QUERY_TYPES}
    counts = {}
    for part in text.split(","):
        name, sep, n = part.partition("=")
        if not sep or not n.strip().lstrip("-").isdigit():
            raise ValueError(f"bad count entry {part!r}; expected TYPE=N")
        counts[name.strip()] = int(n)
    return counts


def _load_data(data_dir):
    from .graph import load_splits

    manifest = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest.json in dataset directory {data_dir!r}")
    return load_splits(manifest)


def _read_split(data_dir, splits, split):
    from .bench import read_dataset

    path = os.path.join(data_dir, f"{split}.jsonl")
    if not os.path.isfile(path):
        raise FileNotFoundError(f"missing dataset file {path!r}")
    # queries of every split are written with the shared vocabulary
    return read_dataset(path, splits.test, split)


def _projector(args):
    from .gnn import NeuralProjector, load_checkpoint
    from .symbolic import SymbolicProjector

    if args.symbolic and args.checkpoint:
        raise ValueError("--symbolic and --checkpoint are mutually exclusive")
    if args.symbolic:
        return SymbolicProjector()
    if not args.checkpoint:
        raise ValueError("one of --symbolic or --checkpoint is required")
    params, _ = load_checkpoint(args.checkpoint)
    return NeuralProjector(params)


def cmd_generate(args):
    from .bench import generate_dataset, statistics_table, write_dataset
    from .graph import load_splits

    splits = load_splits(args.manifest)
    counts = _parse_counts(args.counts)
    dataset = generate_dataset(splits, counts, max_answers=args.max_answers, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    manifest = {}
    root = os.path.dirname(os.path.abspath(args.manifest))
    with open(args.manifest, encoding="utf-8") as f:
        source = json.load(f)
    for split in ("train", "valid", "test"):
        name = f"{split}.txt"
        src = os.path.join(root, source[split])
        if os.path.abspath(src) != os.path.abspath(os.path.join(args.out, name)):
            shutil.copyfile(src, os.path.join(args.out, name))
        manifest[split] = name
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for split, samples in dataset.items():
        write_dataset(samples, os.path.join(args.out, f"{split}.jsonl"), splits.test)
    table = statistics_table(dataset)
    with open(os.path.join(args.out, "stats.md"), "w", encoding="utf-8") as f:
        f.write(table)
    print(table, end="")
    return 0


def cmd_train(args):
    from .bench import attach_usage
    from .gnn import GnnConfig, init_params, load_checkpoint
    from .query import TRAINABLE_TYPES
    from .train import TrainConfig, query_mrr, train

    splits = _load_data(args.data)
    samples = [s for s in _read_split(args.data, splits, "train") if s.qtype in TRAINABLE_TYPES]
    if not samples:
        raise ValueError("the train split holds no queries of a trainable type")
    attach_usage(samples, splits.train)

    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {"dropout_p": args.dropout_p, "learning_rate": args.learning_rate,
                 "batch_size": args.batch_size, "iterations": args.iterations,
                 "adversarial_temperature": args.adversarial_temperature,
                 "sample_weighting": args.sample_weighting}
    data = {k: v for k, v in vars(config).items()}
    data.update({k: v for k, v in overrides.items() if v is not None})
    data["seed"] = args.seed
    if args.no_pair_inverses:
        data["pair_inverses"] = False
    if args.no_gating:
        data["gradient_gating"] = False
    config = TrainConfig(**data)

    if args.init:
        params, _ = load_checkpoint(args.init)
    else:
        gcfg = GnnConfig(num_layers=args.num_layers, hidden_dim=args.hidden_dim)
        params = init_params(gcfg, splits.train.num_relations, seed=args.seed)

    valid_fn = None
    valid_path = os.path.join(args.data, "valid.jsonl")
    if args.valid_every and os.path.isfile(valid_path):
        valid = [s for s in _read_split(args.data, splits, "valid") if s.hard]
        if valid:
            def valid_fn(p):
                return query_mrr(valid, p, splits.train, answers="hard")

    log_path = args.log or os.path.splitext(args.out)[0] + ".csv"
    result = train(samples, params, config, splits.train, log_path=log_path,
                   checkpoint_path=args.out, checkpoint_every=args.checkpoint_every,
                   valid_fn=valid_fn, valid_every=args.valid_every)
    final = result.losses[-1] if result.losses else float("nan")
    train_mrr = query_mrr(samples, result.params, splits.train, answers="all")
    print(f"steps {result.opt_state.step}")
    print(f"final loss {final!r}")
    print(f"training mrr {train_mrr:.6f}")
    return 0


def cmd_eval(args):
    from .bench import evaluate, observed_graph
    from .train import predict

    projector = _projector(args)
    splits = _load_data(args.data)
    samples = _read_split(args.data, splits, args.split)
    if not samples:
        raise ValueError(f"the {args.split} split is empty")
    if args.split == "train" or not any(s.hard for s in samples):
        raise ValueError(f"the {args.split} split has no hard answers to evaluate; "
                         "its evaluation graph equals its observed graph")
    preds = predict(samples, projector, observed_graph(splits, args.split))
    report = evaluate(samples, preds)
    base = args.out
    if os.path.dirname(base):
        os.makedirs(os.path.dirname(base), exist_ok=True)
    with open(base + ".json", "w", encoding="utf-8") as f:
        f.write(report.to_json())
    with open(base + ".md", "w", encoding="utf-8") as f:
        f.write(report.to_markdown())
    print(report.to_markdown(), end="")
    return 0


def cmd_answer(args):
    from . import fuzzy
    from .graph import load_splits, read_triples
    from .query import compile_postfix, parse_query
    from .vm import execute

    projector = _projector(args)
    if args.graph.endswith(".json"):
        graph = load_splits(args.graph)[args.split]
    else:
        graph = read_triples(args.graph)
    ast = parse_query(args.query, graph)
    answer, _ = execute(compile_postfix(ast), projector, graph.full_view())
    for e, p in fuzzy.top_k(answer, args.k, args.min_prob):
        print(f"{graph.entity_names[e]}\t{p:.6f}")
    return 0


def cmd_inspect(args):
    from .bench import inspect, observed_graph
    from .vm import execute

    projector = _projector(args)
    splits = _load_data(args.data)
    samples = _read_split(args.data, splits, args.split)
    if not 0 <= args.index < len(samples):
        raise IndexError(f"sample index {args.index} out of range for {len(samples)} {args.split} samples")
    sample = samples[args.index]
    _, trace = execute(sample.program, projector, observed_graph(splits, args.split).full_view(),
                       capture=True)
    print(inspect(sample, trace, splits, min_prob=args.min_prob), end="")
    return 0


def _add_projector_flags(p):
    p.add_argument("--checkpoint", help="neural projector checkpoint file")
    p.add_argument("--symbolic", action="store_true", help="use exact graph traversal instead of a checkpoint")


def build_parser():
    parser = argparse.ArgumentParser(prog="kgquery", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    parser.add_argument("--threads", type=int, default=None,
                        help="numeric library threads (default: library default)")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample query datasets from graph splits")
    p.add_argument("--manifest", required=True, help="JSON manifest mapping train/valid/test to triple files")
    p.add_argument("--counts", required=True,
                   help="N per type, TYPE=N,... or a JSON file ({type: n} or {split: {type: n}})")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--max-answers", type=int, default=100, help="reject queries with more answers")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the neural projector")
    p.add_argument("--data", required=True, help="dataset directory written by generate")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", help="training config JSON (flags override it)")
    p.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    p.add_argument("--log", help="CSV loss log (default: checkpoint path with .csv)")
    p.add_argument("--dropout-p", type=float, help="traversal dropout probability (default 0.25)")
    p.add_argument("--learning-rate", type=float, help="Adam step size (default 5e-3)")
    p.add_argument("--batch-size", type=int, help="queries per step (default 192)")
    p.add_argument("--iterations", type=int, help="optimizer steps (default 10000)")
    p.add_argument("--adversarial-temperature", type=float,
                   help="enable self-adversarial negative weighting with this temperature")
    p.add_argument("--sample-weighting", choices=["uniform-per-query", "uniform-per-answer"],
                   help="how batch losses are averaged")
    p.add_argument("--no-pair-inverses", action="store_true", help="do not drop inverse twins of dropped edges")
    p.add_argument("--no-gating", action="store_true", help="backpropagate through whole projection chains")
    p.add_argument("--hidden-dim", type=int, default=32, help="embedding width of a fresh model")
    p.add_argument("--num-layers", type=int, default=4, help="message passing layers of a fresh model")
    p.add_argument("--checkpoint-every", type=int, default=0, help="write the checkpoint every N steps")
    p.add_argument("--valid-every", type=int, default=0, help="log validation MRR every N steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="filtered ranking and cardinality metrics")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"], help="dataset split")
    p.add_argument("--out", required=True, help="output path prefix; writes PREFIX.json and PREFIX.md")
    _add_projector_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("answer", help="rank entities for one query")
    p.add_argument("query", help='s-expression, e.g. "(P rel (E entity))"')
    p.add_argument("--graph", required=True, help="triple file, or a JSON manifest with --split")
    p.add_argument("--split", default="train", choices=["train", "valid", "test"],
                   help="graph split when --graph is a manifest")
    p.add_argument("-k", type=int, default=10, help="number of entities to print")
    p.add_argument("--min-prob", type=float, default=0.0, help="hide entities below this probability")
    _add_projector_flags(p)
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("inspect", help="per-node easy/hard/false-positive report for one sample")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"], help="dataset split")
    p.add_argument("--index", type=int, required=True, help="sample index within the split")
    p.add_argument("--min-prob", type=float, default=0.1, help="hide entities below this probability")
    _add_projector_flags(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print(f"{ERROR_PREFIX} --threads must be >= 1", file=sys.stderr)
            return 2
        # only effective before the numeric libraries start their pools
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, IndexError, ArithmeticError, RuntimeError) as e:
        msg = str(e) if not isinstance(e, KeyError) or e.__class__ is not KeyError else f"missing key {e}"
        print(f"{ERROR_PREFIX} {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
