"""Command-line entry point wiring generation, training, evaluation and
corpus analysis into reproducible runs.

Every subcommand resolves its full configuration up front, writes a manifest
into the output directory before any other artifact, runs, then rewrites the
manifest with duration, output listing and dataset content hashes. Exit
codes are a stable contract: 0 success, 1 I/O failure, 2 config/validation
error (malformed inputs included), 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict

from .analyze import (assert_ov_split, build_vocab, fully_seen_ids,
                      novelty_report, read_corpus)
from .autograd import ContractError
from .data import (DataConfig, ParseError, SPLITS, VersionError,
                   generate_dataset, read_dataset, write_dataset)
from .manifest import RunManifest, blob_hash, hash_tree
from .metrics import CSV_HEADER
from .train import DivergenceError, TrainConfig, evaluate_model, train

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

ABLATIONS = {"no-hem": "disable_hem", "no-sgvf": "disable_sgvf",
             "no-cmtr": "disable_cmtr"}


def _load_config(cls, path: str | None):
    """Dataclass config from JSON; unknown fields are an error, not a warning."""
    if path is None:
        return cls()
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    known = set(cls.__dataclass_fields__)
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ContractError(f"unknown config fields: {unknown}")
    return cls(**payload)


def cmd_gen_data(args) -> int:
    cfg = _load_config(DataConfig, args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    man = RunManifest(command="gen-data", config=asdict(cfg), seeds=[cfg.seed],
                      inputs=[args.config] if args.config else [])
    man.write(args.out)
    t0 = time.perf_counter()
    samples, world = generate_dataset(cfg)
    write_dataset(samples, world, args.out)
    man.dataset_hash = hash_tree(args.out)
    man.outputs = sorted(man.dataset_hash)
    man.duration_s = time.perf_counter() - t0
    man.write(args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(TrainConfig, args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.taps is not None:
        cfg.taps = args.taps
    for name in filter(None, (args.ablate or "").split(",")):
        if name not in ABLATIONS:
            raise ContractError(
                f"unknown ablation {name!r}; valid: {', '.join(sorted(ABLATIONS))}")
        setattr(cfg, ABLATIONS[name], True)
    cfg.validate()
    if not os.path.isdir(args.dataset):
        raise FileNotFoundError(f"dataset directory not found: {args.dataset}")
    dataset = read_dataset(args.dataset)
    man = RunManifest(command="train", config=asdict(cfg), seeds=[cfg.seed],
                      inputs=([args.config] if args.config else []) + [args.dataset],
                      dataset_hash=hash_tree(args.dataset))
    man.write(args.out)
    t0 = time.perf_counter()
    _, log = train(cfg, dataset, out_dir=args.out)
    man.outputs = ["checkpoint.json", "checkpoint.bin", "train_log.csv",
                   "metrics.json", "metrics.csv"]
    man.duration_s = time.perf_counter() - t0
    man.write(args.out)
    final = log.test_iid or log.val[-1][1]
    print(f"best val mIoU {log.best_val_miou:.4f} (epoch {log.best_epoch}); "
          f"mIoU {final.miou:.4f} on {'test_iid' if log.test_iid else 'val'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.split not in SPLITS:
        raise ContractError(
            f"unknown split {args.split!r}; valid: {', '.join(SPLITS)}")
    if not os.path.isfile(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    dataset = read_dataset(args.dataset)
    man = RunManifest(command="eval",
                      config={"split": args.split, "checkpoint": args.checkpoint},
                      inputs=[args.checkpoint, args.dataset],
                      dataset_hash=hash_tree(args.dataset))
    man.write(args.out)
    t0 = time.perf_counter()
    report = evaluate_model(args.checkpoint, dataset, args.split)
    payload = {"split": args.split, **report.to_dict()}
    with open(os.path.join(args.out, "metrics.json"), "w",
              encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(args.out, "metrics.csv"), "w",
              encoding="utf-8", newline="\n") as f:
        f.write(CSV_HEADER + "\n" + report.csv_row(args.split) + "\n")
    man.outputs = ["metrics.json", "metrics.csv"]
    man.duration_s = time.perf_counter() - t0
    man.write(args.out)
    print(f"{args.split}: mIoU {report.miou:.4f} over {report.n} samples")
    return EXIT_OK


def cmd_analyze(args) -> int:
    train_corpus = read_corpus(args.train_corpus)
    vocab = build_vocab(train_corpus)
    man = RunManifest(command="analyze",
                      config={"k": args.k, "train_corpus": args.train_corpus},
                      inputs=[args.train_corpus] + list(args.corpus),
                      dataset_hash={os.path.basename(p): blob_hash(p)
                                    for p in [args.train_corpus] + list(args.corpus)})
    man.write(args.out)
    t0 = time.perf_counter()
    sents: list[list[str]] = []
    for path in args.corpus:
        sents.extend(read_corpus(path))
    report = novelty_report(sents, vocab, k=args.k)
    ov = assert_ov_split(sents, vocab)
    payload = {"corpus": list(args.corpus), "train_corpus": args.train_corpus,
               "sentences": len(sents), "train_vocab_size": len(vocab.tokens),
               "ov_split": ov, **report.to_dict()}
    if not ov:
        payload["fully_seen_ids"] = fully_seen_ids(sents, vocab)[:50]
    with open(os.path.join(args.out, "report.json"), "w",
              encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(args.out, "histogram.csv"), "w",
              encoding="utf-8", newline="\n") as f:
        f.write(report.histogram_csv())
    man.outputs = ["report.json", "histogram.csv"]
    man.duration_s = time.perf_counter() - t0
    man.write(args.out)
    print(f"{len(sents)} sentences; fraction_all_seen "
          f"{report.fraction_all_seen:.4f}; ov_split {ov}")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ovground",
        description="Open-vocabulary temporal grounding: data, training, "
                    "evaluation, corpus analysis.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", default=None, help="JSON config path")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("dataset", help="dataset directory from gen-data")
    common(t)
    t.add_argument("--ablate", default=None,
                   help="comma-separated: " + ",".join(sorted(ABLATIONS)))
    t.add_argument("--taps", type=int, default=None,
                   help="number of text-encoder tap levels")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on one split")
    e.add_argument("checkpoint", help="checkpoint.json path")
    e.add_argument("dataset", help="dataset directory")
    common(e)
    e.add_argument("--split", required=True,
                   help="one of: " + ", ".join(SPLITS))
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="vocabulary-novelty report for corpora")
    a.add_argument("corpus", nargs="+",
                   help="test corpus files (JSONL with 'tokens', or plain text)")
    common(a)
    a.add_argument("--train-corpus", required=True,
                   help="corpus defining the training vocabulary")
    a.add_argument("--k", type=int, default=10, help="top-k term list size")
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    try:
        return args.fn(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, ParseError, VersionError, ValueError, KeyError,
            TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())
