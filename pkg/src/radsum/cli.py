"""Command-line entry point: one subcommand per pipeline stage."""

import argparse
import json
import sys

import torch

from . import pipeline
from .config import RunConfig


def build_parser():
    parser = argparse.ArgumentParser(
        prog="radsum",
        description="Two-step report summarization pipeline")
    parser.add_argument("--config", default=None, help="config file path")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE", help="override a dotted config key")
    sub = parser.add_subparsers(dest="command", required=True)
    prep = sub.add_parser("prep", help="filter and normalize a raw JSONL corpus")
    prep.add_argument("input", help="raw reports JSONL")
    sub.add_parser("synth", help="generate the synthetic corpus")
    sub.add_parser("stats", help="corpus statistics table")
    sub.add_parser("split", help="train/val/test manifests")
    sub.add_parser("labels", help="keyword + interleaved label construction")
    sub.add_parser("pretrain-extractor", help="MLE pretraining of the extractors")
    sub.add_parser("pretrain-abstractor", help="pointer-generator pretraining")
    sub.add_parser("train-dimac", help="multi-agent RL fine-tuning")
    summarize = sub.add_parser("summarize", help="extract + abstract a split")
    summarize.add_argument("--split", default="test",
                           choices=("train", "val", "test"))
    sub.add_parser("evaluate", help="score predictions against references")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    torch.set_num_threads(1)  # bit-identical reruns
    try:
        config = RunConfig.from_file(args.config, overrides=args.override,
                                     seed=args.seed)
    except (KeyError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    stages = {
        "synth": pipeline.stage_synth,
        "stats": pipeline.stage_stats,
        "split": pipeline.stage_split,
        "labels": pipeline.stage_labels,
        "pretrain-extractor": pipeline.stage_pretrain_extractor,
        "pretrain-abstractor": pipeline.stage_pretrain_abstractor,
        "train-dimac": pipeline.stage_train_dimac,
        "evaluate": pipeline.stage_evaluate,
    }
    try:
        if args.command == "prep":
            result = pipeline.stage_prep(config, args.input)
        elif args.command == "summarize":
            result = pipeline.stage_summarize(config, split=args.split)
        else:
            result = stages[args.command](config)
    except pipeline.PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
