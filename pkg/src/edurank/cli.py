"""Command line entry point: ``edurank {prepare,train,retrieve,evaluate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import (
    EXIT_INPUT,
    PipelineError,
    cmd_evaluate,
    cmd_prepare,
    cmd_retrieve,
    cmd_train,
    load_config,
)
from .truncation import VARIANTS


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--budget", type=int, help="token budget of the assembled input")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--few-shot", type=float, metavar="FRACTION", help="train on a seeded fraction of the training sets")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="edurank", description="EDU-level filtering and document ranking for multi-document inputs.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="segment corpora and build oracle labels")
    train = sub.add_parser("train", parents=[common], help="EM training with checkpoint selection on validation NDCG@3")
    train.add_argument("--resume", metavar="CHECKPOINT", help="continue from a last-epoch checkpoint")
    for name, text in (("retrieve", "score sets and write truncation plans"), ("evaluate", "metrics for the model, baselines and ablations")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", metavar="PATH", help="defaults to <out>/train/checkpoint_best.zip")
    return parser


def overrides_from(args: argparse.Namespace) -> dict:
    out: dict = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["out"] = args.out
    if args.few_shot is not None:
        out["few_shot"] = args.few_shot
    trunc = {}
    if args.budget is not None:
        trunc["budget"] = args.budget
    if args.variant is not None:
        trunc["variant"] = args.variant
    if trunc:
        out["truncation"] = trunc
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides_from(args))
        if args.command == "prepare":
            result = cmd_prepare(cfg)
        elif args.command == "train":
            result = cmd_train(cfg, resume=args.resume)
        elif args.command == "retrieve":
            result = cmd_retrieve(cfg, args.checkpoint)
        else:
            result = cmd_evaluate(cfg, args.checkpoint)
    except PipelineError as exc:
        print(f"edurank {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError) as exc:
        print(f"edurank {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(result, sort_keys=True, indent=2, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
