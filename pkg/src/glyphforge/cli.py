"""Command-line entry points.

Subcommands: corpus-gen, train-recognizer, train-skeleton, train-fontgen,
eval, ablate, dump-attention.  Exit codes: 0 success, 2 configuration
errors, 3 divergence or evaluation failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .evalcli import (
    MissingSplit,
    Pipeline,
    UnknownSample,
    dump_attention,
    run_ablation,
    run_eval,
)
from .fontgen import CoverageImpossible
from .recognizer import DecodeOverrun
from .synthcorpus import (
    SPLITS,
    ConfigInfeasible,
    Corpus,
    CorpusConfig,
    build_corpus,
    load_config,
)
from .trainkit import DivergenceDetected, TrainConfig, load_train_config, train_stage

_RUNTIME_ERRORS = (
    DivergenceDetected,
    MissingSplit,
    UnknownSample,
    CoverageImpossible,
    DecodeOverrun,
)
_CONFIG_ERRORS = (ConfigInfeasible, FileNotFoundError, ValueError, KeyError)


def _add_common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glyphforge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corpus-gen", help="build the procedural glyph corpus")
    _add_common(p)

    for stage in ("recognizer", "skeleton", "fontgen"):
        p = sub.add_parser(f"train-{stage}", help=f"train the {stage} stage")
        _add_common(p)
        p.add_argument("--corpus", required=True)
        p.add_argument("--steps", type=int, help="override the step budget")
        if stage in ("skeleton", "fontgen"):
            p.add_argument("--recognizer", required=True, help="recognizer checkpoint")
        if stage == "fontgen":
            p.add_argument("--skeleton", required=True, help="skeleton checkpoint")

    p = sub.add_parser("eval", help="evaluate checkpoints per split")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--skeleton")
    p.add_argument("--recognizer")
    p.add_argument("--fontgen")
    p.add_argument("--splits", default=",".join(SPLITS))
    p.add_argument("--max-samples", type=int)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--variants", required=True, help="comma-separated variant names")
    p.add_argument("--recognizer")
    p.add_argument("--skeleton")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("dump-attention", help="write attention heatmaps for a sample")
    _add_common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--skeleton", required=True)
    p.add_argument("--recognizer", required=True)
    p.add_argument("--fontgen", required=True)
    p.add_argument("--sample", required=True)
    return parser


def _train_config(args) -> TrainConfig:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.steps = args.steps
    return cfg


def _dispatch(args) -> int:
    if args.command == "corpus-gen":
        cfg = load_config(args.config) if args.config else CorpusConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        corpus = build_corpus(cfg, args.out)
        print(f"corpus: {len(corpus.manifest)} records in {args.out}")
        return 0

    if args.command.startswith("train-"):
        stage = args.command.removeprefix("train-")
        cfg = _train_config(args)
        corpus = Corpus(args.corpus)
        paths = train_stage(
            stage,
            cfg,
            corpus,
            args.out,
            recognizer_ckpt=getattr(args, "recognizer", None),
            skeleton_ckpt=getattr(args, "skeleton", None),
        )
        for name, path in paths.items():
            print(f"{name}: {path}")
        return 0

    if args.command == "eval":
        corpus = Corpus(args.corpus)
        pipeline = Pipeline.from_checkpoints(
            corpus,
            skeleton_ckpt=args.skeleton,
            recognizer_ckpt=args.recognizer,
            fontgen_ckpt=args.fontgen,
            seed=args.seed or 0,
        )
        report = run_eval(
            corpus,
            pipeline,
            [s for s in args.splits.split(",") if s],
            out_dir=args.out,
            max_samples=args.max_samples,
        )
        print(report.summary())
        return 0

    if args.command == "ablate":
        corpus = Corpus(args.corpus)
        cfg = _train_config(args)
        report = run_ablation(
            corpus,
            [v for v in args.variants.split(",") if v],
            cfg,
            args.out,
            recognizer_ckpt=args.recognizer,
            skeleton_ckpt=args.skeleton,
        )
        print(report.summary())
        return 0

    if args.command == "dump-attention":
        corpus = Corpus(args.corpus)
        pipeline = Pipeline.from_checkpoints(
            corpus,
            skeleton_ckpt=args.skeleton,
            recognizer_ckpt=args.recognizer,
            fontgen_ckpt=args.fontgen,
            seed=args.seed or 0,
        )
        for path in dump_attention(corpus, pipeline, args.sample, args.out):
            print(path)
        return 0

    raise ValueError(f"unhandled command {args.command}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except _RUNTIME_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except _CONFIG_ERRORS as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
