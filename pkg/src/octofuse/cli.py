"""``octofuse`` command line: generate-data, train, eval, compare, report.

Exit codes: 0 success, 1 bad input or configuration, 2 a training cell failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .data import generate_synthetic, parse_polarity, read_dataset, write_dataset
from .errors import OctofuseError, TrainingError
from .fusion import FusionStrategy, ModelSpec
from .harness import (
    DEFAULT_BACKBONES,
    ExperimentConfig,
    compare_fusion,
    load_report,
    render_report,
    run_experiment,
)
from .nn_blocks import ParameterSet
from .training import PRESETS, TrainConfig, evaluate, train_model, write_loss_curve

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2


def _dims(text: str) -> tuple[int, int, int]:
    try:
        d, h, w = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--dims wants D,H,W, got {text!r}") from None
    return d, h, w


def _pair(kind):
    def parse(text: str):
        try:
            lo, hi = (kind(x) for x in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
        return lo, hi

    return parse


def _train_config(args) -> TrainConfig:
    overrides = {k: getattr(args, k) for k in ("lr0", "epochs", "decay_every", "batch_size", "seed", "precision", "max_steps")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return TrainConfig.from_dict({"preset": args.preset, **overrides})


# -- commands -------------------------------------------------------------------


def cmd_generate(args) -> int:
    polarity = parse_polarity(args.polarity) if args.polarity else None
    vols = generate_synthetic(
        args.seed,
        args.volumes,
        args.modalities,
        args.dims,
        lesion_count=args.lesion_count,
        lesion_radius=args.lesion_radius,
        noise_sigma=args.noise,
        polarity=polarity,
        workers=args.workers,
    )
    paths = write_dataset(args.out, vols)
    print(f"wrote {len(paths)} volumes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    train_set = read_dataset(args.data)
    val_set = read_dataset(args.val) if args.val else []
    spec = ModelSpec(
        DEFAULT_BACKBONES[args.backbone],
        train_set[0].n_modalities,
        FusionStrategy.parse(args.strategy),
        n_classes=train_set[0].n_classes,
        loss=args.loss,
    )
    config = _train_config(args)
    try:
        result = train_model(spec, train_set, val_set, config)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    result.save(args.out, spec, config)
    if args.loss_curve:
        write_loss_curve(args.loss_curve, result.loss_curve)
    print(f"saved {args.out}: {result.steps} steps, best val Dice {result.val_dice:.4f} at epoch {result.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    meta, arrays = load_checkpoint(args.checkpoint)
    spec = ModelSpec.from_dict(meta["model_spec"])
    volumes = read_dataset(args.data)
    scores = evaluate(spec, ParameterSet.from_state_dict(arrays), volumes)
    for vol, row in zip(volumes, scores):
        print(f"{vol.volume_id}\t" + "\t".join(f"{100 * s:.2f}" for s in row))
    print(f"mean\t{100 * float(np.mean(scores)):.2f}")
    return EXIT_OK


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    if getattr(args, "out", None):
        config.output_dir = args.out
    return config


def cmd_compare(args) -> int:
    summary = compare_fusion(_load_config(args), family=args.family)
    print(summary.to_markdown(), end="")
    return EXIT_FAILED if summary.report.any_failed else EXIT_OK


def cmd_report(args) -> int:
    if args.results:
        report = load_report(args.results)
    else:
        report = run_experiment(_load_config(args))
    print(render_report(report, format=args.format, style=args.style), end="")
    if args.json:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_FAILED if report.any_failed else EXIT_OK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="octofuse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-job progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic multi-modal dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--volumes", type=int, default=20)
    g.add_argument("--modalities", type=int, default=4)
    g.add_argument("--dims", type=_dims, default=(4, 16, 16), help="D,H,W")
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--polarity", default=None, help='per-modality lesion contrast, e.g. "+,-,+,-"')
    g.add_argument("--lesion-count", type=_pair(int), default=(1, 3))
    g.add_argument("--lesion-radius", type=_pair(float), default=(1.5, 4.0))
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model and save a checkpoint")
    t.add_argument("--data", required=True, help="directory of .ommv training volumes")
    t.add_argument("--val", help="directory of .ommv validation volumes")
    t.add_argument("--strategy", default="octopus", help="single:I | early | late | octopus | octopus+ds")
    t.add_argument("--backbone", default="densenet", choices=sorted(DEFAULT_BACKBONES))
    t.add_argument("--loss", default="ce", choices=["ce", "dice"])
    t.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    t.add_argument("--lr0", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--decay-every", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=["f32", "f64"])
    t.add_argument("--loss-curve", help="write epoch,step,loss,lr CSV here")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="volumetric Dice of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="single vs early vs late vs octopus (± deep supervision)")
    c.add_argument("--config", required=True, help="YAML experiment config")
    c.add_argument("--family", default=None, help="backbone family (default: first cell's)")
    c.add_argument("--out", help="results directory (raw.csv, report.json)")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="run a config's cells, or re-render saved results")
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--config")
    src.add_argument("--results", help="directory holding raw.csv and report.json")
    r.add_argument("--out", help="results directory when running --config")
    r.add_argument("--format", default="markdown", choices=["markdown", "csv"])
    r.add_argument("--style", default="backbones", choices=["backbones", "classes"])
    r.add_argument("--json", action="store_true", help="also print the report as JSON")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (OctofuseError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
