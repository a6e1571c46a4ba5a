#!/usr/bin/env python3

import sys
import argparse
import configparser

from sources.commands import (SWEEP_VALUES, cmd_ablate, cmd_eval, cmd_posviz, cmd_sample, cmd_sweep,
                              cmd_train)
from sources.errors import RPE2DError
from sources.utility import pretty_print

import warnings
warnings.filterwarnings("ignore")

config = configparser.ConfigParser()
config.read('config.ini')


def default(section: str, key: str, fallback: str) -> str:
    return config.get(section, key, fallback=fallback)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rpe2d", description="Randomized 2-D positions for diffusion transformers")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model from a config file")
    train.add_argument("--config", default="config.ini")
    train.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key, repeatable")
    train.add_argument("--quiet", action="store_true")

    sample = sub.add_parser("sample", help="sample images from a checkpoint")
    sample.add_argument("checkpoint")
    sample.add_argument("--out", required=True)
    sample.add_argument("--resolution", type=int, default=int(default('sample', 'resolution', '32')))
    sample.add_argument("--count", type=int, default=int(default('sample', 'count', '64')),
                        help="images per class")
    sample.add_argument("--steps", type=int, default=int(default('sample', 'steps', '250')))
    sample.add_argument("--cfg-scale", type=float, default=float(default('sample', 'cfg_scale', '4.0')))
    sample.add_argument("--seed", type=int, default=int(default('sample', 'seed', '0')))
    sample.add_argument("--sampler", choices=("ancestral", "ddim"), default=default('sample', 'sampler', 'ancestral'))
    sample.add_argument("--classes", type=int, nargs="+", default=None)
    sample.add_argument("--shift", action=argparse.BooleanOptionalAction,
                        default=config.getboolean('sample', 'shift', fallback=False))
    sample.add_argument("--attn-scale", action=argparse.BooleanOptionalAction,
                        default=config.getboolean('sample', 'attn_scale', fallback=False))

    evaluate = sub.add_parser("eval", help="evaluate a sample directory with a manifest")
    evaluate.add_argument("sample_dir")
    evaluate.add_argument("--report", default=None)

    posviz = sub.add_parser("posviz", help="render a position layout")
    posviz.add_argument("--variant", choices=("grid", "equispaced", "naive"), default="grid")
    posviz.add_argument("--h", type=int, default=8)
    posviz.add_argument("--w", type=int, default=8)
    posviz.add_argument("--max-h", type=int, default=32)
    posviz.add_argument("--max-w", type=int, default=32)
    posviz.add_argument("--seed", type=int, default=0)
    posviz.add_argument("--test", action="store_true", help="show the deterministic test-time layout")
    posviz.add_argument("--pgm", default=None)

    sweep = sub.add_parser("sweep", help="max-position sweep: train, sample and evaluate per H = W")
    sweep.add_argument("--config", default="config.ini")
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--values", type=int, nargs="+", default=list(SWEEP_VALUES))

    ablate = sub.add_parser("ablate", help="ext baseline and rpe2d component ablation")
    ablate.add_argument("--config", default="config.ini")
    ablate.add_argument("--out", required=True)
    return parser


def parse_overrides(items) -> dict:
    changes = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise RPE2DError(f"override '{item}' is not of the form section.key=value")
        changes[key.strip()] = value.strip()
    return changes


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            cmd_train(args.config, parse_overrides(args.set), progress=not args.quiet)
        elif args.command == "sample":
            entries = cmd_sample(args.checkpoint, args.resolution, args.count, args.out, seed=args.seed,
                                 cfg_scale=args.cfg_scale, use_shift=args.shift, use_attn_scale=args.attn_scale,
                                 steps=args.steps, method=args.sampler, classes=args.classes)
            pretty_print(f"Wrote {len(entries)} images to {args.out}", color="success")
        elif args.command == "eval":
            report = cmd_eval(args.sample_dir, args.report)
            pretty_print(report.to_tsv(), color="output")
        elif args.command == "posviz":
            print(cmd_posviz(args.variant, args.h, args.w, args.max_h, args.max_w, seed=args.seed,
                             test=args.test, out_path=args.pgm))
        elif args.command == "sweep":
            reports = cmd_sweep(args.config, args.out, values=args.values)
            for value, report in reports.items():
                pretty_print(f"H=W={value}: {report}", color="output")
        elif args.command == "ablate":
            result = cmd_ablate(args.config, args.out)
            color = "success" if result.directional else "warning"
            pretty_print(f"rpe2d beats ext: {result.rpe2d_beats_ext}, improving components: "
                         f"{result.improving_components}/3", color=color)
    except RPE2DError as e:
        pretty_print(f"Error: {e}", color="failure")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
