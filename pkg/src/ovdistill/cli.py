"""Command-line surface: generate-data, train, evaluate, ablate, diagnose-attention."""

import argparse
import dataclasses
import json
import os
import sys

from . import pipeline as pl
from . import world as wd
from .errors import ConfigError, OvdError, ParseError
from .evaluate import emit_plot_data


def _split_overrides(extras):
    """Turn leftover ``--a.b value`` args into (key, value) override pairs."""
    pairs = []
    i = 0
    while i < len(extras):
        arg = extras[i]
        if not arg.startswith("--"):
            raise ConfigError(f"unexpected argument {arg!r}")
        key = arg[2:]
        if "=" in key:
            key, _, value = key.partition("=")
        else:
            if i + 1 >= len(extras):
                raise ConfigError(f"override {arg!r} is missing a value")
            value = extras[i + 1]
            i += 1
        pairs.append((key, value))
        i += 1
    return pairs


def _load_train_config(args, extras):
    overrides = _split_overrides(extras)
    config = pl.load_config(args.config, overrides)
    if getattr(args, "data", None):
        config = dataclasses.replace(config, data_dir=args.data)
    if getattr(args, "out", None):
        config = dataclasses.replace(config, out_dir=args.out)
    return config


def cmd_generate_data(args, extras):
    payload = dataclasses.asdict(wd.WorldConfig())
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            payload.update(json.load(fh))
    for key, value in _split_overrides(extras):
        if key not in payload:
            raise ConfigError(f"unknown world config key {key!r}")
        payload[key] = pl._coerce(value, payload[key])
    for name in ("image_size", "base_classes", "novel_classes"):
        payload[name] = tuple(payload[name])
    config = wd.WorldConfig(**payload)
    dirs = wd.build_corpus(config, args.out)
    print(json.dumps({"out": args.out, "splits": dirs}))
    return 0


def cmd_train(args, extras):
    config = _load_train_config(args, extras)
    if args.stage == "baseline":
        ckpt = pl.run_baseline(config)
    elif args.stage == "1":
        ckpt = pl.run_stage1(config)
    else:
        if not args.init:
            raise ConfigError("train --stage 2 needs --init with a stage-1 checkpoint")
        ckpt = pl.run_stage2(config, args.init)
    print(json.dumps({"checkpoint": ckpt}))
    return 0


def cmd_evaluate(args, extras):
    config = _load_train_config(args, extras)
    report, _ = pl.evaluate_checkpoint(config, args.checkpoint)
    line = report.to_json()
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(line + "\n")
    print(line)
    return 0


def cmd_ablate(args, extras):
    config = _load_train_config(args, extras)
    rows = args.rows.split(",") if args.rows else None
    modes = args.caption_modes.split(",") if args.caption_modes else ()
    out_path = args.out_table or os.path.join(config.out_dir, "ablation.tsv")
    results = pl.run_ablation_grid(
        config, rows=rows, caption_modes=modes,
        noise_removal_pair=args.noise_pair, out_path=out_path,
    )
    print(json.dumps({"table": out_path, "rows": results}, default=float))
    return 0


def cmd_diagnose_attention(args, extras):
    config = _load_train_config(args, extras)
    report, diagnostics = pl.evaluate_checkpoint(config, args.checkpoint)
    path = emit_plot_data(report, diagnostics or [], args.out)
    print(json.dumps({"attention_rows": path}))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ovdistill",
        description="Synthetic open-vocabulary detection with attention distillation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="build the synthetic corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="world config JSON")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=("baseline", "1", "2"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="train config JSON")
    p.add_argument("--init", default=None, help="stage-1 checkpoint for --stage 2")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="AP50 and teacher metrics for a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the loss/caption/noise ablation grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--rows", default=None, help="comma-separated grid row names")
    p.add_argument("--caption-modes", default=None)
    p.add_argument("--noise-pair", action="store_true")
    p.add_argument("--out-table", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("diagnose-attention", help="dump teacher attention tables")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_diagnose_attention)
    return parser


EXIT_CODES = {
    ConfigError: 2,
    ParseError: 3,
}


def main(argv=None):
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.func(args, extras)
    except OvdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(type(exc), 1)
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
