"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
Every config key can be given as ``--key`` (underscores or dashes); flags win
over values read from ``--config FILE``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import CONFIG_KEYS, AblationFlags, ConfigError, TrainConfig, apply_overrides, format_config, load_config_file
from .data import SPLITS, DatasetError, GeneratorConfig, generate_dataset, load_dataset, load_prediction, render_overlay
from .harness import Checkpoint, NumericError, evaluate, predict_one, run_ablation, train
from .metrics import build_report, sample_iou

log = logging.getLogger("dqformer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Rows of the component ablation: the full model, then one change each.
DEFAULT_VARIANTS = (
    "",
    "masked_attention=false",
    "background_tokens=3",
    "local_aggregation=conv",
    "local_aggregation=none",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("training config (mirrors config-file keys)")
    group.add_argument("--config", type=Path, help="flat key = value config file")
    group.add_argument("--preset", choices=("desk", "full"), default="desk",
                       help="base values before the file and flags are applied (default: desk)")
    for key in CONFIG_KEYS:
        if key == "seed":
            continue
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="VALUE", default=None)


def _train_config(args, seed_required: bool) -> TrainConfig:
    if seed_required and args.seed is None:
        raise UsageError("--seed is required")
    base = TrainConfig.desk() if args.preset == "desk" else TrainConfig()
    values = load_config_file(args.config) if args.config else {}
    for key in CONFIG_KEYS:
        flag = getattr(args, f"cfg_{key}", None)
        if flag is not None:
            values[key] = flag
    if args.seed is not None:
        values["seed"] = args.seed
    return apply_overrides(base, values)


def _parse_variant(text: str) -> AblationFlags:
    values = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "=" not in part:
            raise UsageError(f"variant entries must be key=value, got {part!r}")
        key, value = (s.strip() for s in part.split("=", 1))
        if CONFIG_KEYS.get(key, (None,))[0] != "ablation":
            raise UsageError(f"not an ablation key: {key!r}")
        values[key] = value
    return apply_overrides(TrainConfig(), values).ablation


def cmd_gen_data(args) -> int:
    try:
        config = GeneratorConfig(
            num_samples=args.num_samples,
            image_size=args.image_size,
            no_anomaly_fraction=args.no_anomaly_fraction,
            universal_prompt_fraction=args.universal_fraction,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    manifest = generate_dataset(config, args.out, args.split)
    print(f"wrote {len(manifest.entries)} samples to {Path(args.out) / args.split}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _train_config(args, seed_required=True)
    config = replace(config, checkpoint_dir=str(args.out))
    dataset = load_dataset(args.data, args.split)
    log.info("training config:\n%s", format_config(config))
    checkpoint = train(config, dataset)
    (Path(args.out) / "config.txt").write_text(format_config(config), encoding="utf-8")
    print(f"final loss {checkpoint.log[-1]['loss']:.5f} after {len(checkpoint.log)} steps; checkpoint in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    report = evaluate(checkpoint, load_dataset(args.data, args.split), args.out)
    _print_summary(report)
    return EXIT_OK


def cmd_predict(args) -> int:
    checkpoint = Checkpoint.load(args.checkpoint)
    result = predict_one(checkpoint, args.image, args.expression, args.out)
    result.pop("mask")
    print(json.dumps(result))
    return EXIT_OK


def cmd_metrics(args) -> int:
    samples = load_dataset(args.data, args.split)
    evals = [sample_iou(load_prediction(s.id, args.pred_dir), s.gt_mask, s.id) for s in samples]
    report = build_report(evals)
    if args.out:
        report.save(args.out)
    _print_summary(report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _train_config(args, seed_required=True)
    variants = [_parse_variant(v) for v in (args.variant or DEFAULT_VARIANTS)]
    train_set = load_dataset(args.data, args.split)
    eval_set = load_dataset(args.data, args.eval_split) if args.eval_split else None
    rows = run_ablation(variants, train_set, base, eval_set, args.out)
    for row in rows:
        print(f"{row['variant']:<28} miou {_fmt(row['miou'])}  giou {_fmt(row['giou'])}")
    return EXIT_OK


def cmd_overlay(args) -> int:
    samples = load_dataset(args.data, args.split)
    if args.id:
        wanted = set(args.id)
        samples = [s for s in samples if s.id in wanted]
        if missing := wanted - {s.id for s in samples}:
            raise DatasetError(f"unknown sample ids: {sorted(missing)}")
    for s in samples:
        render_overlay(s, load_prediction(s.id, args.pred_dir), Path(args.out) / f"{s.id}.png")
    print(f"wrote {len(samples)} overlays to {args.out}")
    return EXIT_OK


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _print_summary(report) -> None:
    pr = "  ".join(f"Pr@{t:.1f} {_fmt(v)}" for t, v in report.pr.items())
    print(f"gIoU {_fmt(report.giou)}  oIoU {_fmt(report.oiou)}  mIoU {_fmt(report.miou)}")
    print(pr or "Pr@X n/a (no anomalous samples)")
    print(f"N-acc {_fmt(report.n_acc)}  T-acc {_fmt(report.t_acc)}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dqformer", description="Referring industrial anomaly segmentation with dual query tokens.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic referring-anomaly dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--num-samples", type=int, default=16)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--no-anomaly-fraction", type=float, default=0.25)
    p.add_argument("--universal-fraction", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write checkpoint.pt")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--out", required=True, type=Path, help="checkpoint directory")
    p.add_argument("--seed", type=int)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes predictions, overlays and report.json")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image for one expression")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--expression", required=True)
    p.add_argument("--out", type=Path, help="directory for the mask and overlay PNGs")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("metrics", help="score a directory of prediction PNGs against a dataset split")
    p.add_argument("--pred-dir", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", type=Path, help="report JSON path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("ablate", help="train and score ablation variants; writes a CSV")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=SPLITS, default="train")
    p.add_argument("--eval-split", choices=SPLITS, help="score on this split (default: the training split)")
    p.add_argument("--out", required=True, type=Path, help="CSV path")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", action="append",
                   help="comma-separated ablation overrides, e.g. 'masked_attention=false'; repeatable")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("overlay", help="render prediction overlays with GT contours")
    p.add_argument("--pred-dir", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--id", action="append", help="restrict to these sample ids; repeatable")
    p.set_defaults(func=cmd_overlay)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"dqformer: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError) as exc:
        print(f"dqformer: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"dqformer: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
