"""Command-line entry point: ``birads-net <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import ManifestError, load_manifest, make_fold_plan
from .evaluation import (
    evaluate_model,
    explain_outputs,
    make_explanation_report,
    render_report_figure,
    write_metrics_table,
)
from .lexicon import LexiconError, MARGIN_SUBTYPES
from .model import CheckpointError, build_model, load_checkpoint, save_checkpoint
from .pipeline import predict, prepare_records
from .preprocess import PreprocessConfig, load_gray
from .training import TrainConfig, run_cross_validation, train_one_fold

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("birads_net")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _bbox(text: str) -> tuple[int, int, int, int]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("bbox must be x0,y0,x1,y1")
    try:
        return tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError("bbox values must be integers") from None


def _split(text: str) -> tuple[float, float]:
    try:
        train, val = (float(p) for p in text.split("/"))
    except ValueError:
        raise argparse.ArgumentTypeError("split must look like 0.85/0.15") from None
    if train <= 0 or val <= 0:
        raise argparse.ArgumentTypeError("split fractions must be positive")
    return train / (train + val), val / (train + val)


def _load_config(args) -> TrainConfig:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def _write_run_manifest(out: Path, command: str, args, config: TrainConfig | None = None, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "version": __version__,
        "arguments": {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items() if k != "func"},
    }
    if config is not None:
        record["config"] = config.to_dict()
        record["seed"] = config.seed
    record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")


def _checkpoint_preprocess(model) -> PreprocessConfig:
    stored = getattr(model, "checkpoint_extra", {}).get("preprocess")
    if stored:
        return PreprocessConfig(**stored)
    return PreprocessConfig(target_size=model.config.input_size)


def cmd_generate(args) -> int:
    from .phantom import generate_dataset

    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {args.out}: {exc}") from None
    manifest = generate_dataset(args.count, args.seed, args.out, size=(args.height, args.width))
    _write_run_manifest(args.out, "generate", args, seed=args.seed)
    print(f"wrote {len(manifest)} phantoms and {args.out / 'manifest.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _load_config(args)
    manifest = load_manifest(args.manifest)
    out = args.out
    _write_run_manifest(out, "train", args, config)
    if args.split is None:
        plan = make_fold_plan(manifest, k=args.folds, val_fraction=args.val_fraction, seed=config.seed)
        plan.save(out / "fold_plan.json")
        result = run_cross_validation(manifest, plan, config, out_dir=out)
        agg = result.aggregate
        print(json.dumps(agg.to_dict(), indent=2))
        return EXIT_OK

    _, val_fraction = args.split
    indices = np.arange(len(manifest))
    classes = manifest.tumor_classes
    rng = np.random.default_rng(config.seed)
    val = np.concatenate(
        [rng.permutation(indices[classes == c])[: max(1, round(val_fraction * np.sum(classes == c)))] for c in (0, 1)]
    )
    train = np.setdiff1d(indices, val)
    data = prepare_records(manifest.records, config.preprocess_config())
    model = build_model(config.model_config(), seed=config.seed)
    model, train_log = train_one_fold(
        model, data.subset(train), data.subset(np.sort(val)), config, log_path=out / "logs" / "train.jsonl"
    )
    save_checkpoint(model, out / "checkpoints" / "model", extra={"preprocess": asdict(config.preprocess_config())})
    report = evaluate_model(model, data.subset(np.sort(val)))
    write_metrics_table([{"split": "validation", **report.to_dict()}], out / "metrics" / "metrics")
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    report = evaluate_model(model, manifest.records, _checkpoint_preprocess(model))
    if args.out:
        _write_run_manifest(args.out, "evaluate", args)
        write_metrics_table([report.to_dict()], args.out / "metrics" / "metrics")
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiments import run_ablation_suite

    config = _load_config(args)
    if args.pretrained:
        config = replace(
            config, model=replace(config.model, backbone=replace(config.model.backbone, pretrained_weights=str(args.pretrained)))
        )
    manifest = load_manifest(args.manifest)
    plan = make_fold_plan(manifest, k=args.folds, val_fraction=args.val_fraction, seed=config.seed)
    _write_run_manifest(args.out, "ablate", args, config)
    plan.save(args.out / "fold_plan.json")
    tables = tuple(args.tables.split(","))
    rows = run_ablation_suite(manifest, plan, config, out_dir=args.out, tables=tables)
    for row in rows:
        print(f"{row['table']:<10} {row['label']:<42} acc={row['tumor_accuracy']:.3f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    data = prepare_records(manifest.records, _checkpoint_preprocess(model))
    outputs = predict(model, data.images)
    rows = []
    for i, record in enumerate(manifest.records):
        rep = explain_outputs(outputs, i)
        row = {
            "image_path": str(record.image_path),
            "tumor_class": rep.tumor_class,
            "malignant_probability": rep.tumor_probabilities["malignant"],
            "likelihood": rep.likelihood,
            "birads_category": rep.birads_category,
        }
        for name, probs in rep.descriptors.items():
            row[name] = max(probs, key=probs.get)
        for name in MARGIN_SUBTYPES:
            if name in rep.margin_subtypes:
                row[f"margin_{name}"] = rep.margin_subtypes[name]
        rows.append(row)
    _write_run_manifest(args.out, "predict", args)
    csv_path, _ = write_metrics_table(rows, args.out / "reports" / "predictions")
    print(f"wrote {len(rows)} predictions to {csv_path}")
    return EXIT_OK


def cmd_report(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not args.image.is_file():
        raise FileNotFoundError(f"image not found: {args.image}")
    image = load_gray(args.image)
    h, w = image.shape
    x0, y0, x1, y1 = args.bbox
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"bbox {args.bbox} outside image bounds: need 0<=x0<x1<={w}, 0<=y0<y1<={h}")
    report = make_explanation_report(model, image, args.bbox, _checkpoint_preprocess(model))
    if args.figure:
        render_report_figure(report, args.figure, image)
    print(report.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="birads-net", description="Explainable multitask breast-ultrasound classifier.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="render a synthetic phantom dataset")
    p.add_argument("--count", type=int, required=True, help="number of phantoms (>= 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--width", type=int, default=192)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train with k-fold cross-validation or a single split")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--config", type=Path, help="TrainConfig as JSON or TOML")
    p.add_argument("--out", type=Path, required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--folds", type=_positive_int, default=5, help="number of CV folds (default 5)")
    group.add_argument("--split", type=_split, help="single train/val split, e.g. 0.85/0.15")
    p.add_argument("--val-fraction", type=float, default=0.15, help="validation share of each training fold")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the component-ablation and branch ladders")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--folds", type=_positive_int, default=5)
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--pretrained", type=Path, help="backbone weight archive directory")
    p.add_argument("--tables", default="components,branches")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="batch predictions for every manifest row")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="explanation report for one image (JSON on stdout)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--bbox", type=_bbox, required=True, help="x0,y0,x1,y1")
    p.add_argument("--figure", type=Path, help="also write a probability-bar PNG")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"birads-net {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ManifestError, LexiconError, CheckpointError, ValueError) as exc:
        print(f"birads-net {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"birads-net {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
