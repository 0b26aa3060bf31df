"""Ablation ladders: progressive component removal and the multitask branch ladder."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path

from .dataset import DatasetManifest, FoldPlan
from .evaluation import write_metrics_table
from .model import ALL_BRANCHES
from .pipeline import PreparedSet, prepare_records
from .training import TrainConfig, run_cross_validation

log = logging.getLogger(__name__)

# Each step is applied on top of the previous one.
COMPONENT_ABLATION = (
    ("BI-RADS-Net", {}),
    ("Without Augmentation", {"use_augmentation": False}),
    ("Without Pretraining", {"use_pretrained": False}),
    ("Single Channel Images", {"use_three_channels": False}),
    ("Without Image Cropping", {"use_crop": False}),
)

BRANCH_LADDER = (
    ("Single Branch Tumor Class", ()),
    ("+ Margin", ("margin",)),
    ("+ Orientation + Shape", ("margin", "orientation", "shape")),
    ("+ Echo pattern + Post. feat.", ("margin", "orientation", "shape", "echo", "posterior")),
    ("+ Likelihood of Malignancy = BI-RADS-Net", ALL_BRANCHES),
)


def component_configs(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    out, config = [], base
    for label, change in COMPONENT_ABLATION:
        config = replace(config, **change)
        out.append((label, config))
    return out


def branch_configs(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    return [(label, replace(base, model=replace(base.model, branches=branches))) for label, branches in BRANCH_LADDER]


def run_ablation_suite(
    manifest: DatasetManifest,
    fold_plan: FoldPlan,
    base_config: TrainConfig,
    out_dir: str | Path | None = None,
    tables: tuple[str, ...] = ("components", "branches"),
) -> list[dict]:
    """Cross-validate every ablation configuration; one row of mean metrics each.

    Metrics of disabled branches are ``None``.
    """
    plans = []
    if "components" in tables:
        plans += [("components", label, cfg) for label, cfg in component_configs(base_config)]
    if "branches" in tables:
        plans += [("branches", label, cfg) for label, cfg in branch_configs(base_config)]

    cache: dict = {}
    rows = []
    for step, (table, label, config) in enumerate(plans):
        key = config.preprocess_config()
        if key not in cache:
            cache[key] = prepare_records(manifest.records, key)
        prepared: PreparedSet = cache[key]
        run_dir = Path(out_dir) / "runs" / f"{step:02d}_{table}" if out_dir else None
        result = run_cross_validation(manifest, fold_plan, config, out_dir=run_dir, prepared=prepared)
        log.info("%s / %s: tumor accuracy %.3f", table, label, result.aggregate.tumor_accuracy)
        rows.append(
            {
                "table": table,
                "label": label,
                "branches": "+".join(config.model.branches) or "tumor_only",
                "augmentation": config.use_augmentation,
                "pretrained": config.use_pretrained,
                "three_channels": config.use_three_channels,
                "crop": config.use_crop,
                **result.aggregate.to_dict(),
            }
        )
    if out_dir:
        write_metrics_table(rows, Path(out_dir) / "metrics" / "ablation")
    return rows
