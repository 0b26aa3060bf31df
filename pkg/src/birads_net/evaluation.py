"""Metrics, model evaluation and per-image explanation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .lexicon import (
    DESCRIPTOR_ENUMS,
    DESCRIPTOR_NAMES,
    MARGIN_SUBTYPES,
    TaskTargets,
    likelihood_to_category,
)
from .model import BiradsNet, ModelOutputs
from .pipeline import PreparedSet, predict, prepare_records
from .preprocess import PreprocessConfig, preprocess_image

UNCERTAINTY_GAP = 0.5


def confusion_metrics(preds, targets) -> tuple[float, Optional[float], Optional[float]]:
    """Accuracy, sensitivity and specificity with malignant (1) as positive.

    A rate whose denominator class is absent from ``targets`` is ``None``.
    """
    preds = np.asarray(preds, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if preds.shape != targets.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {targets.shape}")
    if preds.size == 0:
        raise ValueError("empty inputs")
    tp = int(np.sum((preds == 1) & (targets == 1)))
    tn = int(np.sum((preds == 0) & (targets == 0)))
    fp = int(np.sum((preds == 1) & (targets == 0)))
    fn = int(np.sum((preds == 0) & (targets == 1)))
    accuracy = (tp + tn) / preds.size
    sensitivity = tp / (tp + fn) if tp + fn else None
    specificity = tn / (tn + fp) if tn + fp else None
    return accuracy, sensitivity, specificity


def regression_metrics(preds, targets) -> tuple[Optional[float], float]:
    """(R^2, MSE); R^2 is ``None`` when the targets are constant."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {targets.shape}")
    if preds.size < 2:
        raise ValueError("need at least two values")
    ss_res = float(np.sum((preds - targets) ** 2))
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    mse = ss_res / preds.size
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else None
    return r2, mse


@dataclass(frozen=True)
class MetricsReport:
    n: int
    tumor_accuracy: float
    tumor_sensitivity: Optional[float]
    tumor_specificity: Optional[float]
    shape_accuracy: Optional[float] = None
    orientation_accuracy: Optional[float] = None
    margin_accuracy: Optional[float] = None
    echo_accuracy: Optional[float] = None
    posterior_accuracy: Optional[float] = None
    indistinct_accuracy: Optional[float] = None
    angular_accuracy: Optional[float] = None
    microlobulated_accuracy: Optional[float] = None
    spiculated_accuracy: Optional[float] = None
    likelihood_r2: Optional[float] = None
    likelihood_mse: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def evaluate_outputs(outputs: ModelOutputs, targets: Sequence[TaskTargets]) -> MetricsReport:
    """Score predictions against targets; absent branches give ``None`` metrics."""
    tumor_true = np.array([np.argmax(t.tumor) for t in targets])
    tumor_pred = np.asarray(outputs.tumor).argmax(axis=1)
    acc, sens, spec = confusion_metrics(tumor_pred, tumor_true)
    values = {}
    for name in DESCRIPTOR_NAMES:
        probs = getattr(outputs, name)
        if probs is None:
            continue
        truth = np.array([np.argmax(getattr(t, name)) for t in targets])
        values[f"{name}_accuracy"] = float(np.mean(np.asarray(probs).argmax(axis=1) == truth))
    if outputs.subtypes is not None:
        truth = np.stack([t.subtypes for t in targets]) > 0.5
        hits = (np.asarray(outputs.subtypes) >= 0.5) == truth
        for j, name in enumerate(MARGIN_SUBTYPES):
            values[f"{name}_accuracy"] = float(np.mean(hits[:, j]))
    if outputs.likelihood is not None:
        y = np.array([t.likelihood for t in targets])
        x = np.asarray(outputs.likelihood, dtype=np.float64)
        if len(y) >= 2:
            values["likelihood_r2"], values["likelihood_mse"] = regression_metrics(x, y)
        else:
            values["likelihood_mse"] = float(np.mean((x - y) ** 2))
    return MetricsReport(len(targets), acc, sens, spec, **values)


def evaluate_model(
    model: BiradsNet, data: PreparedSet | Sequence, preprocess: PreprocessConfig | None = None
) -> MetricsReport:
    """Inference-mode evaluation on a prepared set or on raw records."""
    if not isinstance(data, PreparedSet):
        preprocess = preprocess or PreprocessConfig(target_size=model.config.input_size)
        data = prepare_records(list(data), preprocess)
    if len(data) == 0:
        raise ValueError("no records to evaluate")
    return evaluate_outputs(predict(model, data.images), data.targets)


def aggregate_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted mean over folds, per metric, of the defined values."""
    agg = {}
    for name in MetricsReport.columns():
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if name == "n":
            agg[name] = int(sum(vals))
        else:
            agg[name] = float(np.mean(vals)) if vals else None
    return MetricsReport(**agg)


def write_metrics_table(rows: Sequence[dict], path_stem: str | Path) -> tuple[Path, Path]:
    """Write ``rows`` (dicts sharing keys) as ``<stem>.csv`` and ``<stem>.json``."""
    import csv

    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    keys = list(rows[0].keys()) if rows else []
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    json_path.write_text(json.dumps(list(rows), indent=2), encoding="utf-8")
    return csv_path, json_path


# --- explanation reports -----------------------------------------------------------


@dataclass(frozen=True)
class ExplanationReport:
    tumor_class: str
    tumor_probabilities: dict
    descriptors: dict  # descriptor -> {class name: probability}
    margin_subtypes: dict  # subtype -> probability
    likelihood: Optional[float]
    likelihood_percent: Optional[str]
    birads_category: Optional[str]
    uncertainty_flag: bool
    branch_gap: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExplanationReport":
        return cls(**json.loads(text))


def explain_outputs(outputs: ModelOutputs, index: int = 0) -> ExplanationReport:
    tumor = np.asarray(outputs.tumor[index], dtype=np.float64)
    descriptors = {}
    for name, enum_cls in zip(DESCRIPTOR_NAMES, DESCRIPTOR_ENUMS):
        probs = getattr(outputs, name)
        if probs is not None:
            descriptors[name] = {m.value: float(p) for m, p in zip(enum_cls, np.asarray(probs[index]))}
    subtypes = {}
    if outputs.subtypes is not None:
        subtypes = {n: float(p) for n, p in zip(MARGIN_SUBTYPES, np.asarray(outputs.subtypes[index]))}
    likelihood = percent = category = gap = None
    flag = False
    if outputs.likelihood is not None:
        likelihood = float(outputs.likelihood[index])
        percent = f"{100.0 * likelihood:.1f}%"
        category = likelihood_to_category(min(max(likelihood, 0.0), 1.0)).label
        gap = abs(float(tumor[1]) - likelihood)
        flag = gap > UNCERTAINTY_GAP
    return ExplanationReport(
        tumor_class="malignant" if tumor[1] > tumor[0] else "benign",
        tumor_probabilities={"benign": float(tumor[0]), "malignant": float(tumor[1])},
        descriptors=descriptors,
        margin_subtypes=subtypes,
        likelihood=likelihood,
        likelihood_percent=percent,
        birads_category=category,
        uncertainty_flag=flag,
        branch_gap=gap,
    )


def make_explanation_report(
    model: BiradsNet, image: np.ndarray, bbox, preprocess: PreprocessConfig | None = None
) -> ExplanationReport:
    """Explain one [0, 1] grayscale image with its tumor bbox."""
    image = np.asarray(image, dtype=np.float64)
    x0, y0, x1, y1 = bbox
    h, w = image.shape
    if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
        raise ValueError(f"bbox {tuple(bbox)} outside image bounds {w}x{h}")
    preprocess = preprocess or PreprocessConfig(target_size=model.config.input_size)
    x = preprocess_image(image, bbox, preprocess)[None]
    return explain_outputs(predict(model, x), 0)


def render_report_figure(report: ExplanationReport, path: str | Path, image: np.ndarray | None = None) -> Path:
    """Horizontal probability bars per descriptor, saved as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = [("tumor class", report.tumor_probabilities)]
    panels += list(report.descriptors.items())
    if report.margin_subtypes:
        panels.append(("margin sub-types", report.margin_subtypes))
    n_cols = len(panels) + (image is not None)
    fig, axes = plt.subplots(1, n_cols, figsize=(3.0 * n_cols, 3.2))
    axes = np.atleast_1d(axes)
    if image is not None:
        axes[0].imshow(image, cmap="gray")
        axes[0].axis("off")
        axes = axes[1:]
    for ax, (title, probs) in zip(axes, panels):
        names = list(probs)
        ax.barh(names, [probs[k] for k in names], color="tab:blue")
        ax.set_xlim(0, 1)
        ax.invert_yaxis()
        ax.set_title(title)
    title = f"{report.tumor_class}"
    if report.likelihood_percent is not None:
        title += f" | likelihood {report.likelihood_percent} | BI-RADS {report.birads_category}"
    if report.uncertainty_flag:
        title += " | branches disagree"
    fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
