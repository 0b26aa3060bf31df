"""Adam training with plateau LR reduction and early stopping; k-fold driver."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .dataset import DatasetManifest, FoldPlan
from .evaluation import MetricsReport, aggregate_reports, evaluate_outputs, write_metrics_table
from .model import BackboneConfig, BiradsNet, ModelConfig, build_model, save_checkpoint
from .objective import LossWeights, TargetBatch, total_loss
from .pipeline import PreparedSet, make_batch, predict, prepare_records
from .preprocess import AugmentConfig, PreprocessConfig

log = logging.getLogger(__name__)

# loss-weight slots (1-based task ids) owned by each optional branch
BRANCH_TASKS = {
    "shape": (1,),
    "orientation": (2,),
    "margin": (3, 6, 7, 8, 9),
    "echo": (4,),
    "posterior": (5,),
    "likelihood": (10,),
}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    initial_lr: float = 1e-5
    reduced_lr: float = 1e-6
    lr_patience: int = 15
    stop_patience: int = 30
    max_epochs: int = 500
    seed: int = 0
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    use_augmentation: bool = True
    use_pretrained: bool = True
    use_three_channels: bool = True
    use_crop: bool = True
    smoothing_sigma: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.reduced_lr < self.initial_lr:
            raise ValueError("need 0 < reduced_lr < initial_lr")
        if not self.lr_patience < self.stop_patience:
            raise ValueError("need lr_patience < stop_patience")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """Reduced-width encoder at 64 x 64 input with a faster learning rate,
        for CPU-sized phantom experiments."""
        base = cls(
            initial_lr=1e-3,
            reduced_lr=1e-4,
            max_epochs=200,
            use_pretrained=False,
            model=ModelConfig(BackboneConfig(width_divisor=8), input_size=64, head_hidden=128, fusion_hidden=32),
        )
        return replace(base, **overrides)

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(
            target_size=self.model.input_size,
            use_crop=self.use_crop,
            use_three_channels=self.use_three_channels,
            smoothing_sigma=self.smoothing_sigma,
        )

    def model_config(self) -> ModelConfig:
        """Model config with the pretrained archive dropped when pretraining is off."""
        if self.use_pretrained:
            return self.model
        return replace(self.model, backbone=replace(self.model.backbone, pretrained_weights=None))

    def effective_weights(self) -> LossWeights:
        """Loss weights with the slots of disabled branches zeroed."""
        task = list(self.loss_weights.task)
        for branch, tasks in BRANCH_TASKS.items():
            if branch not in self.model.branches:
                for k in tasks:
                    task[k - 1] = 0.0
        agreement = self.loss_weights.agreement if "likelihood" in self.model.branches else 0.0
        return LossWeights(tuple(task), agreement)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["loss_weights"] = {"task": list(self.loss_weights.task), "agreement": self.loss_weights.agreement}
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "augmentation" in data:
            data["augmentation"] = AugmentConfig(**data["augmentation"])
        if "loss_weights" in data:
            lw = data["loss_weights"]
            data["loss_weights"] = LossWeights(tuple(lw.get("task", LossWeights().task)), lw.get("agreement", 0.2))
        if "model" in data:
            data["model"] = ModelConfig.from_dict(data["model"])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        """Read a JSON or TOML config file."""
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python 3.10
                import tomli as tomllib

            return cls.from_dict(tomllib.loads(text))
        return cls.from_dict(json.loads(text))


class PlateauSchedule:
    """Validation-loss bookkeeping: one LR drop after ``lr_patience`` and a stop
    after ``stop_patience`` consecutive epochs without strict improvement.

    The LR-drop counter restarts after the drop; the stop counter restarts only
    on improvement.
    """

    def __init__(self, initial_lr: float, reduced_lr: float, lr_patience: int, stop_patience: int):
        self.lr = initial_lr
        self.reduced_lr = reduced_lr
        self.lr_patience = lr_patience
        self.stop_patience = stop_patience
        self.best = math.inf
        self.since_improvement = 0
        self._lr_wait = 0
        self.reduced = False
        self.should_stop = False

    def step(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; returns whether it improved."""
        improved = val_loss < self.best
        if improved:
            self.best = val_loss
            self.since_improvement = 0
            self._lr_wait = 0
        else:
            self.since_improvement += 1
            self._lr_wait += 1
            if not self.reduced and self._lr_wait >= self.lr_patience:
                self.lr = self.reduced_lr
                self.reduced = True
                self._lr_wait = 0
            if self.since_improvement >= self.stop_patience:
                self.should_stop = True
        return improved


@dataclass
class TrainLog:
    config: dict
    epochs: list[dict] = field(default_factory=list)

    @property
    def lrs(self) -> list[float]:
        return [e["lr"] for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e["val_loss"] for e in self.epochs]

    @property
    def best_epoch(self) -> int:
        return int(np.argmin(self.val_losses))

    def write_jsonl(self, path: str | Path) -> Path:
        """First line holds the config, then one line per epoch."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"config": self.config}) + "\n")
            for entry in self.epochs:
                fh.write(json.dumps(entry) + "\n")
        return path


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _seed_for(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@torch.no_grad()
def validation_breakdown(model: BiradsNet, data: PreparedSet, weights: LossWeights, chunk: int = 64) -> dict:
    """Inference-mode losses over the whole set (equivalent to one full batch)."""
    dtype = next(model.parameters()).dtype
    outputs = predict(model, data.images, chunk)
    return total_loss(outputs, TargetBatch.stack(data.targets, dtype), weights).to_record()


def train_one_fold(
    model: BiradsNet,
    train_data: PreparedSet,
    val_data: PreparedSet,
    config: TrainConfig,
    *,
    validation_fn: Optional[Callable[[BiradsNet, int], float]] = None,
    log_path: str | Path | None = None,
) -> tuple[BiradsNet, TrainLog]:
    """Train ``model`` in place and return it restored to its best-validation state.

    ``validation_fn(model, epoch)`` overrides the validation loss (used to
    script loss sequences in tests).
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation sets must be nonempty")
    weights = config.effective_weights()
    dtype = next(model.parameters()).dtype
    torch.manual_seed(_seed_for(config.seed, 1))
    optimizer = torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.initial_lr,
        betas=(0.9, 0.999),
        eps=1e-8,
    )
    schedule = PlateauSchedule(config.initial_lr, config.reduced_lr, config.lr_patience, config.stop_patience)
    augmentation = config.augmentation if config.use_augmentation else None
    train_log = TrainLog(config=config.to_dict())
    best_state = copy.deepcopy(model.state_dict())
    n = len(train_data)

    for epoch in range(config.max_epochs):
        model.train()
        order = np.random.default_rng([config.seed, 2, epoch]).permutation(n)
        sums: dict[str, float] = {}
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x, targets = make_batch(train_data, idx, augmentation, epoch, dtype)
            breakdown = total_loss(model(x), targets, weights)
            bad = breakdown.nonfinite_components()
            if bad:
                raise TrainingError(f"non-finite loss at epoch {epoch}: {', '.join(bad)}")
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            for key, value in breakdown.to_record().items():
                if value is not None:
                    sums[key] = sums.get(key, 0.0) + value * len(idx)
        train_means = {k: v / n for k, v in sums.items()}

        if validation_fn is not None:
            val_record = {"total": float(validation_fn(model, epoch))}
        else:
            val_record = validation_breakdown(model, val_data, weights)
        val_loss = val_record["total"]
        if not math.isfinite(val_loss):
            bad = [k for k, v in val_record.items() if v is not None and not math.isfinite(v)]
            raise TrainingError(f"non-finite validation loss at epoch {epoch}: {', '.join(bad)}")

        lr_used = schedule.lr
        improved = schedule.step(val_loss)
        if improved:
            best_state = copy.deepcopy(model.state_dict())
        train_log.epochs.append(
            {
                "epoch": epoch,
                "lr": lr_used,
                "train": train_means,
                "val": val_record,
                "val_loss": val_loss,
                "best_val_loss": schedule.best,
                "epochs_since_improvement": schedule.since_improvement,
                "wall_time": time.time(),
            }
        )
        log.debug("epoch %d lr %.1e train %.4f val %.4f", epoch, lr_used, train_means.get("total", 0.0), val_loss)
        if schedule.should_stop:
            break
        _set_lr(optimizer, schedule.lr)

    model.load_state_dict(best_state)
    model.eval()
    if log_path is not None:
        train_log.write_jsonl(log_path)
    return model, train_log


@dataclass
class CVResult:
    fold_reports: list[MetricsReport]
    aggregate: MetricsReport
    logs: list[TrainLog]
    test_indices: list[tuple[int, ...]]
    predictions: dict  # record index -> malignant probability

    def rows(self) -> list[dict]:
        rows = [{"fold": i, **r.to_dict()} for i, r in enumerate(self.fold_reports)]
        rows.append({"fold": "mean", **self.aggregate.to_dict()})
        return rows


def run_cross_validation(
    manifest: DatasetManifest,
    fold_plan: FoldPlan,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    prepared: PreparedSet | None = None,
) -> CVResult:
    """Train and test one fresh model per fold; aggregate is the mean over folds."""
    if prepared is None:
        prepared = prepare_records(manifest.records, config.preprocess_config())
    if len(prepared) != len(manifest):
        raise ValueError("prepared set does not match the manifest")
    if config.use_pretrained and not config.model.backbone.pretrained_weights:
        log.warning("use_pretrained is set but no pretrained_weights archive is configured")
    out_dir = Path(out_dir) if out_dir is not None else None
    reports, logs, tests, predictions = [], [], [], {}
    for f, fold in enumerate(fold_plan.folds):
        model = build_model(config.model_config(), seed=_seed_for(config.seed, 100, f))
        fold_config = replace(config, seed=_seed_for(config.seed, 200, f))
        log_path = out_dir / "logs" / f"fold_{f}.jsonl" if out_dir else None
        model, train_log = train_one_fold(
            model, prepared.subset(fold.train), prepared.subset(fold.val), fold_config, log_path=log_path
        )
        test = prepared.subset(fold.test)
        outputs = predict(model, test.images)
        report = evaluate_outputs(outputs, test.targets)
        for i, p in zip(fold.test, outputs.malignant_probability.tolist()):
            predictions[int(i)] = p
        if out_dir:
            save_checkpoint(
                model,
                out_dir / "checkpoints" / f"fold_{f}",
                extra={"preprocess": asdict(config.preprocess_config()), "fold": f},
            )
        log.info("fold %d: tumor accuracy %.3f", f, report.tumor_accuracy)
        reports.append(report)
        logs.append(train_log)
        tests.append(fold.test)
    result = CVResult(reports, aggregate_reports(reports), logs, tests, predictions)
    if out_dir:
        write_metrics_table(result.rows(), out_dir / "metrics" / "metrics")
    return result
