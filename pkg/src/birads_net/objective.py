"""Per-task losses, the branch-agreement term and the weighted total loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .lexicon import TASK_NAMES, TaskTargets
from .model import ModelOutputs

EPS = 1e-7
DEFAULT_TASK_WEIGHTS = (0.2, 0.2, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1, 0.1, 0.2, 0.5)
CATEGORICAL_TASKS = (1, 2, 3, 4, 5, 11)
SUBTYPE_TASKS = (6, 7, 8, 9)
LIKELIHOOD_TASK = 10


@dataclass(frozen=True)
class LossWeights:
    task: tuple[float, ...] = DEFAULT_TASK_WEIGHTS
    agreement: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "task", tuple(float(w) for w in self.task))
        if len(self.task) != 11:
            raise ValueError(f"need 11 task weights, got {len(self.task)}")
        if min(self.task) < 0 or self.agreement < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TargetBatch:
    shape: torch.Tensor
    orientation: torch.Tensor
    margin: torch.Tensor
    echo: torch.Tensor
    posterior: torch.Tensor
    subtypes: torch.Tensor  # B x 4
    likelihood: torch.Tensor  # B
    tumor: torch.Tensor  # B x 2

    @classmethod
    def stack(cls, targets: Sequence[TaskTargets], dtype=torch.float32) -> "TargetBatch":
        def col(name):
            return torch.as_tensor(np.stack([np.asarray(getattr(t, name)) for t in targets]), dtype=dtype)

        return cls(*(col(n) for n in ("shape", "orientation", "margin", "echo", "posterior", "subtypes", "likelihood", "tumor")))

    @property
    def malignant(self) -> torch.Tensor:
        return self.tumor[:, 1]


def task_prediction(outputs, k: int):
    """Prediction for task ``k`` (1-based) from a ModelOutputs/TargetBatch-like object."""
    name = TASK_NAMES[k - 1]
    if k in SUBTYPE_TASKS:
        return None if outputs.subtypes is None else outputs.subtypes[:, k - 6]
    return getattr(outputs, name)


def task_loss(k: int, prediction: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batch-mean loss of task ``k``: categorical CE, binary CE or squared error."""
    if not 1 <= k <= 11:
        raise ValueError(f"task index must be in 1..11, got {k}")
    prediction = torch.as_tensor(prediction)
    target = torch.as_tensor(target, dtype=prediction.dtype)
    if prediction.shape != target.shape:
        raise ValueError(
            f"task {k} ({TASK_NAMES[k - 1]}): prediction shape {tuple(prediction.shape)} "
            f"!= target shape {tuple(target.shape)}"
        )
    if k in CATEGORICAL_TASKS:
        if prediction.ndim != 2:
            raise ValueError(f"task {k} expects B x C probabilities")
        p = prediction.clamp(EPS, 1 - EPS)
        return -(target * torch.log(p)).sum(dim=1).mean()
    if k in SUBTYPE_TASKS:
        p = prediction.clamp(EPS, 1 - EPS)
        return -(target * torch.log(p) + (1 - target) * torch.log(1 - p)).mean()
    return ((prediction - target) ** 2).mean()


def agreement_loss(x10, x11, y10, y11) -> torch.Tensor:
    """Squared mismatch between the predicted and true |malignancy - likelihood| gaps.

    ``x11`` is the predicted malignant-class probability and ``y11`` the 0/1
    malignant indicator.
    """
    x10, x11 = torch.as_tensor(x10), torch.as_tensor(x11)
    y10 = torch.as_tensor(y10, dtype=x10.dtype)
    y11 = torch.as_tensor(y11, dtype=x10.dtype)
    return ((torch.abs(x11 - x10) - torch.abs(y11 - y10)) ** 2).mean()


@dataclass
class LossBreakdown:
    tasks: tuple[Optional[torch.Tensor], ...]  # L1..L11, None for absent branches
    agreement: Optional[torch.Tensor]
    total: torch.Tensor

    def to_record(self) -> dict:
        """Plain-float view with one key per component (13 entries)."""
        rec = {
            name: None if loss is None else float(loss.detach())
            for name, loss in zip(TASK_NAMES, self.tasks)
        }
        rec["agreement"] = None if self.agreement is None else float(self.agreement.detach())
        rec["total"] = float(self.total.detach())
        return rec

    def nonfinite_components(self) -> list[str]:
        return [k for k, v in self.to_record().items() if v is not None and not np.isfinite(v)]


def total_loss(outputs: ModelOutputs, targets: TargetBatch, weights: LossWeights = LossWeights()) -> LossBreakdown:
    components = []
    total = outputs.tumor.new_zeros(())
    for k in range(1, 12):
        pred = task_prediction(outputs, k)
        if pred is None:
            components.append(None)
            continue
        loss = task_loss(k, pred, task_prediction(targets, k))
        components.append(loss)
        total = total + weights.task[k - 1] * loss
    agreement = None
    if outputs.likelihood is not None:
        agreement = agreement_loss(
            outputs.likelihood, outputs.malignant_probability, targets.likelihood, targets.malignant
        )
        total = total + weights.agreement * agreement
    return LossBreakdown(tuple(components), agreement, total)
