"""Preprocessed, in-memory image sets and batched inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .dataset import ImageRecord
from .lexicon import TaskTargets
from .model import BiradsNet, ModelOutputs
from .objective import TargetBatch
from .preprocess import AugmentConfig, PreprocessConfig, augment, load_and_preprocess


@dataclass
class PreparedSet:
    """Images (N x S x S x 3, float32) with their task targets."""

    images: np.ndarray
    targets: list[TaskTargets]
    ids: np.ndarray  # stable per-sample ids, used to derive augmentation seeds

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, indices) -> "PreparedSet":
        indices = np.asarray(indices, dtype=np.int64)
        return PreparedSet(self.images[indices], [self.targets[i] for i in indices], self.ids[indices])


def prepare_records(records: Sequence[ImageRecord], config: PreprocessConfig) -> PreparedSet:
    images = np.stack([load_and_preprocess(r.image_path, r.bbox, config) for r in records])
    return PreparedSet(images, [r.targets() for r in records], np.arange(len(records)))


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """N x H x W x 3 array -> N x 3 x H x W tensor."""
    return torch.as_tensor(np.ascontiguousarray(np.transpose(images, (0, 3, 1, 2))), dtype=dtype)


def make_batch(
    data: PreparedSet,
    indices,
    augmentation: AugmentConfig | None = None,
    epoch: int = 0,
    dtype=torch.float32,
) -> tuple[torch.Tensor, TargetBatch]:
    images = data.images[indices]
    if augmentation is not None:
        images = np.stack(
            [augment(img, None, augmentation, int(data.ids[i]), epoch)[0] for img, i in zip(images, indices)]
        )
    return to_tensor(images, dtype), TargetBatch.stack([data.targets[i] for i in indices], dtype)


def concat_outputs(chunks: list[ModelOutputs]) -> ModelOutputs:
    merged = {}
    for name, first in chunks[0].as_dict().items():
        merged[name] = None if first is None else torch.cat([c.as_dict()[name] for c in chunks])
    return ModelOutputs(**merged)


@torch.no_grad()
def predict(model: BiradsNet, images: np.ndarray | torch.Tensor, batch_size: int = 32) -> ModelOutputs:
    """Inference-mode forward over N x S x S x 3 images (or an N x 3 x S x S tensor)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    x = images if isinstance(images, torch.Tensor) else to_tensor(images, dtype)
    chunks = [model(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return concat_outputs(chunks)
