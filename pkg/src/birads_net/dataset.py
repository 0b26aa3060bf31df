"""Manifest CSV I/O, record validation and stratified cross-validation folds."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .lexicon import (
    BiradsCategory,
    DescriptorLabels,
    EchoPattern,
    LexiconError,
    Margin,
    MarginKind,
    Orientation,
    Posterior,
    Shape,
    TRAINABLE_CATEGORIES,
    TaskTargets,
    TumorClass,
    encode_labels,
)

MANIFEST_COLUMNS = (
    "image_path",
    "bbox_x0",
    "bbox_y0",
    "bbox_x1",
    "bbox_y1",
    "tumor_class",
    "shape",
    "orientation",
    "margin",
    "margin_indistinct",
    "margin_angular",
    "margin_microlobulated",
    "margin_spiculated",
    "echo_pattern",
    "posterior",
    "birads_category",
)


class ManifestError(ValueError):
    """Schema or row-level problem in a manifest file."""


@dataclass(frozen=True)
class ImageRecord:
    image_path: Path
    bbox: tuple[int, int, int, int]
    labels: DescriptorLabels
    category: BiradsCategory
    tumor_class: TumorClass

    def validate(self, image_size: tuple[int, int] | None = None) -> None:
        """Check bbox ordering (and bounds when ``image_size=(width, height)`` is known)."""
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 and 0 <= y0 < y1):
            raise ManifestError(f"bbox {self.bbox} must satisfy 0 <= x0 < x1 and 0 <= y0 < y1")
        if image_size is not None:
            width, height = image_size
            if x1 > width or y1 > height:
                raise ManifestError(f"bbox {self.bbox} exceeds image size {width}x{height}")
        self.labels.validate()
        if self.category not in TRAINABLE_CATEGORIES:
            raise ManifestError(f"birads_category {self.category} is not one of 3, 4A, 4B, 4C, 5")

    def targets(self) -> TaskTargets:
        return encode_labels(self.labels, self.category, self.tumor_class)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if not self.records:
            raise ManifestError("manifest has no records")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index):
        return self.records[index]

    def __iter__(self):
        return iter(self.records)

    @property
    def tumor_classes(self) -> np.ndarray:
        return np.array([r.tumor_class.code for r in self.records], dtype=np.int64)

    def subset(self, indices: Iterable[int]) -> list[ImageRecord]:
        return [self.records[i] for i in indices]


def _parse_flag(text: str) -> bool:
    if text.strip() not in ("0", "1"):
        raise LexiconError(f"flag must be 0 or 1, got {text!r}")
    return text.strip() == "1"


def _parse_row(row: dict, base_dir: Path) -> ImageRecord:
    fields = {}
    parsers = {
        "tumor_class": TumorClass.parse,
        "shape": Shape.parse,
        "orientation": Orientation.parse,
        "margin": MarginKind.parse,
        "echo_pattern": EchoPattern.parse,
        "posterior": Posterior.parse,
        "birads_category": BiradsCategory.parse,
        "margin_indistinct": _parse_flag,
        "margin_angular": _parse_flag,
        "margin_microlobulated": _parse_flag,
        "margin_spiculated": _parse_flag,
    }
    for name, parse in parsers.items():
        try:
            fields[name] = parse(row[name])
        except LexiconError as exc:
            raise ManifestError(f"field {name}: {exc}") from None
    bbox = []
    for name in ("bbox_x0", "bbox_y0", "bbox_x1", "bbox_y1"):
        try:
            bbox.append(int(row[name]))
        except ValueError:
            raise ManifestError(f"field {name}: not an integer: {row[name]!r}") from None
    margin = Margin(
        circumscribed=fields["margin"] is MarginKind.CIRCUMSCRIBED,
        indistinct=fields["margin_indistinct"],
        angular=fields["margin_angular"],
        microlobulated=fields["margin_microlobulated"],
        spiculated=fields["margin_spiculated"],
    )
    labels = DescriptorLabels(
        fields["shape"], fields["orientation"], margin, fields["echo_pattern"], fields["posterior"]
    )
    path = Path(row["image_path"])
    if not path.is_absolute():
        path = base_dir / path
    return ImageRecord(
        image_path=Path(os.path.normpath(path)),
        bbox=tuple(bbox),
        labels=labels,
        category=fields["birads_category"],
        tumor_class=fields["tumor_class"],
    )


def load_manifest(path: str | os.PathLike, check_images: bool = True) -> DatasetManifest:
    """Read and validate a manifest CSV.

    Relative image paths are resolved against the manifest's directory. With
    ``check_images`` every image is opened to confirm it decodes and that the
    bbox lies inside it.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    base_dir = path.parent
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"{path}: missing column(s): {', '.join(missing)}")
        for row_number, row in enumerate(reader, start=1):
            try:
                record = _parse_row(row, base_dir)
                size = _image_size(record.image_path) if check_images else None
                record.validate(size)
            except (ManifestError, LexiconError) as exc:
                raise ManifestError(f"{path}: row {row_number}: {exc}") from None
            records.append(record)
    return DatasetManifest(tuple(records), source=str(path))


def _image_size(path: Path) -> tuple[int, int]:
    if not path.is_file():
        raise ManifestError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            return im.size
    except OSError as exc:
        raise ManifestError(f"image {path} does not decode: {exc}") from None


def write_manifest(manifest: DatasetManifest | Sequence[ImageRecord], path: str | os.PathLike) -> Path:
    path = Path(path)
    base_dir = path.parent.resolve()
    records = manifest.records if isinstance(manifest, DatasetManifest) else manifest
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            image_path = Path(r.image_path)
            try:
                image_path = Path(image_path).resolve().relative_to(base_dir)
            except ValueError:
                pass
            m = r.labels.margin
            writer.writerow(
                [
                    image_path.as_posix(),
                    *r.bbox,
                    r.tumor_class.value,
                    r.labels.shape.value,
                    r.labels.orientation.value,
                    m.kind.value,
                    *[int(f) for f in m.subtypes],
                    r.labels.echo.value,
                    r.labels.posterior.value,
                    r.category.label,
                ]
            )
    return path


@dataclass(frozen=True)
class Fold:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    val_fraction: float
    folds: tuple[Fold, ...] = field(default_factory=tuple)

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "seed": self.seed,
                "val_fraction": self.val_fraction,
                "folds": [
                    {"train": list(f.train), "val": list(f.val), "test": list(f.test)}
                    for f in self.folds
                ],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        data = json.loads(text)
        folds = tuple(
            Fold(tuple(f["train"]), tuple(f["val"]), tuple(f["test"])) for f in data["folds"]
        )
        return cls(data["k"], data["seed"], data["val_fraction"], folds)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FoldPlan":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _stratified_take(indices: np.ndarray, classes: np.ndarray, n_take: int, rng) -> np.ndarray:
    """Pick ``n_take`` of ``indices`` keeping class proportions (largest remainder)."""
    labels = np.unique(classes[indices])
    exact = {c: n_take * np.mean(classes[indices] == c) for c in labels}
    quota = {c: int(math.floor(v)) for c, v in exact.items()}
    short = n_take - sum(quota.values())
    for c in sorted(labels, key=lambda c: (quota[c] - exact[c], c))[:short]:
        quota[c] += 1
    picked = []
    for c in labels:
        members = indices[classes[indices] == c]
        picked.append(rng.permutation(members)[: quota[c]])
    return np.concatenate(picked) if picked else np.array([], dtype=np.int64)


def make_fold_plan(
    manifest: DatasetManifest | Sequence[int] | np.ndarray,
    k: int = 5,
    val_fraction: float = 0.15,
    seed: int = 0,
) -> FoldPlan:
    """Stratified k-fold plan with a stratified validation carve-out per fold.

    ``manifest`` may also be a plain sequence of 0/1 tumor-class labels.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if isinstance(manifest, DatasetManifest):
        classes = manifest.tumor_classes
    else:
        classes = np.asarray(manifest, dtype=np.int64)
    n = len(classes)
    for c in (0, 1):
        count = int(np.sum(classes == c))
        if count < k:
            raise ValueError(f"need at least {k} records of tumor class {c}, found {count}")

    rng = np.random.default_rng(seed)
    # Deal class-grouped, shuffled indices round-robin so that every fold gets
    # an (almost) equal share of each class and of the total.
    order = np.concatenate([rng.permutation(np.flatnonzero(classes == c)) for c in (0, 1)])
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.arange(n) % k

    folds = []
    for f in range(k):
        test = np.flatnonzero(assignment == f)
        rest = np.flatnonzero(assignment != f)
        n_val = _round_half_up(val_fraction * len(rest))
        n_val = min(max(n_val, 1), len(rest) - 1)
        val = _stratified_take(rest, classes, n_val, rng)
        train = np.setdiff1d(rest, val)
        folds.append(
            Fold(
                tuple(int(i) for i in np.sort(train)),
                tuple(int(i) for i in np.sort(val)),
                tuple(int(i) for i in np.sort(test)),
            )
        )
    return FoldPlan(k, seed, val_fraction, tuple(folds))
