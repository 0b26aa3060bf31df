"""BI-RADS vocabulary: descriptor classes, assessment categories and the
category <-> likelihood-of-malignancy mapping used as regression target."""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass

import numpy as np

LEXICON_VERSION = "birads-us-5th"


class LexiconError(ValueError):
    """Raised for label combinations that violate the lexicon."""


class _Coded(enum.Enum):
    """Enum whose values are the lowercase manifest strings."""

    @classmethod
    def members(cls) -> list:
        return list(cls)

    @property
    def code(self) -> int:
        return type(self).members().index(self)

    @classmethod
    def from_code(cls, code: int):
        return cls.members()[int(code)]

    @classmethod
    def parse(cls, text: str):
        try:
            return cls(text.strip())
        except ValueError:
            allowed = ", ".join(m.value for m in cls)
            raise LexiconError(f"invalid {cls.__name__} {text!r}; expected one of: {allowed}") from None

    def __str__(self) -> str:
        return self.value


class Shape(_Coded):
    OVAL = "oval"
    ROUND = "round"
    IRREGULAR = "irregular"


class Orientation(_Coded):
    PARALLEL = "parallel"
    NOT_PARALLEL = "not_parallel"


class MarginKind(_Coded):
    CIRCUMSCRIBED = "circumscribed"
    NOT_CIRCUMSCRIBED = "not_circumscribed"


class EchoPattern(_Coded):
    ANECHOIC = "anechoic"
    HYPOECHOIC = "hypoechoic"
    ISOECHOIC = "isoechoic"
    HYPERECHOIC = "hyperechoic"
    COMPLEX_CYSTIC_SOLID = "complex_cystic_solid"
    HETEROGENEOUS = "heterogeneous"


class Posterior(_Coded):
    NONE = "none"
    ENHANCEMENT = "enhancement"
    SHADOWING = "shadowing"
    COMBINED = "combined"


class TumorClass(_Coded):
    BENIGN = "benign"
    MALIGNANT = "malignant"


MARGIN_SUBTYPES = ("indistinct", "angular", "microlobulated", "spiculated")
DESCRIPTOR_NAMES = ("shape", "orientation", "margin", "echo", "posterior")
DESCRIPTOR_ENUMS = (Shape, Orientation, MarginKind, EchoPattern, Posterior)
DESCRIPTOR_ARITY = tuple(len(e) for e in DESCRIPTOR_ENUMS)  # (3, 2, 2, 6, 4)

# Canonical task order, tasks 1..11.
TASK_NAMES = (
    "shape",
    "orientation",
    "margin",
    "echo",
    "posterior",
    "margin_indistinct",
    "margin_angular",
    "margin_microlobulated",
    "margin_spiculated",
    "likelihood",
    "tumor",
)


@functools.total_ordering
@dataclass(frozen=True)
class BiradsCategory:
    label: str
    rank: int

    def __lt__(self, other: "BiradsCategory") -> bool:
        return self.rank < other.rank

    def __str__(self) -> str:
        return self.label

    @classmethod
    def parse(cls, text) -> "BiradsCategory":
        key = str(text).strip().upper()
        try:
            return CATEGORIES[key]
        except KeyError:
            raise LexiconError(
                f"invalid BI-RADS category {text!r}; expected one of: {', '.join(CATEGORIES)}"
            ) from None


CATEGORIES = {
    label: BiradsCategory(label, rank)
    for rank, label in enumerate(["0", "1", "2", "3", "4A", "4B", "4C", "5", "6"])
}
TRAINABLE_CATEGORIES = tuple(CATEGORIES[c] for c in ("3", "4A", "4B", "4C", "5"))

# Median likelihood of malignancy per category.
_MEDIAN_LIKELIHOOD = {"2": 0.0, "3": 0.01, "4A": 0.06, "4B": 0.30, "4C": 0.725, "5": 0.975}
# Upper bounds (inclusive) of the likelihood bins used for decoding.
_BIN_UPPER = (("3", 0.02), ("4A", 0.10), ("4B", 0.50), ("4C", 0.95))


def category_to_likelihood(category: BiradsCategory | str) -> float:
    if not isinstance(category, BiradsCategory):
        category = BiradsCategory.parse(category)
    try:
        return _MEDIAN_LIKELIHOOD[category.label]
    except KeyError:
        raise LexiconError(f"no numeric likelihood defined for category {category.label}") from None


def likelihood_to_category(likelihood: float) -> BiradsCategory:
    """Decode a likelihood in [0, 1] to a category; bin edges belong to the lower bin."""
    if not 0.0 <= likelihood <= 1.0:
        raise LexiconError(f"likelihood {likelihood} outside [0, 1]")
    for label, upper in _BIN_UPPER:
        if likelihood <= upper:
            return CATEGORIES[label]
    return CATEGORIES["5"]


@dataclass(frozen=True)
class Margin:
    circumscribed: bool
    indistinct: bool = False
    angular: bool = False
    microlobulated: bool = False
    spiculated: bool = False

    @property
    def subtypes(self) -> tuple[bool, bool, bool, bool]:
        return (self.indistinct, self.angular, self.microlobulated, self.spiculated)

    @property
    def kind(self) -> MarginKind:
        return MarginKind.CIRCUMSCRIBED if self.circumscribed else MarginKind.NOT_CIRCUMSCRIBED

    def validate(self) -> None:
        if self.circumscribed and any(self.subtypes):
            raise LexiconError("circumscribed margin cannot carry not-circumscribed sub-types")
        if not self.circumscribed and not any(self.subtypes):
            raise LexiconError("not-circumscribed margin needs at least one sub-type")


@dataclass(frozen=True)
class DescriptorLabels:
    shape: Shape
    orientation: Orientation
    margin: Margin
    echo: EchoPattern
    posterior: Posterior

    def validate(self) -> "DescriptorLabels":
        for name, enum_cls in zip(DESCRIPTOR_NAMES, DESCRIPTOR_ENUMS):
            if name == "margin":
                continue
            if not isinstance(getattr(self, name), enum_cls):
                raise LexiconError(f"{name} must be a {enum_cls.__name__}")
        self.margin.validate()
        return self

    def codes(self) -> tuple[int, int, int, int, int]:
        return (
            self.shape.code,
            self.orientation.code,
            self.margin.kind.code,
            self.echo.code,
            self.posterior.code,
        )


@dataclass(frozen=True)
class TaskTargets:
    """Ground truths Y1..Y11 for one image, as numpy arrays."""

    shape: np.ndarray
    orientation: np.ndarray
    margin: np.ndarray
    echo: np.ndarray
    posterior: np.ndarray
    subtypes: np.ndarray
    likelihood: float
    tumor: np.ndarray

    def as_list(self) -> list:
        """Targets in task order 1..11 (subtypes split into four scalars)."""
        return [
            self.shape,
            self.orientation,
            self.margin,
            self.echo,
            self.posterior,
            *[float(v) for v in self.subtypes],
            self.likelihood,
            self.tumor,
        ]


def _one_hot(index: int, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.float32)
    out[index] = 1.0
    return out


def encode_labels(
    labels: DescriptorLabels, category: BiradsCategory | str, tumor_class: TumorClass | int
) -> TaskTargets:
    labels.validate()
    if not isinstance(category, BiradsCategory):
        category = BiradsCategory.parse(category)
    if category not in TRAINABLE_CATEGORIES:
        raise LexiconError(f"category {category.label} is not a training target")
    tumor = tumor_class.code if isinstance(tumor_class, TumorClass) else int(tumor_class)
    if tumor not in (0, 1):
        raise LexiconError(f"tumor class must be 0 or 1, got {tumor_class!r}")
    codes = labels.codes()
    onehots = [_one_hot(c, n) for c, n in zip(codes, DESCRIPTOR_ARITY)]
    return TaskTargets(
        *onehots,
        subtypes=np.asarray(labels.margin.subtypes, dtype=np.float32),
        likelihood=category_to_likelihood(category),
        tumor=_one_hot(tumor, 2),
    )
