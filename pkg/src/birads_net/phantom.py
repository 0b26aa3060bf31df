"""Synthetic breast-ultrasound-like phantoms with self-consistent BI-RADS labels.

Each phantom is a single mass on a speckled tissue background.  The descriptor
labels drive the rendering (geometry, margin, interior echo, posterior
acoustics) and a scoring rule derives the assessment category and tumor
class from those same labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .dataset import DatasetManifest, ImageRecord, write_manifest
from .lexicon import (
    CATEGORIES,
    BiradsCategory,
    DescriptorLabels,
    EchoPattern,
    Margin,
    Orientation,
    Posterior,
    Shape,
    TumorClass,
)

SUSPICIOUS_ECHO = (EchoPattern.HYPOECHOIC, EchoPattern.HETEROGENEOUS, EchoPattern.COMPLEX_CYSTIC_SOLID)
SUSPICIOUS_POSTERIOR = (Posterior.SHADOWING, Posterior.COMBINED)

BACKGROUND_LEVEL = 0.5
ECHO_LEVEL = {
    EchoPattern.ANECHOIC: 0.04,
    EchoPattern.HYPOECHOIC: 0.2,
    EchoPattern.ISOECHOIC: 0.45,
    EchoPattern.HYPERECHOIC: 0.85,
    EchoPattern.COMPLEX_CYSTIC_SOLID: 0.06,
    EchoPattern.HETEROGENEOUS: 0.35,
}


@dataclass(frozen=True)
class ScoringRule:
    margin: float = 3.0
    shape: float = 2.0
    orientation: float = 2.0
    echo: float = 1.0
    posterior: float = 1.0
    # (inclusive upper score, category); anything above the last maps to 5
    category_bins: tuple = ((0, "3"), (2, "4A"), (4, "4B"), (6, "4C"))
    malignant_threshold: float = 5.0

    def score(self, labels: DescriptorLabels) -> float:
        return (
            self.margin * (not labels.margin.circumscribed)
            + self.shape * (labels.shape is Shape.IRREGULAR)
            + self.orientation * (labels.orientation is Orientation.NOT_PARALLEL)
            + self.echo * (labels.echo in SUSPICIOUS_ECHO)
            + self.posterior * (labels.posterior in SUSPICIOUS_POSTERIOR)
        )


def score_labels(
    labels: DescriptorLabels, rule: ScoringRule = ScoringRule()
) -> tuple[BiradsCategory, TumorClass]:
    score = rule.score(labels)
    category = CATEGORIES["5"]
    for upper, label in rule.category_bins:
        if score <= upper:
            category = CATEGORIES[label]
            break
    tumor = TumorClass.MALIGNANT if score >= rule.malignant_threshold else TumorClass.BENIGN
    return category, tumor


@dataclass(frozen=True)
class PhantomSpec:
    labels: DescriptorLabels
    size: tuple[int, int] = (128, 192)  # (H, W)
    seed: int = 0
    speckle_variance: float = 0.05

    def __post_init__(self):
        self.labels.validate()
        if min(self.size) < 64:
            raise ValueError(f"phantom size {self.size} below the 64 pixel minimum")


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    return noise / (noise.std() + 1e-12)


def _background(rng, h, w) -> np.ndarray:
    rows = np.arange(h)[:, None] / h
    layers = 0.05 * np.sin(2 * np.pi * (rows * rng.uniform(2.0, 4.0) + rng.uniform()))
    texture = 0.05 * _smooth_noise(rng, (h, w), sigma=max(h, w) / 24)
    skin = 0.25 * np.exp(-((rows - 0.03) / 0.02) ** 2)
    return BACKGROUND_LEVEL + layers + texture + skin


def _radius_profile(theta, labels: DescriptorLabels, rng) -> np.ndarray:
    """Boundary radius (in normalized ellipse units) as a function of angle."""
    r = np.ones_like(theta)
    if labels.shape is Shape.IRREGULAR:
        for k in (2, 3, 5):
            r += rng.uniform(0.05, 0.08) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    m = labels.margin
    if m.angular:
        n = int(rng.integers(5, 7))
        phase = rng.uniform(0, 2 * np.pi / n)
        sector = np.mod(theta - phase, 2 * np.pi / n) - np.pi / n
        r *= math.cos(np.pi / n) / np.cos(sector) * 1.05
    if m.microlobulated:
        r += 0.09 * np.abs(np.cos(4 * theta + rng.uniform(0, np.pi)))
    return r


def _spikes(h, w, cx, cy, rx, ry, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros((h, w))
    n = int(rng.integers(9, 13))
    for i in range(n):
        angle = 2 * np.pi * i / n + rng.uniform(-0.15, 0.15)
        ux, uy = math.cos(angle), math.sin(angle)
        r0 = math.hypot(rx * ux, ry * uy) * 0.8
        length = r0 + max(rx, ry) * rng.uniform(0.5, 0.8)
        px, py = xx - cx, yy - cy
        along = px * ux + py * uy
        across = np.abs(-px * uy + py * ux)
        width = 0.9 * (1.0 - np.clip((along - r0) / (length - r0), 0, 1)) + 0.3
        mask = np.maximum(mask, ((along > r0 * 0.5) & (along < length) & (across < width)).astype(float))
    return mask


def _interior(echo: EchoPattern, rng, h, w) -> np.ndarray:
    level = ECHO_LEVEL[echo]
    if echo is EchoPattern.COMPLEX_CYSTIC_SOLID:
        blobs = _smooth_noise(rng, (h, w), sigma=max(h, w) / 40)
        return np.where(blobs > 0.4, 0.6, level)
    if echo is EchoPattern.HETEROGENEOUS:
        texture = _smooth_noise(rng, (h, w), sigma=1.5)
        return np.clip(level + 0.18 * texture, 0.05, 0.9)
    return np.full((h, w), level)


def render_phantom(spec: PhantomSpec) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Render one phantom; returns the [0, 1] image and the tight mass bbox."""
    labels = spec.labels
    h, w = spec.size
    rng = np.random.default_rng(spec.seed)
    m = min(h, w)

    major = m * rng.uniform(0.15, 0.21)
    if labels.shape is Shape.ROUND:
        ratio = rng.uniform(1.04, 1.08)
    elif labels.shape is Shape.OVAL:
        ratio = rng.uniform(1.6, 1.9)
    else:
        ratio = rng.uniform(1.5, 1.8)
    minor = major / ratio
    parallel = labels.orientation is Orientation.PARALLEL
    rx, ry = (major, minor) if parallel else (minor, major)
    cx = w * rng.uniform(0.38, 0.62)
    cy = h * rng.uniform(0.32, 0.42)

    theta_rng = np.random.default_rng([spec.seed, 1])
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    edge = 0.25 if labels.margin.indistinct else 0.03
    for _ in range(20):
        theta_rng = np.random.default_rng([spec.seed, 1])
        dx, dy = (xx - cx) / rx, (yy - cy) / ry
        rho = np.hypot(dx, dy)
        boundary = _radius_profile(np.arctan2(dy, dx), labels, theta_rng)
        body = 1.0 / (1.0 + np.exp(-(boundary - rho) / edge))
        rows, cols = np.nonzero(body > 0.5)
        bw, bh = cols.max() - cols.min() + 1, rows.max() - rows.min() + 1
        # keep the rendered aspect consistent with the orientation label
        if parallel and bw <= bh:
            rx *= 1.08
        elif not parallel and bh <= bw:
            ry *= 1.08
        else:
            break
    bbox = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)

    alpha = body
    if labels.margin.spiculated:
        spikes = ndimage.gaussian_filter(_spikes(h, w, cx, cy, rx, ry, theta_rng), 0.6)
        alpha = np.maximum(alpha, spikes)

    image = _background(rng, h, w)
    # posterior acoustic features: column strip under the mass
    x0, _, x1, y1 = bbox
    below = (yy >= y1 - 0.5 * (y1 - cy)) & (xx >= x0) & (xx < x1)
    depth_fade = np.clip((yy - y1) / (0.1 * h) + 1.0, 0.0, 1.0)
    gain = np.ones((h, w))
    mid = (x0 + x1) / 2
    if labels.posterior is Posterior.ENHANCEMENT:
        gain = np.where(below, 1.0 + 0.6 * depth_fade, 1.0)
    elif labels.posterior is Posterior.SHADOWING:
        gain = np.where(below, 1.0 - 0.65 * depth_fade, 1.0)
    elif labels.posterior is Posterior.COMBINED:
        gain = np.where(below & (xx < mid), 1.0 + 0.6 * depth_fade, gain)
        gain = np.where(below & (xx >= mid), 1.0 - 0.65 * depth_fade, gain)
    image = image * gain

    interior = _interior(labels.echo, rng, h, w)
    if labels.echo is EchoPattern.ISOECHOIC:
        rim = np.exp(-(((boundary - rho) / 0.08) ** 2))
        interior = interior - 0.2 * rim
    image = image * (1 - alpha) + interior * alpha

    var = spec.speckle_variance
    if var > 0:
        speckle = rng.gamma(1.0 / var, var, size=(h, w))
        speckle = ndimage.gaussian_filter(speckle, 0.6)
        image = image * speckle / speckle.mean()
    return np.clip(image, 0.0, 1.0), bbox


def sample_labels(rng, malignant: bool, rule: ScoringRule = ScoringRule(), max_tries: int = 10_000):
    """Draw descriptor labels uniformly, rejecting until the class matches."""
    for _ in range(max_tries):
        circumscribed = bool(rng.random() < 0.5)
        if circumscribed:
            margin = Margin(True)
        else:
            flags = [False] * 4
            while not any(flags):
                flags = [bool(f) for f in rng.random(4) < 0.4]
            margin = Margin(False, *flags)
        labels = DescriptorLabels(
            Shape.from_code(rng.integers(3)),
            Orientation.from_code(rng.integers(2)),
            margin,
            EchoPattern.from_code(rng.integers(6)),
            Posterior.from_code(rng.integers(4)),
        )
        category, tumor = score_labels(labels, rule)
        if (tumor is TumorClass.MALIGNANT) == malignant:
            return labels, category, tumor
    raise RuntimeError("could not sample labels for the requested class")


def generate_dataset(
    n: int,
    seed: int,
    out_dir: str | Path,
    size: tuple[int, int] = (128, 192),
    malignant_fraction: float = 0.4,
    speckle_variance: float = 0.05,
    rule: ScoringRule = ScoringRule(),
) -> DatasetManifest:
    """Render ``n`` phantoms to ``out_dir/images`` and write ``manifest.csv``.

    A sidecar ``phantom.json`` records the generator settings.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.3 <= malignant_fraction <= 0.5:
        raise ValueError("malignant_fraction must lie in [0.3, 0.5]")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    n_malignant = int(math.floor(n * malignant_fraction + 0.5))
    is_malignant = np.zeros(n, dtype=bool)
    is_malignant[:n_malignant] = True
    is_malignant = np.random.default_rng([seed, 0]).permutation(is_malignant)

    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, 1, i])
        labels, category, tumor = sample_labels(rng, bool(is_malignant[i]), rule)
        spec = PhantomSpec(labels, size, int(rng.integers(2**31)), speckle_variance)
        image, bbox = render_phantom(spec)
        path = image_dir / f"phantom_{i:05d}.png"
        Image.fromarray(np.rint(image * 255).astype(np.uint8), mode="L").save(path)
        records.append(ImageRecord(path, bbox, labels, category, tumor))

    manifest = DatasetManifest(tuple(records), source=f"phantom seed={seed}")
    write_manifest(manifest, out_dir / "manifest.csv")
    sidecar = {
        "n": n,
        "seed": seed,
        "size": list(size),
        "malignant_fraction": malignant_fraction,
        "speckle_variance": speckle_variance,
        "scoring_rule": asdict(rule),
    }
    (out_dir / "phantom.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    return manifest
