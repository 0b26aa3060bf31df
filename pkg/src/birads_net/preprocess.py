"""Image preparation: tumor-square crop, resize, channel synthesis, augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.transform import resize as _sk_resize


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 256
    use_crop: bool = True
    use_three_channels: bool = True
    smoothing_sigma: float = 1.0

    def __post_init__(self):
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")
        if self.smoothing_sigma <= 0:
            raise ValueError("smoothing_sigma must be positive")


@dataclass(frozen=True)
class AugmentConfig:
    zoom_range: float = 0.20
    width_shift: float = 0.10
    rotation_deg: float = 5.0
    shear: float = 0.20  # radians
    horizontal_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("zoom_range", "width_shift", "rotation_deg", "shear"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, False, seed)


def load_gray(path: str | Path) -> np.ndarray:
    """Load an 8- or 16-bit grayscale PNG as float64 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return np.clip(arr / 65535.0, 0.0, 1.0)
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.float64) / 255.0


def square_window(height: int, width: int, bbox) -> tuple[int, int, int]:
    """Return ``(x0, y0, side)`` of the bbox-centered square of side min(H, W)."""
    if height <= 0 or width <= 0:
        raise ValueError(f"degenerate image of size {height}x{width}")
    x0, y0, x1, y1 = bbox
    side = min(height, width)
    left = math.floor((x0 + x1) / 2 - side / 2 + 0.5)
    top = math.floor((y0 + y1) / 2 - side / 2 + 0.5)
    left = min(max(left, 0), width - side)
    top = min(max(top, 0), height - side)
    return left, top, side


def crop_tumor_square(image: np.ndarray, bbox) -> np.ndarray:
    """Crop the largest square (side min(H, W)) around the tumor bbox.

    The square is centered on the bbox and shifted the least amount needed to
    lie inside the image.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {image.shape}")
    left, top, side = square_window(image.shape[0], image.shape[1], bbox)
    return image[top : top + side, left : left + side]


def resize(image: np.ndarray, size: int = 256) -> np.ndarray:
    """Bilinear resize to ``size x size``."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] == (size, size):
        return image.copy()
    out = _sk_resize(
        image, (size, size), order=1, mode="edge", anti_aliasing=False, preserve_range=True
    )
    return np.clip(out, image.min(), image.max())


def equalize_histogram(gray: np.ndarray, levels: int = 256) -> np.ndarray:
    """Histogram equalization of a [0, 1] image over ``levels`` gray levels.

    A constant image is returned unchanged.
    """
    q = np.clip(np.rint(gray * (levels - 1)), 0, levels - 1).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=levels)
    cdf = np.cumsum(hist) / q.size
    cdf_min = cdf[q.min()]
    if cdf_min >= 1.0:
        return np.array(gray, dtype=np.float64, copy=True)
    return (cdf[q] - cdf_min) / (1.0 - cdf_min)


def smooth(gray: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    return ndimage.gaussian_filter(
        np.asarray(gray, dtype=np.float64), sigma=sigma, mode="reflect", radius=math.ceil(2 * sigma)
    )


def synthesize_channels(image: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Stack gray, equalized and smoothed versions into an H x W x 3 array."""
    gray = np.asarray(image, dtype=np.float64)
    if not config.use_three_channels:
        return np.repeat(gray[..., None], 3, axis=2)
    return np.stack([gray, equalize_histogram(gray), smooth(gray, config.smoothing_sigma)], axis=2)


def preprocess_image(image: np.ndarray, bbox, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Full deterministic chain for one [0, 1] gray image; returns S x S x 3 float32."""
    if config.use_crop:
        image = crop_tumor_square(image, bbox)
    return synthesize_channels(resize(image, config.target_size), config).astype(np.float32)


def augment_params(config: AugmentConfig, sample_index: int = 0, epoch: int = 0) -> dict:
    rng = np.random.default_rng([config.seed, epoch, sample_index])
    draws = rng.uniform(-1.0, 1.0, size=4)
    flip = rng.random() < 0.5
    return {
        "zoom": 1.0 + config.zoom_range * draws[0],
        "shift": config.width_shift * draws[1],
        "rotation": math.radians(config.rotation_deg * draws[2]),
        "shear": config.shear * draws[3],
        "flip": bool(config.horizontal_flip and flip),
    }


def _affine_matrix(zoom: float, rotation: float, shear: float) -> np.ndarray:
    """Output->input coordinate map in (row, col) order."""
    c, s = math.cos(rotation), math.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    shear_m = np.array([[1.0, 0.0], [-math.sin(shear), math.cos(shear)]])
    forward = rot @ shear_m * zoom
    return np.linalg.inv(forward)


def apply_augmentation(image: np.ndarray, params: dict) -> np.ndarray:
    """Apply one geometric transform identically to every channel of H x W x C."""
    out = np.asarray(image)
    if params["flip"]:
        out = out[:, ::-1, :]
    h, w = out.shape[:2]
    matrix = _affine_matrix(params["zoom"], params["rotation"], params["shear"])
    shift_px = params["shift"] * w
    if np.allclose(matrix, np.eye(2)) and shift_px == 0.0:
        return np.ascontiguousarray(out)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ (center + np.array([0.0, shift_px]))
    channels = [
        ndimage.affine_transform(out[..., ch], matrix, offset=offset, order=1, mode="nearest")
        for ch in range(out.shape[2])
    ]
    return np.stack(channels, axis=2).astype(image.dtype, copy=False)


def augment(image: np.ndarray, labels, config: AugmentConfig, sample_index: int = 0, epoch: int = 0):
    """Random zoom/shift/rotation/shear/flip; the labels are returned untouched."""
    return apply_augmentation(image, augment_params(config, sample_index, epoch)), labels


def load_and_preprocess(path, bbox, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    gray = load_gray(path)
    x0, y0, x1, y1 = bbox
    if not (0 <= x0 < x1 <= gray.shape[1] and 0 <= y0 < y1 <= gray.shape[0]):
        raise ValueError(f"bbox {tuple(bbox)} outside image of size {gray.shape[1]}x{gray.shape[0]}")
    return preprocess_image(gray, bbox, config)
