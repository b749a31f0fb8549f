"""Synthetic weak-boundary dataset generation, raster I/O, and augmentation.

Generated samples are smooth random blobs whose intensity blends into the
background across a Gaussian-blurred boundary band, over a noisy backdrop:
the ground-truth mask is the sharp blob support, but the image itself offers
only a low-contrast, ambiguous edge. Everything is derived from a single
seed, so a config reproduces the dataset byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from . import tensor as T
from .errors import ConfigError, ContractError, DataError
from .rng import Rng


@dataclass
class SynthConfig:
    """Generator knobs; every range must be non-degenerate."""

    count: int = 16
    image_size: int = 64
    blob_count: tuple = (1, 3)
    contrast: tuple = (0.15, 0.5)
    blur_sigma: tuple = (1.0, 3.0)
    noise: float = 0.08
    area_range: tuple = (0.05, 0.35)
    seed: int = 0

    def __post_init__(self):
        self.blob_count = tuple(self.blob_count)
        self.contrast = tuple(self.contrast)
        self.blur_sigma = tuple(self.blur_sigma)
        self.area_range = tuple(self.area_range)
        if self.count < 1 or self.image_size < 8:
            raise ConfigError("count must be >= 1 and image_size >= 8")
        for name in ("blob_count", "contrast", "blur_sigma", "area_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range ({lo}, {hi}) is inverted")
        if self.blob_count[0] < 1:
            raise ConfigError("need at least one blob per sample")
        if not 0.0 < self.area_range[0] <= self.area_range[1] < 1.0:
            raise ConfigError("area_range must sit strictly inside (0, 1)")


@dataclass
class SampleRecord:
    image_path: str
    mask_path: str
    split: str = "train"


# -- generation ---------------------------------------------------------------


def _one_blob(rng: Rng, size: int) -> np.ndarray:
    """A smooth closed region: an ellipse with low-order radial harmonics."""
    cy, cx = rng.uniform(0.3, 0.7, (2,)) * size
    base_r = rng.uniform(0.10, 0.24) * size
    aspect = rng.uniform(0.65, 1.5)
    tilt = rng.uniform(0.0, 2.0 * np.pi)
    amps = rng.uniform(0.0, 0.18, (3,)) / np.arange(1.0, 4.0)
    phases = rng.uniform(0.0, 2.0 * np.pi, (3,))
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    ry = np.cos(tilt) * dy - np.sin(tilt) * dx
    rx = np.sin(tilt) * dy + np.cos(tilt) * dx
    ry = ry * aspect
    radius = np.hypot(ry, rx)
    angle = np.arctan2(ry, rx)
    boundary = base_r
    for k in range(3):
        boundary = boundary + base_r * amps[k] * np.cos((k + 1) * angle + phases[k])
    return radius <= boundary


def _blob_mask(rng: Rng, cfg: SynthConfig, n_blobs: int) -> np.ndarray:
    lo, hi = cfg.area_range
    for attempt in range(200):
        attempt_rng = rng.child(attempt)
        mask = np.zeros((cfg.image_size, cfg.image_size), dtype=bool)
        for b in range(n_blobs):
            mask |= _one_blob(attempt_rng.child(b), cfg.image_size)
        if lo <= mask.mean() <= hi:
            return mask
    raise ContractError(
        f"no mask with area in [{lo}, {hi}] after 200 draws; widen the range"
    )


def _render(rng: Rng, mask: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """8-bit image whose blob/background gap is soft at the boundary."""
    size = mask.shape[0]
    background = rng.uniform(0.3, 0.6)
    gap = rng.uniform(*cfg.contrast)
    if rng.uniform() < 0.5:
        gap = -gap
    foreground = float(np.clip(background + gap, 0.02, 0.98))
    sigma = rng.uniform(*cfg.blur_sigma)
    soft = ndimage.gaussian_filter(mask.astype(np.float64), sigma)
    base = background + (foreground - background) * soft
    tint = rng.uniform(-0.04, 0.04, (3,))
    img = base[:, :, None] + tint[None, None, :]
    img = img + rng.normal((size, size, 3), std=cfg.noise)
    # a patch of low-frequency texture so thresholding alone cannot win
    img = img + ndimage.gaussian_filter(
        rng.normal((size, size, 1), std=1.0), (4.0, 4.0, 0.0)
    ) * (cfg.noise * 2.0)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def gen_synthetic(cfg: SynthConfig, out_dir) -> list:
    """Write image/mask PNG pairs under out_dir; returns their records."""
    root = Path(out_dir)
    img_dir, mask_dir = root / "images", root / "masks"
    img_dir.mkdir(parents=True, exist_ok=True)
    mask_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(cfg.count):
        sample_rng = Rng(cfg.seed).child("sample", i)
        n_blobs = int(
            sample_rng.child("n").integers(cfg.blob_count[0], cfg.blob_count[1] + 1)
        )
        mask = _blob_mask(sample_rng.child("mask"), cfg, n_blobs)
        image = _render(sample_rng.child("render"), mask, cfg)
        image_path = img_dir / f"{i:04d}.png"
        mask_path = mask_dir / f"{i:04d}.png"
        Image.fromarray(image, mode="RGB").save(image_path)
        Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(mask_path)
        records.append(SampleRecord(str(image_path), str(mask_path)))
    return records


# -- I/O ----------------------------------------------------------------------


def _decode(path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except FileNotFoundError:
        raise DataError(f"missing file {path}")
    except OSError as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def load_image(path) -> np.ndarray:
    """(H, W, 3) floats in [0, 1]."""
    return _decode(path, "RGB").astype(np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    """(H, W) strictly binary floats; 8-bit values >= 128 count as lesion."""
    return (_decode(path, "L") >= 128).astype(np.float64)


def load_pair(record: SampleRecord):
    image = load_image(record.image_path)
    mask = load_mask(record.mask_path)
    if image.shape[:2] != mask.shape:
        raise DataError(
            f"extent mismatch: {record.image_path} is {image.shape[:2]}, "
            f"{record.mask_path} is {mask.shape}"
        )
    return image, mask


def save_mask(path, values: np.ndarray) -> None:
    """Write a [0, 1] map as an 8-bit single-channel PNG."""
    arr = (np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255.0).round()
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def list_dataset(root, split: str = "train") -> list:
    """Pair up <root>/images/*.png with <root>/masks/<same name>."""
    img_dir, mask_dir = Path(root) / "images", Path(root) / "masks"
    if not img_dir.is_dir():
        raise DataError(f"no images directory under {root}")
    records = []
    for image_path in sorted(img_dir.glob("*.png")):
        mask_path = mask_dir / image_path.name
        if not mask_path.exists():
            raise DataError(f"no mask for {image_path.name} under {mask_dir}")
        records.append(SampleRecord(str(image_path), str(mask_path), split))
    if not records:
        raise DataError(f"no samples found under {root}")
    return records


# -- resizing and augmentation -------------------------------------------------


def _resize_image(image: np.ndarray, hw: tuple) -> np.ndarray:
    return T.resize_bilinear(T.as_tensor(image), hw).data


def _resize_mask(mask: np.ndarray, hw: tuple) -> np.ndarray:
    out = T.resize_nearest(T.as_tensor(mask[:, :, None]), hw).data
    return out.reshape(hw)


def fit_to_size(image: np.ndarray, mask: np.ndarray, size: int):
    """Deterministic resize of a pair to (size, size); masks stay binary."""
    if image.shape[:2] != (size, size):
        image = _resize_image(image, (size, size))
    if mask.shape != (size, size):
        mask = _resize_mask(mask, (size, size))
    return image, mask


def augment(image: np.ndarray, mask: np.ndarray, rng: Rng, scales, size: int):
    """Random rescale from the configured factors, then crop or fit to size."""
    scales = tuple(scales)
    pick = float(scales[int(rng.integers(0, len(scales)))])
    if pick != 1.0:
        hh = max(1, round(image.shape[0] * pick))
        ww = max(1, round(image.shape[1] * pick))
        image = _resize_image(image, (hh, ww))
        mask = _resize_mask(mask, (hh, ww))
    hh, ww = mask.shape
    if hh == size and ww == size:
        return image, mask
    if hh >= size and ww >= size:
        top = int(rng.integers(0, hh - size + 1))
        left = int(rng.integers(0, ww - size + 1))
        return (
            image[top : top + size, left : left + size],
            mask[top : top + size, left : left + size],
        )
    return fit_to_size(image, mask, size)
