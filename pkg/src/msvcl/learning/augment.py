"""Diversifying augmentations shared by every contrastive strategy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    max_rotation_deg: float = 10.0
    flip_p: float = 0.5
    jitter: float = 0.2
    output_size: int | None = None

    @classmethod
    def from_learning(cls, cfg: dict) -> "AugmentConfig":
        return cls(tuple(cfg["crop_scale"]), float(cfg["max_rotation_deg"]),
                   float(cfg["flip_p"]), float(cfg["jitter"]), int(cfg["input_size"]))


@dataclass(frozen=True)
class AugmentDraw:
    crop: tuple[int, int, int]  # top, left, side
    angle: float
    flip: bool
    brightness: float
    contrast: float


def sample_augment(shape: tuple[int, int], rng: np.random.Generator,
                   cfg: AugmentConfig = AugmentConfig()) -> AugmentDraw:
    h, w = shape
    lo, hi = cfg.crop_scale
    area = rng.uniform(lo, hi) if hi > lo else lo
    side = max(1, int(round(np.sqrt(area) * min(h, w))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    angle = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)) if cfg.max_rotation_deg else 0.0
    flip = bool(rng.random() < cfg.flip_p)
    j = cfg.jitter
    brightness = float(rng.uniform(1 - j, 1 + j)) if j else 1.0
    contrast = float(rng.uniform(1 - j, 1 + j)) if j else 1.0
    return AugmentDraw((top, left, side), angle, flip, brightness, contrast)


def resize(image: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``size`` (int for square, or (height, width))."""
    oh, ow = (size, size) if isinstance(size, int) else size
    if image.shape == (oh, ow):
        return image
    im = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    return np.asarray(im.resize((ow, oh), Image.BILINEAR), dtype=np.float32)


def apply_augment(image: np.ndarray, draw: AugmentDraw, output_size: int | None = None) -> np.ndarray:
    top, left, side = draw.crop
    x = np.asarray(image, dtype=np.float32)
    if side < min(x.shape):
        x = x[top:top + side, left:left + side]
    if output_size is not None:
        x = resize(x, output_size)
    if draw.angle:
        x = ndimage.rotate(x, draw.angle, reshape=False, order=1, mode="constant", cval=0.0)
    if draw.flip:
        x = x[:, ::-1]
    if draw.contrast != 1.0:
        mean = float(x.mean())
        x = (x - mean) * draw.contrast + mean
    if draw.brightness != 1.0:
        x = x * draw.brightness
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def augment(image: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random crop, rotation within +-max_rotation_deg, horizontal flip, intensity jitter."""
    return apply_augment(image, sample_augment(image.shape, rng, cfg), cfg.output_size)
