"""Parametric vendor-style engine.

A style is a fixed chain of intensity operations applied to a raw phantom
render in [0, 1]:

    blur -> gamma -> normalized sigmoid contrast -> offset -> noise -> clip

The deterministic part (gamma, contrast, offset) is invertible, which lets
:func:`transfer` map an image from one style to another without access to
the raw render, the same role a learned unpaired generator plays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from scipy import ndimage

DOMAINS = ("A", "B", "C", "D", "E", "F")
SEEN = frozenset({"A", "B", "C"})

_EPS = 1e-6


@dataclass(frozen=True)
class StyleDomainId:
    id: str

    def __post_init__(self):
        if self.id not in DOMAINS:
            raise ValueError(f"unknown style domain {self.id!r}")

    @property
    def seen(self) -> bool:
        return self.id in SEEN


@dataclass(frozen=True)
class StyleParams:
    gamma: float = 1.0
    contrast_midpoint: float = 0.5
    contrast_slope: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma_px: float = 0.0
    intensity_offset: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 <= self.contrast_midpoint <= 1.0:
            raise ValueError(f"contrast_midpoint must lie in [0, 1], got {self.contrast_midpoint}")
        if self.noise_sigma < 0 or self.blur_sigma_px < 0:
            raise ValueError("noise_sigma and blur_sigma_px must be >= 0")
        if not -0.2 <= self.intensity_offset <= 0.2:
            raise ValueError(f"intensity_offset must lie in [-0.2, 0.2], got {self.intensity_offset}")

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> "StyleParams":
        return cls(**{k: float(v) for k, v in d.items()})

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


IDENTITY = StyleParams()


def style_table(table: Mapping[str, Mapping[str, float]]) -> dict[str, StyleParams]:
    return {k: StyleParams.from_dict(v) for k, v in table.items()}


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _contrast(x: np.ndarray, mid: float, slope: float) -> np.ndarray:
    if slope == 0:
        return x
    lo, hi = _sigmoid(-slope * mid), _sigmoid(slope * (1.0 - mid))
    return (_sigmoid(slope * (x - mid)) - lo) / (hi - lo)


def _contrast_inverse(y: np.ndarray, mid: float, slope: float) -> np.ndarray:
    if slope == 0:
        return y
    lo, hi = _sigmoid(-slope * mid), _sigmoid(slope * (1.0 - mid))
    s = np.clip(y * (hi - lo) + lo, _EPS, 1 - _EPS)
    return mid + np.log(s / (1 - s)) / slope


def deterministic_stages(image: np.ndarray, params: StyleParams) -> np.ndarray:
    """Blur, gamma, contrast and offset, without noise or clipping."""
    x = np.asarray(image, dtype=np.float64)
    if params.blur_sigma_px > 0:
        x = ndimage.gaussian_filter(x, params.blur_sigma_px, mode="nearest")
    x = np.clip(x, 0.0, 1.0) ** params.gamma
    x = _contrast(x, params.contrast_midpoint, params.contrast_slope)
    return x + params.intensity_offset


def apply_style(image: np.ndarray, params: StyleParams,
                rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Render ``image`` (values in [0, 1]) in the style described by ``params``.

    Noise is drawn from ``rng`` (a Generator or an integer seed); with
    ``noise_sigma == 0`` the result is fully deterministic.
    """
    x = deterministic_stages(image, params)
    if params.noise_sigma > 0:
        rng = np.random.default_rng(rng)
        x = x + rng.normal(0.0, params.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def invert_style(image: np.ndarray, params: StyleParams) -> np.ndarray:
    """Approximate pre-style image: undoes offset, contrast and gamma (not blur/noise)."""
    y = np.asarray(image, dtype=np.float64) - params.intensity_offset
    y = np.clip(y, 0.0, 1.0)
    x = np.clip(_contrast_inverse(y, params.contrast_midpoint, params.contrast_slope), 0.0, 1.0)
    return x ** (1.0 / params.gamma)


def transfer(image: np.ndarray, src: StyleParams, dst: StyleParams,
             rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Map an image rendered in style ``src`` to style ``dst``."""
    if src == dst:
        return np.asarray(image, dtype=np.float32)
    return apply_style(invert_style(image, src), dst, rng)


def blend(image_a: np.ndarray, image_b: np.ndarray, alpha: float) -> np.ndarray:
    """Pixelwise ``image_a * (1 - alpha) + image_b * alpha``."""
    a = np.asarray(image_a)
    b = np.asarray(image_b)
    if a.shape != b.shape:
        raise ValueError(f"blend shape mismatch: {a.shape} vs {b.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return a * (1.0 - alpha) + b * alpha
