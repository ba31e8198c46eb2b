"""Sample persistence (16-bit PNG + JSON sidecar) and external image ingestion."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .sample import MammogramSample

TARGET_SPACING_MM = 0.1


def write_png16(image: np.ndarray, path: str | Path) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def read_png16(path: str | Path) -> np.ndarray:
    """Read a grayscale PNG and rescale to [0, 1] by its bit depth."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=-1)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32, np.int16, np.uint32):
        scale = 65535.0
    else:
        scale = float(arr.max()) or 1.0
    return (arr.astype(np.float64) / scale).astype(np.float32)


def atomic_write_json(obj: Any, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def save_sample(sample: MammogramSample, image_path: str | Path, meta_path: str | Path) -> None:
    write_png16(sample.image, image_path)
    with open(meta_path, "w") as fh:
        json.dump(sample.meta(), fh, indent=1, sort_keys=True)


def load_sample(image_path: str | Path, meta_path: str | Path) -> MammogramSample:
    with open(meta_path) as fh:
        meta = json.load(fh)
    return MammogramSample.from_meta(read_png16(image_path), meta)


def resample(image: np.ndarray, source_spacing: float, target_spacing: float) -> np.ndarray:
    """Bilinear resampling to a new pixel spacing; output dims are rounded."""
    if source_spacing <= 0 or target_spacing <= 0:
        raise ValueError("pixel spacings must be positive")
    h, w = image.shape
    factor = source_spacing / target_spacing
    out_h, out_w = int(round(h * factor)), int(round(w * factor))
    if (out_h, out_w) == (h, w):
        return np.asarray(image, dtype=np.float32)
    im = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    return np.asarray(im.resize((out_w, out_h), Image.BILINEAR), dtype=np.float32)


def estimate_geometry(image: np.ndarray, threshold: float = 0.05):
    """Nipple/chest-wall heuristic for images without ground-truth geometry.

    The breast is the set of pixels above ``threshold`` (relative to the image
    maximum). The chest wall is whichever vertical image edge has the most
    breast pixels along it; the nipple is the breast pixel farthest from that
    edge (median row among ties). Returns ``(nipple_px, chestwall_line, found)``.
    """
    h, w = image.shape
    peak = float(image.max()) if image.size else 0.0
    if peak <= 0:
        return None, None, False
    mask = image > threshold * peak
    if not mask.any():
        return None, None, False
    left, right = mask[:, 0].sum(), mask[:, -1].sum()
    cols = np.nonzero(mask.any(axis=0))[0]
    if left >= right:
        edge = -0.5
        far = cols.max()
    else:
        edge = w - 0.5
        far = cols.min()
    rows = np.nonzero(mask[:, far])[0]
    nipple = (float(far), float(np.median(rows)))
    return nipple, ((edge, 0.0), (edge, float(h - 1))), True


def load_external_image(path: str | Path, source_pixel_spacing: float, *,
                        view: str = "CC", laterality: str | None = None,
                        patient_id: str | None = None, domain: str | None = None,
                        target_spacing: float = TARGET_SPACING_MM) -> MammogramSample:
    """Ingest a grayscale image from disk into a standardized sample.

    Intensities are min-max rescaled to [0, 1] and the image is resampled to
    ``target_spacing``. Geometry comes from :func:`estimate_geometry`; a blank
    image yields ``breast_found=False``.
    """
    if not source_pixel_spacing > 0:
        raise ValueError(f"source_pixel_spacing must be > 0, got {source_pixel_spacing}")
    try:
        raw = read_png16(path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    lo, hi = float(raw.min()), float(raw.max())
    img = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    img = np.clip(resample(img, source_pixel_spacing, target_spacing), 0.0, 1.0)
    nipple, chestwall, found = estimate_geometry(img)
    if laterality is None:
        laterality = "R" if chestwall is None or chestwall[0][0] < 0 else "L"
    return MammogramSample(
        image=img, view=view, laterality=laterality,
        patient_id=patient_id or Path(path).stem, domain=domain,
        pixel_spacing=target_spacing, nipple_px=nipple, chestwall_line=chestwall,
        breast_found=found)
