"""Square ROI patches with anatomical features, TP/FP labeling and the cross-view gate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..data.io import estimate_geometry
from ..data.sample import BoundingBox, MammogramSample, greedy_claims, point_line_distance
from ..learning.augment import resize

ROI_ENLARGE = 1.2


@dataclass(frozen=True)
class RoiPatch:
    """Resized square patch around a box.

    ``square`` is the unclipped source window (x, y, side); the part of it
    outside the image is zero-filled, so the box center stays at the patch
    center.
    """

    patch: np.ndarray
    box: BoundingBox
    square: tuple[float, float, float]
    d_nipple: float
    d_chestwall: float
    size_mm2: float

    @property
    def features(self) -> np.ndarray:
        return np.array([self.d_nipple, self.d_chestwall, self.size_mm2], dtype=np.float32)


def roi_square(box: BoundingBox) -> tuple[float, float, float]:
    if not (box.w > 0 and box.h > 0):
        raise ValueError(f"degenerate box {box}")
    side = ROI_ENLARGE * max(box.w, box.h)
    cx, cy = box.center
    return cx - side / 2, cy - side / 2, side


def _geometry(sample: MammogramSample):
    if sample.nipple_px is not None and sample.chestwall_line is not None:
        return sample.nipple_px, sample.chestwall_line
    nipple, chestwall, _ = estimate_geometry(sample.image)
    return nipple, chestwall


def anatomical_features(sample: MammogramSample, box: BoundingBox) -> tuple[float, float, float]:
    """(distance to nipple, distance to chest wall, box area), all in mm units."""
    sp = sample.pixel_spacing
    nipple, chestwall = _geometry(sample)
    c = box.center
    d_nip = float(np.hypot(c[0] - nipple[0], c[1] - nipple[1]) * sp) if nipple is not None else 0.0
    d_cw = point_line_distance(c, chestwall) * sp if chestwall is not None else 0.0
    return d_nip, d_cw, box.w * box.h * sp * sp


def extract_roi(sample: MammogramSample, box: BoundingBox, out_size: int = 224) -> RoiPatch:
    x, y, side = roi_square(box)
    h, w = sample.image.shape
    n = max(1, int(round(side)))
    x0, y0 = int(round(x)), int(round(y))
    canvas = np.zeros((n, n), dtype=np.float32)
    sx0, sy0 = max(0, x0), max(0, y0)
    sx1, sy1 = min(w, x0 + n), min(h, y0 + n)
    if sx1 > sx0 and sy1 > sy0:
        canvas[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = sample.image[sy0:sy1, sx0:sx1]
    d_nip, d_cw, size = anatomical_features(sample, box)
    return RoiPatch(resize(canvas, out_size), box, (x, y, side), d_nip, d_cw, size)


@dataclass
class LabeledBoxes:
    boxes: list[BoundingBox]
    is_tp: list[bool]
    lesion_ids: list[int | None]


def label_boxes(predictions: Sequence[BoundingBox], ground_truth: Sequence[BoundingBox],
                iou_threshold: float = 0.5) -> LabeledBoxes:
    claims = greedy_claims(predictions, ground_truth, iou_threshold)
    return LabeledBoxes(list(predictions), [c is not None for c in claims],
                        [ground_truth[c].lesion_id if c is not None else None for c in claims])


def label_candidates(result, gt_cc: Sequence[BoundingBox], gt_mlo: Sequence[BoundingBox],
                     iou_threshold: float = 0.5) -> tuple[LabeledBoxes, LabeledBoxes]:
    """TP/FP split per view: a prediction is TP when it claims a ground-truth box."""
    return label_boxes(result.B_cc, gt_cc, iou_threshold), label_boxes(result.B_mlo, gt_mlo, iou_threshold)


def anatomical_gate(roi_cc: RoiPatch, roi_mlo: RoiPatch, nipple_rel: float = 0.2,
                    size_ratio: tuple[float, float] = (0.5, 2.0),
                    lesion_ids: tuple[int | None, int | None] | None = None) -> bool:
    """Whether two ROIs could show the same lesion.

    Requires a relative nipple-distance gap of at most ``nipple_rel`` and an
    area ratio inside ``size_ratio``. When both ``lesion_ids`` are known they
    must also agree.
    """
    top = max(roi_cc.d_nipple, roi_mlo.d_nipple)
    if top > 0 and abs(roi_cc.d_nipple - roi_mlo.d_nipple) / top > nipple_rel:
        return False
    if roi_mlo.size_mm2 <= 0:
        return False
    ratio = roi_cc.size_mm2 / roi_mlo.size_mm2
    if not (size_ratio[0] <= ratio <= size_ratio[1]):
        return False
    if lesion_ids is not None and None not in lesion_ids and lesion_ids[0] != lesion_ids[1]:
        return False
    return True
