"""Image-level records shared by every stage: samples and boxes."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

Point = tuple[float, float]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates (``x`` = column, ``y`` = row).

    Ground-truth boxes carry ``lesion_id`` (and ``label`` when known);
    predicted boxes carry ``score``.
    """

    x: float
    y: float
    w: float
    h: float
    score: float | None = None
    lesion_id: int | None = None
    label: str | None = None

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def center(self) -> Point:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def xyxy(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.x + self.w, self.y + self.h

    def within(self, height: int, width: int, tol: float = 1e-6) -> bool:
        return (self.x >= -tol and self.y >= -tol
                and self.x + self.w <= width + tol and self.y + self.h <= height + tol)

    def to_dict(self) -> dict[str, Any]:
        d = {"x": self.x, "y": self.y, "w": self.w, "h": self.h}
        for key in ("score", "lesion_id", "label"):
            val = getattr(self, key)
            if val is not None:
                d[key] = val
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "BoundingBox":
        return cls(**d)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def greedy_claims(predictions: Sequence[BoundingBox], ground_truth: Sequence[BoundingBox],
                  iou_threshold: float = 0.5) -> list[int | None]:
    """Index of the ground-truth box each prediction claims, or None.

    Predictions are visited by descending score (stable for ties); each takes
    the unclaimed ground-truth box with the highest IoU if that IoU reaches
    the threshold.
    """
    order = sorted(range(len(predictions)), key=lambda i: -(predictions[i].score or 0.0))
    claimed: set[int] = set()
    out: list[int | None] = [None] * len(predictions)
    for i in order:
        best, best_iou = None, iou_threshold
        for g, gt in enumerate(ground_truth):
            if g in claimed:
                continue
            v = iou(predictions[i], gt)
            if v >= best_iou:
                best, best_iou = g, v
        if best is not None:
            claimed.add(best)
            out[i] = best
    return out


@dataclass
class MammogramSample:
    image: np.ndarray
    view: str
    laterality: str
    patient_id: str
    domain: str | None
    pixel_spacing: float
    annotations: list[BoundingBox] = field(default_factory=list)
    nipple_px: Point | None = None
    chestwall_line: tuple[Point, Point] | None = None
    density_class: str | None = None
    breast_found: bool = True

    def __post_init__(self):
        if self.view not in ("CC", "MLO"):
            raise ValueError(f"view must be CC or MLO, got {self.view!r}")
        h, w = self.image.shape
        for box in self.annotations:
            if not box.within(h, w):
                raise ValueError(f"annotation {box} outside {w}x{h} image")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def with_image(self, image: np.ndarray, **changes) -> "MammogramSample":
        return replace(self, image=image, **changes)

    def meta(self) -> dict[str, Any]:
        """Everything except pixels, JSON-ready."""
        return {
            "view": self.view,
            "laterality": self.laterality,
            "patient_id": self.patient_id,
            "domain": self.domain,
            "pixel_spacing": self.pixel_spacing,
            "shape": list(self.image.shape),
            "annotations": [b.to_dict() for b in self.annotations],
            "nipple_px": list(self.nipple_px) if self.nipple_px is not None else None,
            "chestwall_line": [list(p) for p in self.chestwall_line] if self.chestwall_line else None,
            "density_class": self.density_class,
            "breast_found": self.breast_found,
        }

    @classmethod
    def from_meta(cls, image: np.ndarray, meta: dict[str, Any]) -> "MammogramSample":
        cw = meta.get("chestwall_line")
        nip = meta.get("nipple_px")
        return cls(
            image=image,
            view=meta["view"],
            laterality=meta["laterality"],
            patient_id=meta["patient_id"],
            domain=meta.get("domain"),
            pixel_spacing=float(meta["pixel_spacing"]),
            annotations=[BoundingBox.from_dict(b) for b in meta.get("annotations", [])],
            nipple_px=tuple(nip) if nip is not None else None,
            chestwall_line=(tuple(cw[0]), tuple(cw[1])) if cw else None,
            density_class=meta.get("density_class"),
            breast_found=meta.get("breast_found", True),
        )


def point_line_distance(p: Point, line: tuple[Point, Point]) -> float:
    (x0, y0), (x1, y1) = line
    dx, dy = x1 - x0, y1 - y0
    norm = np.hypot(dx, dy)
    if norm == 0:
        return float(np.hypot(p[0] - x0, p[1] - y0))
    return float(abs(dy * (p[0] - x0) - dx * (p[1] - y0)) / norm)
