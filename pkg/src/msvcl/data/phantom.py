"""Parametric breast phantoms.

Breast-local frame (mm): ``x`` runs from the chest wall (x = 0) towards the
nipple at ``(depth, 0, 0)``, ``y`` is medio-lateral and ``z`` is the
compression axis of the CC view. The breast is the half super-ellipsoid

    (x / depth)^p + |y / half_width|^p + |z / half_thickness|^p <= 1,  x >= 0

The CC view projects along ``z``; the MLO view projects along the oblique axis
rotated by ``mlo_angle_deg`` about ``x``, so its in-plane coordinate is
``u = y cos(theta) + z sin(theta)``. Both views keep ``x``, so radial nipple
distances agree across views up to the out-of-plane component, which lesion
placement keeps small.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..config import BIRADS_TABLE

BIRADS_LABELS = ("2-3", "4A", "4B", "4C", "5")
DENSITY_LABELS = ("non-dense", "dense")

MLO_ANGLE_DEG = 45.0
# Minimum ratio of in-plane to 3-D nipple distance accepted during placement.
MIN_PROJECTION_RATIO = 0.93
CONTRAST_RANGE = (0.1, 0.4)


class PlacementError(RuntimeError):
    """Lesions could not be placed within the retry budget."""


@dataclass(frozen=True)
class LesionSpec:
    center_3d: tuple[float, float, float]
    radius: float
    margin_irregularity: float
    contrast: float
    birads_label: str
    lesion_id: int = 0
    shape_seed: int = 0


@dataclass(frozen=True)
class BreastPhantom:
    patient_id: str
    laterality: str
    density_class: str
    fibroglandular_fraction: float
    lesions: tuple[LesionSpec, ...]
    shape_params: Mapping[str, float]
    nipple_pos_3d: tuple[float, float, float]
    seed: int = 0

    @property
    def depth(self) -> float:
        return self.shape_params["depth"]


def suspicion_score(margin_irregularity: float, contrast: float) -> float:
    lo, hi = CONTRAST_RANGE
    return 0.7 * margin_irregularity + 0.3 * (contrast - lo) / (hi - lo)


def birads_label(margin_irregularity: float, contrast: float,
                 table: Sequence[Mapping] = BIRADS_TABLE) -> str:
    """Monotone lookup of the BI-RADS label from lesion appearance."""
    s = suspicion_score(margin_irregularity, contrast)
    for row in table:
        if row["lo"] <= s < row["hi"]:
            return row["label"]
    return table[-1]["label"] if s >= table[-1]["lo"] else table[0]["label"]


def project(point: Sequence[float], view: str, angle_deg: float = MLO_ANGLE_DEG) -> tuple[float, float]:
    """In-plane (x, lateral) coordinates of a 3-D point in the given view."""
    x, y, z = point
    if view == "CC":
        return float(x), float(y)
    if view == "MLO":
        t = np.deg2rad(angle_deg)
        return float(x), float(y * np.cos(t) + z * np.sin(t))
    raise ValueError(f"unknown view {view!r}")


def view_half_width(shape: Mapping[str, float], view: str, angle_deg: float = MLO_ANGLE_DEG) -> float:
    b, c = shape["half_width"], shape["half_thickness"]
    if view == "CC":
        return b
    t = np.deg2rad(angle_deg)
    return float(np.hypot(b * np.cos(t), c * np.sin(t)))


def outline_level(x: float, lateral: float, shape: Mapping[str, float], view: str) -> float:
    """Super-ellipse level of an in-plane point; < 1 is inside the breast outline."""
    p = shape["exponent"]
    return (max(x, 0.0) / shape["depth"]) ** p + abs(lateral / view_half_width(shape, view)) ** p


def pectoral_line(shape: Mapping[str, float]) -> tuple[tuple[float, float], tuple[float, float]]:
    """Pectoral muscle edge in MLO in-plane mm: from (x0, top) to (0, lateral1).

    The wedge occupies the chest-wall corner on the positive-lateral (upper) side.
    """
    hw = view_half_width(shape, "MLO")
    top = hw * 1.05
    return (shape["pectoral_depth"], top), (0.0, top - shape["pectoral_height"])


def in_pectoral(x: float, lateral: float, shape: Mapping[str, float]) -> bool:
    (x0, l0), (_, l1) = pectoral_line(shape)
    if x < 0 or x > x0:
        return False
    # the muscle is above the line joining (x0, l0) and (0, l1)
    boundary = l1 + (l0 - l1) * (x / x0)
    return lateral >= boundary


def nipple_distance_mm(point: Sequence[float], nipple: Sequence[float], view: str) -> float:
    px, pl = project(point, view)
    nx, nl = project(nipple, view)
    return float(np.hypot(px - nx, pl - nl))


def _sample_shape(rng: np.random.Generator) -> dict[str, float]:
    return {
        "depth": float(rng.uniform(58.0, 70.0)),
        "half_width": float(rng.uniform(44.0, 56.0)),
        "half_thickness": float(rng.uniform(22.0, 30.0)),
        "exponent": float(rng.uniform(1.8, 2.4)),
        "pectoral_depth": float(rng.uniform(18.0, 28.0)),
        "pectoral_height": float(rng.uniform(30.0, 45.0)),
    }


def _sample_appearance(rng: np.random.Generator, table) -> tuple[float, float, str]:
    target = BIRADS_LABELS[int(rng.integers(len(BIRADS_LABELS)))]
    for _ in range(1000):
        irr = float(rng.uniform(0.0, 1.0))
        contrast = float(rng.uniform(*CONTRAST_RANGE))
        if birads_label(irr, contrast, table) == target:
            return irr, contrast, target
    raise PlacementError("could not sample lesion appearance")  # pragma: no cover


def generate_phantom(seed: int, density_class: str, n_lesions: int, *,
                     patient_id: str | None = None, laterality: str | None = None,
                     radius_mm: tuple[float, float] = (4.0, 9.0),
                     retry_budget: int = 2000,
                     birads_table: Sequence[Mapping] = BIRADS_TABLE) -> BreastPhantom:
    """Draw a phantom deterministically from ``seed``.

    Raises:
        ValueError: for negative ``n_lesions`` or an unknown density class.
        PlacementError: if non-overlapping lesions cannot be placed within
            ``retry_budget`` attempts.
    """
    if n_lesions < 0:
        raise ValueError(f"n_lesions must be >= 0, got {n_lesions}")
    if density_class not in DENSITY_LABELS:
        raise ValueError(f"density_class must be one of {DENSITY_LABELS}, got {density_class!r}")
    rng = np.random.default_rng(seed)
    shape = _sample_shape(rng)
    if laterality is None:
        laterality = "L" if rng.random() < 0.5 else "R"
    if density_class == "dense":
        fraction = float(rng.uniform(0.6, 0.85))
    else:
        fraction = float(rng.uniform(0.15, 0.4))
    nipple = (shape["depth"], 0.0, 0.0)

    lesions: list[LesionSpec] = []
    attempts = 0
    while len(lesions) < n_lesions:
        attempts += 1
        if attempts > retry_budget:
            raise PlacementError(
                f"placed {len(lesions)} of {n_lesions} lesions after {retry_budget} attempts")
        r = float(rng.uniform(*radius_mm))
        x = float(rng.uniform(0.15, 0.85) * shape["depth"])
        y = float(rng.uniform(-0.6, 0.6) * shape["half_width"])
        z = float(rng.uniform(-0.35, 0.35) * shape["half_thickness"])
        if not _placement_ok((x, y, z), r, shape, nipple, lesions):
            continue
        irr, contrast, label = _sample_appearance(rng, birads_table)
        lesions.append(LesionSpec(
            center_3d=(x, y, z), radius=r, margin_irregularity=irr, contrast=contrast,
            birads_label=label, lesion_id=len(lesions), shape_seed=int(rng.integers(2**31))))

    return BreastPhantom(
        patient_id=patient_id if patient_id is not None else f"P{seed}",
        laterality=laterality, density_class=density_class,
        fibroglandular_fraction=fraction, lesions=tuple(lesions),
        shape_params=shape, nipple_pos_3d=nipple, seed=int(seed))


def _placement_ok(center, r, shape, nipple, placed: list[LesionSpec]) -> bool:
    p = shape["exponent"]
    x, y, z = center
    # fully inside the 3-D breast with a one-radius margin
    level = (x / shape["depth"]) ** p + abs(y / shape["half_width"]) ** p \
        + abs(z / shape["half_thickness"]) ** p
    if level > 0.8:
        return False
    d3 = float(np.linalg.norm(np.subtract(center, nipple)))
    if d3 < 2 * r:
        return False
    for view in ("CC", "MLO"):
        px, pl = project(center, view)
        if px < r + 2.0:
            return False
        rim = [(px + r * np.cos(a), pl + r * np.sin(a)) for a in np.linspace(0, 2 * np.pi, 8, endpoint=False)]
        if any(outline_level(qx, ql, shape, view) >= 0.95 for qx, ql in rim):
            return False
        if view == "MLO" and in_pectoral(px - r, pl + r, shape):
            return False
        if nipple_distance_mm(center, nipple, view) < MIN_PROJECTION_RATIO * d3:
            return False
        for other in placed:
            ox, ol = project(other.center_3d, view)
            if np.hypot(px - ox, pl - ol) < r + other.radius + 3.0:
                return False
    return True
