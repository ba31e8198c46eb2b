"""Projection rendering of phantoms into CC and MLO views."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..styles.parametric import StyleParams, apply_style
from .phantom import (BreastPhantom, LesionSpec, pectoral_line, project,
                      view_half_width)
from .sample import BoundingBox, MammogramSample

_VIEW_INDEX = {"CC": 0, "MLO": 1}


class ViewGeometry:
    """Maps in-plane millimetres to pixel coordinates for one view.

    Right breasts put the chest wall on the left image edge, left breasts on
    the right edge. Positive lateral coordinates point up.
    """

    def __init__(self, laterality: str, size: int, spacing: float):
        self.laterality = laterality
        self.size = size
        self.spacing = spacing

    def to_px(self, x_mm, lateral_mm):
        col = np.asarray(x_mm) / self.spacing - 0.5
        if self.laterality == "L":
            col = self.size - 1 - col
        row = self.size / 2.0 - np.asarray(lateral_mm) / self.spacing - 0.5
        return col, row

    def grid_mm(self):
        idx = np.arange(self.size, dtype=np.float64)
        cols = idx if self.laterality == "R" else self.size - 1 - idx
        x = (cols + 0.5) * self.spacing
        lateral = (self.size / 2.0 - idx - 0.5) * self.spacing
        return np.meshgrid(x, lateral)  # (rows, cols) arrays of x and lateral


def _lesion_radius_fn(lesion: LesionSpec):
    rng = np.random.default_rng(lesion.shape_seed)
    ks = np.arange(3, 8)
    amps = rng.uniform(0.5, 1.0, size=ks.size)
    amps /= amps.sum()
    phases = rng.uniform(0, 2 * np.pi, size=ks.size)

    def radius(phi):
        wobble = sum(a * np.cos(k * phi + p) for a, k, p in zip(amps, ks, phases))
        return lesion.radius * (1.0 + 0.35 * lesion.margin_irregularity * wobble)

    return radius


def render_raw(phantom: BreastPhantom, view: str, size: int = 256,
               spacing: float = 0.5) -> tuple[np.ndarray, list[BoundingBox], dict]:
    """Unstyled [0, 1] render plus tight lesion boxes and pixel geometry."""
    if view not in _VIEW_INDEX:
        raise ValueError(f"unknown view {view!r}")
    shape = phantom.shape_params
    geom = ViewGeometry(phantom.laterality, size, spacing)
    xg, lg = geom.grid_mm()
    p = shape["exponent"]
    hw = view_half_width(shape, view)
    level = (np.clip(xg, 0, None) / shape["depth"]) ** p + np.abs(lg / hw) ** p
    breast = level < 1.0
    thickness = np.where(breast, np.clip(1.0 - level, 0.0, 1.0) ** (1.0 / p), 0.0)

    rng = np.random.default_rng([phantom.seed, _VIEW_INDEX[view], 17])
    image = np.where(breast, 0.18 + 0.27 * np.sqrt(thickness), 0.0)

    # fibroglandular texture: smooth random field thresholded to the target fraction
    field = ndimage.gaussian_filter(rng.standard_normal((size, size)), 2.5 / spacing)
    field = field / (field.std() + 1e-12) + 1.2 * thickness
    inside = field[breast]
    if inside.size:
        thr = np.quantile(inside, 1.0 - phantom.fibroglandular_fraction)
        gland = np.clip((field - thr) * 3.0 + 0.5, 0.0, 1.0) * breast
        image = image + 0.28 * gland

    nipple_col, nipple_row = geom.to_px(*project(phantom.nipple_pos_3d, view))
    if view == "CC":
        edge_col, _ = geom.to_px(0.0, 0.0)
        chestwall = ((float(edge_col), 0.0), (float(edge_col), float(size - 1)))
    else:
        (x0, l0), (x1, l1) = pectoral_line(shape)
        c0, r0 = geom.to_px(x0, l0)
        c1, r1 = geom.to_px(x1, l1)
        chestwall = ((float(c0), float(r0)), (float(c1), float(r1)))
        boundary = l1 + (l0 - l1) * (xg / x0)
        muscle = (xg >= 0) & (xg <= x0) & (lg >= boundary) & (breast | (lg > 0))
        image = np.where(muscle, 0.72 + 0.08 * np.clip(1 - xg / shape["pectoral_depth"], 0, 1), image)

    rows, cols = np.mgrid[0:size, 0:size]
    boxes: list[BoundingBox] = []
    for lesion in phantom.lesions:
        lx, ll = project(lesion.center_3d, view)
        cc, rr = geom.to_px(lx, ll)
        radius_fn = _lesion_radius_fn(lesion)
        dx = (cols - cc) * spacing
        dy = (rows - rr) * spacing
        rho = np.hypot(dx, dy)
        phi = np.arctan2(dy, dx)
        rmax = radius_fn(phi)
        core = np.clip((rmax - rho) / (0.6 * spacing + 0.4) + 0.5, 0.0, 1.0)
        dome = np.sqrt(np.clip(1.0 - (rho / (rmax + 1e-9)) ** 2, 0.0, 1.0))
        image = image + lesion.contrast * core * (0.6 + 0.4 * dome)
        inside = rmax - rho > 0
        if not inside.any():
            continue
        rr_idx, cc_idx = np.nonzero(inside)
        boxes.append(BoundingBox(
            x=float(cc_idx.min()), y=float(rr_idx.min()),
            w=float(cc_idx.max() - cc_idx.min() + 1), h=float(rr_idx.max() - rr_idx.min() + 1),
            lesion_id=lesion.lesion_id, label=lesion.birads_label))

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    geometry = {"nipple_px": (float(nipple_col), float(nipple_row)), "chestwall_line": chestwall}
    return image, boxes, geometry


def render_view(phantom: BreastPhantom, view: str, *, size: int = 256, spacing: float = 0.5,
                style: StyleParams | None = None, domain: str | None = None,
                drop_labels: bool = False) -> MammogramSample:
    """Render one view of ``phantom``, optionally in a vendor style.

    Lesion identifiers are the phantom's lesion ids, so boxes of the same
    lesion carry the same id in CC and MLO. ``drop_labels`` strips BI-RADS
    labels (for domains where they are unavailable).
    """
    image, boxes, geometry = render_raw(phantom, view, size, spacing)
    if style is not None:
        image = apply_style(image, style, np.random.default_rng([phantom.seed, _VIEW_INDEX[view], 29]))
    if drop_labels:
        boxes = [BoundingBox(b.x, b.y, b.w, b.h, lesion_id=b.lesion_id) for b in boxes]
    return MammogramSample(
        image=image, view=view, laterality=phantom.laterality,
        patient_id=phantom.patient_id, domain=domain, pixel_spacing=spacing,
        annotations=boxes, nipple_px=geometry["nipple_px"],
        chestwall_line=geometry["chestwall_line"], density_class=phantom.density_class)
