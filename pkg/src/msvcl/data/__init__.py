"""Synthetic paired-view mammography benchmark."""

from .io import load_external_image, load_sample, read_png16, resample, save_sample, write_png16
from .manifest import (DatasetManifest, ManifestEntry, ManifestError, build_dataset,
                       expected_counts, plan_dataset, render_entry, split_fraction)
from .phantom import (BIRADS_LABELS, DENSITY_LABELS, BreastPhantom, LesionSpec, PlacementError,
                      birads_label, generate_phantom, nipple_distance_mm)
from .render import render_view
from .sample import BoundingBox, MammogramSample, iou, point_line_distance

__all__ = [
    "BIRADS_LABELS", "DENSITY_LABELS", "BoundingBox", "BreastPhantom", "DatasetManifest",
    "LesionSpec", "MammogramSample", "ManifestEntry", "ManifestError", "PlacementError",
    "birads_label", "build_dataset", "expected_counts", "generate_phantom", "iou",
    "load_external_image", "load_sample", "nipple_distance_mm", "plan_dataset",
    "point_line_distance", "read_png16", "render_entry", "render_view", "resample",
    "save_sample", "split_fraction", "write_png16",
]
