"""Per-sample prediction files."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping, Sequence

from ..data.io import atomic_write_json
from ..data.sample import BoundingBox


def prediction_record(image: str, boxes: Sequence[BoundingBox] = (),
                      matches: Sequence[tuple[BoundingBox, BoundingBox, float]] = (),
                      class_probs: Mapping[str, Mapping[str, float]] | None = None) -> dict[str, Any]:
    return {
        "image": image,
        "boxes": [b.to_dict() for b in boxes],
        "matches": [{"cc": a.to_dict(), "mlo": b.to_dict(), "distance": d} for a, b, d in matches],
        "class_probabilities": {k: dict(v) for k, v in (class_probs or {}).items()},
    }


def write_predictions(records: Sequence[Mapping[str, Any]], out_dir: str | Path) -> list[Path]:
    """One JSON file per sample, named after its image stem."""
    out_dir = Path(out_dir)
    paths = []
    for rec in records:
        path = out_dir / (Path(rec["image"]).stem + ".json")
        atomic_write_json(dict(rec), path)
        paths.append(path)
    return paths
