"""Dataset manifests: planning, rendering to disk, validation and sub-sampling.

Manifest JSON layout (``manifest.json`` at the dataset root)::

    {
      "version": 1,
      "seed": <int>,
      "config_hash": "<hex>",
      "seen_domains": ["A", "B", "C"],
      "unseen_domains": ["D", "E", "F"],
      "entries": [
        {"image": "images/A/train/A00003_R_CC.png",     # relative to the root
         "meta": "images/A/train/A00003_R_CC.json",     # geometry/annotation sidecar
         "patient_id": "A00003", "laterality": "R", "view": "CC",
         "domain": "A", "split": "train", "phantom_seed": 123,
         "density_class": "dense", "n_lesions": 1, "birads_available": true},
        ...
      ]
    }
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from ..config import FRACTIONS, SPLITS, config_hash
from ..styles.parametric import StyleParams
from .io import atomic_write_json, load_sample, save_sample
from .phantom import generate_phantom
from .render import render_view
from .sample import MammogramSample

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
LABELED_SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """A manifest or dataset plan violates the split-hygiene rules."""


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    meta: str
    patient_id: str
    laterality: str
    view: str
    domain: str
    split: str
    phantom_seed: int
    density_class: str
    n_lesions: int
    birads_available: bool = True

    @property
    def breast_key(self) -> tuple[str, str]:
        return self.patient_id, self.laterality


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seen_domains: tuple[str, ...]
    unseen_domains: tuple[str, ...]
    seed: int = 0
    config_hash: str = ""
    root: Path | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    def select(self, *, split: str | None = None, domain: str | Iterable[str] | None = None,
               view: str | None = None) -> list[ManifestEntry]:
        doms = {domain} if isinstance(domain, str) else (set(domain) if domain else None)
        return [e for e in self.entries
                if (split is None or e.split == split)
                and (doms is None or e.domain in doms)
                and (view is None or e.view == view)]

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
        for e in self.entries:
            out[e.domain][e.split] += 1
        return {d: dict(v) for d, v in out.items()}

    def load(self, entry: ManifestEntry) -> MammogramSample:
        if self.root is None:
            raise ManifestError("manifest has no root directory; images were not written")
        return load_sample(self.root / entry.image, self.root / entry.meta)

    def validate(self, expected_counts: Mapping[str, Mapping[str, int]] | None = None) -> None:
        """Raise :class:`ManifestError` on any split-hygiene violation."""
        unseen = set(self.unseen_domains)
        for e in self.entries:
            if e.split not in SPLITS:
                raise ManifestError(f"unknown split {e.split!r}")
            if e.domain in unseen and e.split != "test":
                raise ManifestError(
                    f"unseen-domain sample {e.image} placed in split {e.split!r}; only 'test' allowed")
        owner: dict[tuple[str, str], str] = {}
        for e in self.entries:
            if e.split not in LABELED_SPLITS:
                continue
            key = (e.domain, e.patient_id)
            prev = owner.setdefault(key, e.split)
            if prev != e.split:
                raise ManifestError(f"patient {e.patient_id} spans splits {prev!r} and {e.split!r}")
        if expected_counts is not None:
            got = self.counts()
            for dom, per_split in expected_counts.items():
                for split, n in per_split.items():
                    if got.get(dom, {}).get(split, 0) != n:
                        raise ManifestError(
                            f"domain {dom} split {split}: expected {n}, found {got.get(dom, {}).get(split, 0)}")

    def to_json(self) -> dict[str, Any]:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "seen_domains": list(self.seen_domains),
            "unseen_domains": list(self.unseen_domains),
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self, path: str | Path) -> None:
        atomic_write_json(self.to_json(), path)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any], root: Path | None = None) -> "DatasetManifest":
        if obj.get("version") != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {obj.get('version')}")
        return cls(
            entries=[ManifestEntry(**e) for e in obj["entries"]],
            seen_domains=tuple(obj["seen_domains"]),
            unseen_domains=tuple(obj["unseen_domains"]),
            seed=obj["seed"], config_hash=obj["config_hash"], root=root)

    @classmethod
    def load_file(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        with open(path) as fh:
            return cls.from_json(json.load(fh), root=path.parent)


def expected_counts(data_cfg: Mapping[str, Any]) -> dict[str, dict[str, int]]:
    out = {}
    for d in data_cfg["seen_domains"]:
        out[d] = {s: int(n) for s, n in data_cfg["seen_counts"].items() if n}
    for d in data_cfg["unseen_domains"]:
        out[d] = {s: int(n) for s, n in data_cfg["unseen_counts"].items() if n}
    return out


def _derived_seed(*parts: int) -> int:
    return int(np.random.default_rng(list(parts)).integers(2**31 - 1))


def plan_dataset(data_cfg: Mapping[str, Any], seed: int) -> DatasetManifest:
    """Lay out every manifest entry without rendering anything.

    Each split of each domain is filled with CC/MLO pairs; breasts are grouped
    two per patient (the last patient of a split may have one), and patients
    never cross splits.
    """
    seen = tuple(data_cfg["seen_domains"])
    unseen = tuple(data_cfg["unseen_domains"])
    for dom in unseen:
        for split, n in data_cfg["unseen_counts"].items():
            if n and split != "test":
                raise ManifestError(f"unseen domain {dom} cannot populate split {split!r}")
    no_birads = set(data_cfg.get("birads_unavailable", ()))
    probs = np.asarray(data_cfg["lesion_count_probs"], dtype=float)
    probs = probs / probs.sum()
    all_domains = seen + unseen
    entries: list[ManifestEntry] = []
    for d_idx, dom in enumerate(all_domains):
        counts = data_cfg["seen_counts"] if dom in seen else data_cfg["unseen_counts"]
        patient_counter = 0
        for s_idx, split in enumerate(SPLITS):
            n = int(counts.get(split, 0) or 0)
            if n == 0:
                continue
            if n % 2:
                raise ManifestError(
                    f"domain {dom} split {split}: {n} images cannot be grouped into CC/MLO pairs")
            for b_idx in range(n // 2):
                if b_idx % 2 == 0:
                    patient_counter += 1
                pid = f"{dom}{patient_counter:05d}"
                lat = "L" if b_idx % 2 == 0 else "R"
                pseed = _derived_seed(seed, d_idx, s_idx, b_idx)
                prng = np.random.default_rng(pseed)
                density = "dense" if prng.random() < 0.5 else "non-dense"
                n_les = int(prng.choice(len(probs), p=probs))
                for view in ("CC", "MLO"):
                    stem = f"images/{dom}/{split}/{pid}_{lat}_{view}"
                    entries.append(ManifestEntry(
                        image=stem + ".png", meta=stem + ".json", patient_id=pid,
                        laterality=lat, view=view, domain=dom, split=split,
                        phantom_seed=pseed, density_class=density, n_lesions=n_les,
                        birads_available=dom not in no_birads))
    manifest = DatasetManifest(entries, seen, unseen, seed=seed,
                               config_hash=config_hash({"data": data_cfg, "seed": seed}))
    manifest.validate(expected_counts(data_cfg))
    return manifest


def phantom_for(entry: ManifestEntry, data_cfg: Mapping[str, Any]):
    return generate_phantom(
        entry.phantom_seed, entry.density_class, entry.n_lesions,
        patient_id=entry.patient_id, laterality=entry.laterality,
        radius_mm=tuple(data_cfg["lesion_radius_mm"]),
        retry_budget=int(data_cfg["retry_budget"]),
        birads_table=data_cfg["birads_table"])


def render_entry(entry: ManifestEntry, data_cfg: Mapping[str, Any],
                 style_table: Mapping[str, StyleParams]) -> MammogramSample:
    phantom = phantom_for(entry, data_cfg)
    return render_view(phantom, entry.view, size=int(data_cfg["image_size"]),
                       spacing=float(data_cfg["render_spacing_mm"]),
                       style=style_table[entry.domain], domain=entry.domain,
                       drop_labels=not entry.birads_available)


def build_dataset(data_cfg: Mapping[str, Any], style_table: Mapping[str, StyleParams],
                  seed: int, out_dir: str | Path) -> DatasetManifest:
    """Render the planned dataset under ``out_dir`` and write ``manifest.json``."""
    out_dir = Path(out_dir)
    manifest = plan_dataset(data_cfg, seed)
    manifest.root = out_dir
    for i, entry in enumerate(manifest.entries):
        img_path = out_dir / entry.image
        img_path.parent.mkdir(parents=True, exist_ok=True)
        sample = render_entry(entry, data_cfg, style_table)
        save_sample(sample, img_path, out_dir / entry.meta)
        if (i + 1) % 500 == 0:
            log.info("rendered %d/%d samples", i + 1, len(manifest))
    manifest.save(out_dir / "manifest.json")
    return manifest


def split_fraction(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Keep a patient-level ``fraction`` of the train split; other splits untouched.

    Patients of each domain are ordered by a seeded permutation and the
    shortest prefix reaching ``round(fraction * n_train)`` images is kept, so
    smaller fractions are always subsets of larger ones for the same seed.
    """
    if fraction not in FRACTIONS:
        raise ValueError(f"fraction must be one of {FRACTIONS}, got {fraction}")
    if fraction == 1.0:
        return manifest
    keep: set[tuple[str, str]] = set()
    by_domain: dict[str, dict[str, int]] = defaultdict(dict)
    for e in manifest.entries:
        if e.split == "train":
            by_domain[e.domain][e.patient_id] = by_domain[e.domain].get(e.patient_id, 0) + 1
    for d_idx, dom in enumerate(sorted(by_domain)):
        patients = sorted(by_domain[dom])
        order = np.random.default_rng([seed, d_idx, 7]).permutation(len(patients))
        total = sum(by_domain[dom].values())
        target = max(1, int(round(fraction * total)))
        acc = 0
        for idx in order:
            pid = patients[idx]
            keep.add((dom, pid))
            acc += by_domain[dom][pid]
            if acc >= target:
                break
    entries = [e for e in manifest.entries
               if e.split != "train" or (e.domain, e.patient_id) in keep]
    return replace(manifest, entries=entries)
