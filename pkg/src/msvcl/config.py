"""Run configuration: schema, presets, overrides and hashing.

A run config is a nested mapping with six sections (``data``, ``styles``,
``pairing``, ``learning``, ``tasks``, ``eval``) plus a few top-level keys.
Every key that can be consumed is declared in :data:`DESK`; anything else is
rejected with :class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import yaml


class ConfigError(ValueError):
    """Raised for schema violations (unknown keys, bad types, bad values)."""


STRATEGIES = ("simclr", "mscl", "mvcl", "msvcl", "mscl_plus", "mvcl_plus", "msvcl_plus")
PRETRAIN_SOURCES = ("random", "warm") + STRATEGIES
FRACTIONS = (0.05, 0.1, 0.2, 0.5, 1.0)
SPLITS = ("style-transfer", "self-supervision", "train", "val", "test")
TASKS = ("detection", "matching", "birads", "density")

# BI-RADS lookup: a lesion's suspicion score is
#   0.7 * margin_irregularity + 0.3 * (contrast - 0.1) / 0.3
# and the label is the row whose [lo, hi) band contains the score.
BIRADS_TABLE = [
    {"label": "2-3", "lo": 0.0, "hi": 0.2},
    {"label": "4A", "lo": 0.2, "hi": 0.4},
    {"label": "4B", "lo": 0.4, "hi": 0.6},
    {"label": "4C", "lo": 0.6, "hi": 0.8},
    {"label": "5", "lo": 0.8, "hi": 1.0000001},
]

# Parametric vendor styles. A-C are seen, D-F are held out for testing only.
STYLE_TABLE = {
    "A": {"gamma": 0.8, "contrast_midpoint": 0.45, "contrast_slope": 4.0,
          "noise_sigma": 0.01, "blur_sigma_px": 0.0, "intensity_offset": 0.0},
    "B": {"gamma": 1.5, "contrast_midpoint": 0.5, "contrast_slope": 7.0,
          "noise_sigma": 0.01, "blur_sigma_px": 0.5, "intensity_offset": 0.05},
    "C": {"gamma": 1.1, "contrast_midpoint": 0.55, "contrast_slope": 1.0,
          "noise_sigma": 0.03, "blur_sigma_px": 1.0, "intensity_offset": -0.05},
    "D": {"gamma": 2.0, "contrast_midpoint": 0.4, "contrast_slope": 9.0,
          "noise_sigma": 0.015, "blur_sigma_px": 0.3, "intensity_offset": -0.12},
    "E": {"gamma": 0.55, "contrast_midpoint": 0.6, "contrast_slope": 0.5,
          "noise_sigma": 0.005, "blur_sigma_px": 0.0, "intensity_offset": 0.15},
    "F": {"gamma": 1.3, "contrast_midpoint": 0.5, "contrast_slope": 3.0,
          "noise_sigma": 0.05, "blur_sigma_px": 1.6, "intensity_offset": 0.1},
}

DESK: dict[str, Any] = {
    "run_id": "default",
    "seed": 0,
    "scale": "desk",
    "num_workers": 1,
    "data": {
        "image_size": 256,
        "render_spacing_mm": 0.5,
        "target_spacing_mm": 0.1,
        "seen_domains": ["A", "B", "C"],
        "unseen_domains": ["D", "E", "F"],
        "seen_counts": {"style-transfer": 100, "self-supervision": 800,
                        "train": 60, "val": 10, "test": 10},
        "unseen_counts": {"test": 10},
        "lesion_count_probs": [0.2, 0.6, 0.2],
        "lesion_radius_mm": [4.0, 9.0],
        "birads_unavailable": ["F"],
        "birads_table": BIRADS_TABLE,
        "retry_budget": 2000,
    },
    "styles": {
        "engine": "parametric",
        "table": STYLE_TABLE,
        "cyclegan": {"crop": 64, "blocks": 3, "epochs": 2, "lr": 2e-4,
                     "images_per_domain": 20, "cycle_weight": 10.0, "base_channels": 16},
    },
    "pairing": {
        "strategy": "msvcl_plus",
        "batch_size": 32,
        "same_draw": True,
    },
    "learning": {
        "encoder": "tiny",
        "width": 16,
        "feature_dim": 128,
        "proj_dim": 128,
        "tau": 0.5,
        "margin": 10.0,
        "msvcl_weight": 0.5,
        "msvcl_mode": "sum",
        "lr": 0.05,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "epochs": 5,
        "input_size": 96,
        "crop_scale": [0.5, 1.0],
        "max_rotation_deg": 10.0,
        "flip_p": 0.5,
        "jitter": 0.2,
        "max_images": None,
        "warm_start": True,
        "warm_steps": 150,
    },
    "tasks": {
        "detection": {"lr": 0.005, "weight_decay": 1e-4, "momentum": 0.9,
                      "epochs": 30, "batch_size": 8, "input_size": 256,
                      "score_threshold": 0.05, "nms_iou": 0.5, "max_detections": 20,
                      "iou_threshold": 0.5, "backbone_lr_scale": 1.0},
        "matching": {"margin": 10.0, "optimizer": "sgd", "lr": 0.001, "momentum": 0.9, "weight_decay": 1e-5,
                     "epochs": 30, "batch_size": 32, "embed_dim": 32, "roi_input": 64,
                     "gate_nipple_rel": 0.2, "gate_size_ratio": [0.5, 2.0],
                     "accept_fraction": 0.5, "extra_negatives": 2},
        "classify": {"optimizer": "sgd", "lr": 0.001, "momentum": 0.9, "weight_decay": 1e-5,
                     "epochs": 30, "batch_size": 32, "input_size": 224, "roi_input": 64,
                     "backbone_lr_scale": 1.0},
    },
    "eval": {
        "iou": 0.5,
        "interpolation": "all-point",
        "seeds": [0, 1, 2],
        "pretrain": ["random", "simclr", "msvcl_plus"],
        "tasks": ["detection", "density"],
        "fractions": list(FRACTIONS),
        "hungry_methods": ["simclr", "msvcl_plus"],
    },
}

_FULL_OVERRIDES = {
    "scale": "full",
    "data": {
        "image_size": 1280,
        "render_spacing_mm": 0.1,
        "seen_counts": {"style-transfer": 1000, "self-supervision": 8000,
                        "train": 600, "val": 100, "test": 100},
        "unseen_counts": {"test": 100},
    },
    "styles": {"cyclegan": {"crop": 512, "blocks": 9, "epochs": 100,
                            "images_per_domain": 1000, "base_channels": 64}},
    "pairing": {"batch_size": 256},
    "learning": {"encoder": "resnet50", "feature_dim": 2048, "lr": 0.3, "epochs": 100,
                 "input_size": 512},
    "tasks": {
        "detection": {"epochs": 50, "batch_size": 8, "input_size": 1280},
        "classify": {"epochs": 50, "batch_size": 128, "roi_input": 224},
        "matching": {"epochs": 50, "batch_size": 128, "roi_input": 224},
    },
}

# Dict-valued keys whose contents are free-form tables rather than schema.
_OPAQUE = {("data", "birads_table"), ("styles", "table")}


def deep_merge(base: Mapping[str, Any], override: Mapping[str, Any], path: tuple = ()) -> dict:
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        here = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key: {'.'.join(here)}")
        if isinstance(base[key], dict) and here not in _OPAQUE:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {'.'.join(here)} must be a mapping")
            out[key] = deep_merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def preset(name: str = "desk") -> dict[str, Any]:
    if name == "desk":
        return copy.deepcopy(DESK)
    if name == "full":
        return deep_merge(DESK, _FULL_OVERRIDES)
    raise ConfigError(f"unknown scale preset {name!r}; expected 'desk' or 'full'")


def _parse_scalar(text: str) -> Any:
    return yaml.safe_load(text)


def apply_overrides(cfg: Mapping[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars/lists."""
    patch: dict[str, Any] = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = patch
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_scalar(raw)
    return deep_merge(cfg, patch)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict[str, Any]:
    user: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = preset(user.get("scale", "desk"))
    cfg = deep_merge(cfg, user)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: Mapping[str, Any]) -> None:
    strategy = cfg["pairing"]["strategy"]
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown pairing.strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    data = cfg["data"]
    overlap = set(data["seen_domains"]) & set(data["unseen_domains"])
    if overlap:
        raise ConfigError(f"domains both seen and unseen: {sorted(overlap)}")
    for dom in list(data["seen_domains"]) + list(data["unseen_domains"]):
        if dom not in cfg["styles"]["table"]:
            raise ConfigError(f"domain {dom!r} has no entry in styles.table")
    for split in data["unseen_counts"]:
        if split != "test":
            raise ConfigError(f"unseen domains may only populate the test split, got {split!r}")
    for p in cfg["eval"]["pretrain"]:
        if p not in PRETRAIN_SOURCES:
            raise ConfigError(f"unknown pretrain source {p!r}; valid: {', '.join(PRETRAIN_SOURCES)}")
    for t in cfg["eval"]["tasks"]:
        if t not in TASKS:
            raise ConfigError(f"unknown eval task {t!r}; valid: {', '.join(TASKS)}")
    for f in cfg["eval"]["fractions"]:
        if f not in FRACTIONS:
            raise ConfigError(f"fraction {f} not in {FRACTIONS}")
    if cfg["learning"]["tau"] <= 0:
        raise ConfigError("learning.tau must be > 0")
    for head in ("classify", "matching"):
        if cfg["tasks"][head]["optimizer"] not in ("sgd", "adam"):
            raise ConfigError(f"tasks.{head}.optimizer must be sgd or adam")
    if cfg["learning"]["margin"] < 0 or cfg["tasks"]["matching"]["margin"] < 0:
        raise ConfigError("margin must be >= 0")
    if not 0.0 <= cfg["learning"]["msvcl_weight"] <= 1.0:
        raise ConfigError("learning.msvcl_weight must lie in [0, 1]")
    if cfg["learning"]["msvcl_mode"] not in ("sum", "alternate"):
        raise ConfigError("learning.msvcl_mode must be 'sum' or 'alternate'")


def config_hash(obj: Any, length: int = 16) -> str:
    """Stable hash of a JSON-able object; insensitive to key order."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:length]


def section_hash(cfg: Mapping[str, Any], *sections: str, extra: Any = None) -> str:
    """Hash only the named sections (plus ``extra``) so unrelated edits keep caches valid."""
    picked = {s: cfg[s] for s in sections}
    picked["seed"] = cfg["seed"]
    if extra is not None:
        picked["extra"] = extra
    return config_hash(picked)


def dump_config(cfg: Mapping[str, Any], path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(dict(cfg), fh, sort_keys=True)
