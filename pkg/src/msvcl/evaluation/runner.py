"""Experiment cells, the ablation grid and the data-hungry sweep.

A cell is one (task, pretraining source, seed, train fraction) combination.
Its result is stored under ``cells/<hash>.json`` in the run directory, where
the hash covers every config section that can change the outcome, so any
experiment asking for the same cell reuses it and a config change forces a
recompute. Pretrained encoders and fine-tuned models are cached the same way.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch

from ..config import FRACTIONS, PRETRAIN_SOURCES, STRATEGIES, TASKS, section_hash
from ..data.io import atomic_write_json
from ..data.manifest import DatasetManifest, split_fraction
from ..data.sample import MammogramSample
from ..learning.checkpoint import load_checkpoint, save_checkpoint
from ..learning.encoder import EncoderConfig
from ..learning.pretrain import load_images_downsampled, pretrain, ssl_records
from ..learning.warm import warm_start_state
from ..tasks.backbone import load_backbone
from ..tasks.classify import Classifier, classification_inputs, train_classifier
from ..tasks.detection import Detector, detect, detect_breast, finetune_detector
from ..tasks.export import prediction_record, write_predictions
from ..tasks.matching import Matcher, breast_pairs, build_candidates, match, train_matcher
from ..tasks.roi import label_boxes
from .metrics import accuracy, average_precision
from .report import TASK_TITLES, DomainReport, aggregate, markdown_table

log = logging.getLogger(__name__)


class GridError(ValueError):
    """Unknown axis value or a broken precondition of a sweep."""


@dataclass
class ExperimentGrid:
    axes: dict[str, list]
    seeds: list[int]
    cells: list[dict[str, Any]] = field(default_factory=list)

    def reports(self) -> dict[str, dict[str, DomainReport]]:
        """Seed-averaged report per task and pretraining source (one fraction)."""
        out: dict[str, dict[str, DomainReport]] = defaultdict(dict)
        groups: dict[tuple, list[dict]] = defaultdict(list)
        for c in self.cells:
            groups[(c["task"], c["source"], c["fraction"])].append(c)
        for (task, source, fraction), cells in groups.items():
            name = source if fraction == 1.0 else f"{source} @{fraction:g}"
            out[task][name] = seed_mean_report(cells)
        return dict(out)

    def to_json(self) -> dict[str, Any]:
        return {
            "axes": self.axes, "seeds": self.seeds,
            "cells": self.cells,
            "reports": {t: {k: r.to_dict() for k, r in rows.items()} for t, rows in self.reports().items()},
        }


def seed_mean_report(cells: Sequence[Mapping[str, Any]]) -> DomainReport:
    first = cells[0]
    styles = list(first["seen"]) + list(first["unseen"])
    means = {s: float(np.mean([c["per_style"][s] for c in cells])) for s in styles}
    return aggregate(means, first["seen"], first["unseen"])


class Experiment:
    """Cached access to data, pretrained encoders, fine-tuned heads and cells for one run directory."""

    def __init__(self, cfg: Mapping[str, Any], run_dir: str | Path, manifest: DatasetManifest | None = None):
        self.cfg = copy.deepcopy(dict(cfg))
        self.run_dir = Path(run_dir)
        self.manifest = manifest or DatasetManifest.load_file(self.run_dir / "data" / "manifest.json")
        self.enc_cfg = EncoderConfig.from_learning(self.cfg["learning"])
        self._samples: dict[str, MammogramSample] = {}
        self._ssl_images: np.ndarray | None = None

    # data -----------------------------------------------------------------
    @property
    def seen(self) -> tuple[str, ...]:
        return tuple(self.manifest.seen_domains)

    @property
    def unseen(self) -> tuple[str, ...]:
        return tuple(self.manifest.unseen_domains)

    def samples(self, split: str, domains: Sequence[str] | None = None, fraction: float = 1.0,
                seed: int = 0) -> list[MammogramSample]:
        manifest = split_fraction(self.manifest, fraction, seed) if split == "train" else self.manifest
        out = []
        for e in manifest.select(split=split, domain=domains):
            if e.image not in self._samples:
                self._samples[e.image] = manifest.load(e)
            out.append(self._samples[e.image])
        return out

    def ssl_images(self) -> np.ndarray:
        if self._ssl_images is None:
            pairs = ssl_records(self.manifest, self.cfg["learning"].get("max_images"), int(self.cfg["seed"]))
            self._ssl_images = load_images_downsampled(self.manifest, [e for _, e in pairs], factor=2)
        return self._ssl_images

    # encoders -------------------------------------------------------------
    def _seeded(self, seed: int) -> dict[str, Any]:
        cfg = copy.deepcopy(self.cfg)
        cfg["seed"] = seed
        return cfg

    def warm_state(self, seed: int) -> dict[str, torch.Tensor]:
        steps = int(self.cfg["learning"]["warm_steps"])
        key = section_hash(self.cfg, extra={"warm": self.enc_cfg.to_dict(), "seed": seed, "steps": steps})
        path = self.run_dir / "checkpoints" / f"warm_s{seed}_{key}.pt"
        if path.exists():
            return load_checkpoint(path, "warm")["encoder"]
        state = warm_start_state(self.enc_cfg, seed, steps=steps)
        save_checkpoint(path, "warm", {"encoder": state, "encoder_cfg": self.enc_cfg.to_dict()}, key)
        return state

    def pretrained(self, strategy: str, seed: int, resume: bool = True) -> Path:
        """Path of the finished pretraining checkpoint, training it if needed.

        A partial checkpoint is continued when ``resume`` is set and
        restarted otherwise.
        """
        if strategy not in STRATEGIES:
            raise GridError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
        warm = bool(self.cfg["learning"]["warm_start"])
        key = section_hash(self.cfg, "data", "styles", "pairing", "learning",
                           extra={"strategy": strategy, "seed": seed})
        path = self.run_dir / "checkpoints" / f"pretrain_{strategy}_s{seed}_{key}.pt"
        if path.exists():
            blob = load_checkpoint(path, "pretrain")
            if blob["epoch"] >= int(self.cfg["learning"]["epochs"]):
                return path
        t0 = time.time()
        pretrain(self.manifest, strategy, self._seeded(seed),
                 init_state=self.warm_state(seed) if warm else None, init_tag="warm" if warm else None,
                 out_path=path, resume=resume, images=self.ssl_images())
        log.info("pretrained %s seed %d in %.0fs", strategy, seed, time.time() - t0)
        return path

    def backbone_source(self, source: str, seed: int):
        if source not in PRETRAIN_SOURCES:
            raise GridError(f"unknown pretrain source {source!r}; valid: {', '.join(PRETRAIN_SOURCES)}")
        if source == "random":
            return None
        if source == "warm":
            return {"encoder": self.warm_state(seed), "encoder_cfg": self.enc_cfg.to_dict()}
        return self.pretrained(source, seed)

    # cells ----------------------------------------------------------------
    def cell_hash(self, task: str, source: str, seed: int, fraction: float) -> str:
        ev = {k: self.cfg["eval"][k] for k in ("iou", "interpolation")}
        return section_hash(self.cfg, "data", "styles", "pairing", "learning", "tasks",
                            extra={"task": task, "source": source, "seed": seed,
                                   "fraction": float(fraction), "eval": ev})

    def _model_path(self, kind: str, source: str, seed: int, fraction: float) -> Path:
        key = self.cell_hash(kind, source, seed, fraction)
        return self.run_dir / "models" / f"{kind}_{source}_s{seed}_f{fraction:g}_{key}.pt"

    def detector(self, source: str, seed: int, fraction: float = 1.0) -> Detector:
        path = self._model_path("detection", source, seed, fraction)
        dcfg = self.cfg["tasks"]["detection"]
        if path.exists():
            blob = load_checkpoint(path, "detector")
            model = Detector(load_backbone(None, self.enc_cfg, seed), blob["settings"])
            model.load_state_dict(blob["state"])
            model.history = blob["history"]
            return model.eval()
        model = finetune_detector(self.backbone_source(source, seed), self.samples("train", self.seen, fraction, seed),
                                  dcfg, self.enc_cfg, seed=seed, val_samples=self.samples("val", self.seen))
        save_checkpoint(path, "detector", {"state": model.state_dict(), "settings": model.settings,
                                           "history": model.history}, path.stem)
        return model

    def classifier(self, task: str, source: str, seed: int, fraction: float = 1.0) -> Classifier:
        path = self._model_path(task, source, seed, fraction)
        ccfg = self.cfg["tasks"]["classify"]
        if path.exists():
            blob = load_checkpoint(path, "classifier")
            model = Classifier(load_backbone(None, self.enc_cfg, seed), task, blob["settings"])
            model.load_state_dict(blob["state"])
            model.history = blob["history"]
            return model.eval()
        samples = self.samples("train", self.seen, fraction, seed)
        model = train_classifier(self.backbone_source(source, seed), task, samples, ccfg, self.enc_cfg, seed=seed)
        save_checkpoint(path, "classifier", {"state": model.state_dict(), "settings": model.settings,
                                             "history": model.history, "task": task}, path.stem)
        return model

    def matcher(self, source: str, seed: int, fraction: float = 1.0) -> Matcher:
        path = self._model_path("matching", source, seed, fraction)
        mcfg = self.cfg["tasks"]["matching"]
        if path.exists():
            blob = load_checkpoint(path, "matcher")
            model = Matcher(load_backbone(None, self.enc_cfg, seed), blob["settings"])
            model.load_state_dict(blob["state"])
            model.history = blob["history"]
            return model.eval()
        rng = np.random.default_rng([seed, 811])
        cands = [c for cc, mlo in breast_pairs(self.samples("train", self.seen, fraction, seed))
                 for c in build_candidates(cc, mlo, mcfg, rng)]
        model = train_matcher(cands, self.backbone_source(source, seed), mcfg, self.enc_cfg, seed=seed)
        save_checkpoint(path, "matcher", {"state": model.state_dict(), "settings": model.settings,
                                          "history": model.history}, path.stem)
        return model

    def _styles_for(self, task: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
        if task == "birads":
            skip = set(self.cfg["data"].get("birads_unavailable", ()))
            return tuple(d for d in self.seen if d not in skip), tuple(d for d in self.unseen if d not in skip)
        return self.seen, self.unseen

    def evaluate_cell(self, task: str, source: str, seed: int, fraction: float = 1.0,
                      predictions_dir: Path | None = None) -> dict[str, Any]:
        """Train the head for one cell and score it on every domain's test split."""
        if task not in TASKS:
            raise GridError(f"unknown task {task!r}; valid: {', '.join(TASKS)}")
        seen, unseen = self._styles_for(task)
        iou_thr = float(self.cfg["eval"]["iou"])
        interp = self.cfg["eval"]["interpolation"]
        per_style: dict[str, float] = {}
        extra: dict[str, dict[str, float]] = {}
        records = []
        if task == "detection":
            det = self.detector(source, seed, fraction)
            for dom in seen + unseen:
                test = self.samples("test", [dom])
                preds = [detect(det, s) for s in test]
                per_style[dom] = 100.0 * average_precision(preds, [s.annotations for s in test], iou_thr, interp)
                records += [prediction_record(e.image, p) for e, p in zip(self.manifest.select(split="test", domain=dom), preds)]
        elif task in ("density", "birads"):
            clf = self.classifier(task, source, seed, fraction)
            ccfg = self.cfg["tasks"]["classify"]
            det = self.detector(source, seed, fraction) if task == "birads" else None
            extra["detected_boxes"] = {}
            for dom in seen + unseen:
                test = self.samples("test", [dom])
                x, labels = classification_inputs(task, test, ccfg)
                probs = clf.predict_proba(x)
                per_style[dom] = 100.0 * accuracy([clf.labels[i] for i in probs.argmax(1)], labels)
                if task == "density":
                    for e, p in zip(self.manifest.select(split="test", domain=dom), probs):
                        records.append(prediction_record(e.image, class_probs={
                            "density": dict(zip(clf.labels, map(float, p)))}))
                else:
                    # secondary protocol: ROIs from detections claimed as TP
                    boxes, truth = [], []
                    for s in test:
                        lab = label_boxes(detect(det, s), s.annotations, iou_thr)
                        keep = [i for i, tp in enumerate(lab.is_tp) if tp]
                        by_id = {g.lesion_id: g.label for g in s.annotations}
                        boxes.append([lab.boxes[i] for i in keep])
                        truth += [by_id[lab.lesion_ids[i]] for i in keep]
                    xd, _ = classification_inputs(task, test, ccfg, boxes=boxes)
                    extra["detected_boxes"][dom] = 100.0 * accuracy(clf.predict(xd), truth) if truth else float("nan")
            if task == "density":
                extra.pop("detected_boxes")
        else:
            det = self.detector(source, seed, fraction)
            mt = self.matcher(source, seed, fraction)
            mcfg = self.cfg["tasks"]["matching"]
            for dom in seen + unseen:
                links, rejects = [], []
                for cc, mlo in breast_pairs(self.samples("test", [dom])):
                    result = detect_breast(det, cc, mlo)
                    cands = build_candidates(cc, mlo, mcfg, result=result, iou_threshold=iou_thr)
                    matched = match(mt, result, cc, mlo, candidates=cands)
                    idx = {(result.B_cc.index(a), result.B_mlo.index(b)) for a, b, _ in matched}
                    links += [c.index in idx for c in cands if c.y == 1]
                    rejects += [c.index not in idx for c in cands if not all(c.tp_flags)]
                    records.append({"image": f"{dom}_{cc.patient_id}_{cc.laterality}_match", **result.to_dict(),
                                    "matches": [{"cc": a.to_dict(), "mlo": b.to_dict(), "distance": d}
                                                for a, b, d in matched]})
                parts = [np.mean(p) for p in (links, rejects) if p]
                per_style[dom] = 100.0 * float(np.mean(parts)) if parts else float("nan")
        if predictions_dir is not None:
            write_predictions(records, Path(predictions_dir) / f"{task}_{source}_s{seed}_f{fraction:g}")
        rep = aggregate(per_style, seen, unseen)
        return {"task": task, "source": source, "seed": seed, "fraction": float(fraction),
                "per_style": per_style, "seen": list(seen), "unseen": list(unseen),
                "seen_avg": rep.seen_avg, "seen_std": rep.seen_std,
                "unseen_avg": rep.unseen_avg, "unseen_std": rep.unseen_std, "extra": extra}

    def cell(self, task: str, source: str, seed: int, fraction: float = 1.0, *, force: bool = False,
             predictions_dir: Path | None = None) -> dict[str, Any]:
        """Cached cell result; recomputed when absent or when its config hash changed."""
        key = self.cell_hash(task, source, seed, fraction)
        path = self.run_dir / "cells" / f"{key}.json"
        if path.exists() and not force:
            with open(path) as fh:
                cached = json.load(fh)
            if cached.get("config_hash") == key:
                return cached
        t0 = time.time()
        result = self.evaluate_cell(task, source, seed, fraction, predictions_dir=predictions_dir)
        result["config_hash"] = key
        atomic_write_json(result, path)
        log.info("cell %s/%s/s%d/f%g done in %.0fs: unseen %.1f", task, source, seed, fraction,
                 time.time() - t0, result["unseen_avg"])
        return result


def _check_axes(sources: Sequence[str], tasks: Sequence[str], fractions: Sequence[float]) -> None:
    for s in sources:
        if s not in PRETRAIN_SOURCES:
            raise GridError(f"unknown pretrain source {s!r}; valid: {', '.join(PRETRAIN_SOURCES)}")
    for t in tasks:
        if t not in TASKS:
            raise GridError(f"unknown task {t!r}; valid: {', '.join(TASKS)}")
    for f in fractions:
        if f not in FRACTIONS:
            raise GridError(f"invalid fraction {f}; allowed: {FRACTIONS}")


def run_ablation(exp: Experiment, sources: Sequence[str] | None = None, seeds: Sequence[int] | None = None,
                 tasks: Sequence[str] | None = None, fractions: Sequence[float] = (1.0,)) -> ExperimentGrid:
    """Every (task, source, seed, fraction) cell; finished cells are reused."""
    ev = exp.cfg["eval"]
    sources = list(sources if sources is not None else ev["pretrain"])
    seeds = [int(s) for s in (seeds if seeds is not None else ev["seeds"])]
    tasks = list(tasks if tasks is not None else ev["tasks"])
    _check_axes(sources, tasks, fractions)
    grid = ExperimentGrid({"source": sources, "task": tasks, "fraction": [float(f) for f in fractions]}, seeds)
    for task in tasks:
        for source in sources:
            for fraction in fractions:
                for seed in seeds:
                    grid.cells.append(exp.cell(task, source, seed, fraction))
    return grid


def check_nested_fractions(manifest: DatasetManifest, fractions: Sequence[float], seed: int) -> None:
    """Each smaller fraction's train patients must be a subset of every larger one's."""
    ordered = sorted(fractions)
    sets = [{(e.domain, e.patient_id) for e in split_fraction(manifest, f, seed).select(split="train")}
            for f in ordered]
    for (fa, a), (fb, b) in zip(zip(ordered, sets), zip(ordered[1:], sets[1:])):
        if not a <= b:
            raise GridError(f"train subset at fraction {fa} is not contained in the one at {fb} (seed {seed})")


def run_data_hungry(exp: Experiment, fractions: Sequence[float] | None = None,
                    methods: Sequence[str] | None = None, seeds: Sequence[int] | None = None,
                    task: str = "detection") -> dict[str, Any]:
    """Metric per (method, fraction, seed) as plot-ready curve data."""
    ev = exp.cfg["eval"]
    fractions = [float(f) for f in (fractions if fractions is not None else ev["fractions"])]
    methods = list(methods if methods is not None else ev["hungry_methods"])
    seeds = [int(s) for s in (seeds if seeds is not None else ev["seeds"])]
    _check_axes(methods, [task], fractions)
    for seed in seeds:
        check_nested_fractions(exp.manifest, fractions, seed)
    curves: dict[str, Any] = {}
    for method in methods:
        points = []
        for f in sorted(fractions):
            cells = [exp.cell(task, method, seed, f) for seed in seeds]
            rep = seed_mean_report(cells)
            n_train = len(split_fraction(exp.manifest, f, seeds[0]).select(split="train"))
            points.append({"fraction": f, "n_train_seed0": n_train,
                           "seen_avg": rep.seen_avg, "unseen_avg": rep.unseen_avg,
                           "per_seed_unseen": [c["unseen_avg"] for c in cells],
                           "per_seed_seen": [c["seen_avg"] for c in cells],
                           "cell_hashes": [c["config_hash"] for c in cells]})
        curves[method] = points
    return {"task": task, "fractions": sorted(fractions), "seeds": seeds, "curves": curves}


def plot_curves(curves: Mapping[str, Any], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
    for ax, key, title in ((axes[0], "seen_avg", "Seen domains"), (axes[1], "unseen_avg", "Unseen domains")):
        for method, points in curves["curves"].items():
            xs = [100 * p["fraction"] for p in points]
            ax.plot(xs, [p[key] for p in points], marker="o", label=method)
        ax.set_xscale("log")
        ax.set_xticks([5, 10, 20, 50, 100], ["5", "10", "20", "50", "100"])
        ax.set_xlabel("% of labeled training data")
        ax.set_title(title)
    axes[0].set_ylabel(f"{curves['task']} metric (%)")
    axes[1].legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_grid_report(grid: ExperimentGrid, out_dir: str | Path, name: str = "ablation") -> tuple[Path, Path]:
    """JSON (sorted keys, no timestamps) and Markdown tables, one per task."""
    out_dir = Path(out_dir)
    obj = grid.to_json()
    json_path = out_dir / f"{name}.json"
    atomic_write_json(obj, json_path)
    parts = []
    for task, rows in grid.reports().items():
        parts.append(markdown_table(TASK_TITLES.get(task, task), rows))
    md_path = out_dir / f"{name}.md"
    md_path.write_text(f"## {name}\n\nSeeds: {', '.join(map(str, grid.seeds))}\n\n" + "\n".join(parts))
    return json_path, md_path
