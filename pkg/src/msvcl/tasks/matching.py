"""Cross-view mass matching with a siamese embedding trained by the max-margin loss."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from ..data.sample import BoundingBox, MammogramSample, iou
from ..learning.encoder import EncoderConfig
from ..learning.losses import max_margin, pair_distance
from .backbone import head_optimizer, load_backbone, refresh_batchnorm
from .roi import LabeledBoxes, RoiPatch, anatomical_gate, extract_roi, label_candidates

log = logging.getLogger(__name__)

FEATURE_SCALE = np.array([100.0, 100.0, 1000.0], dtype=np.float32)


@dataclass
class MatchCandidate:
    roi_cc: RoiPatch
    roi_mlo: RoiPatch
    tp_flags: tuple[bool, bool]
    y: int
    lesion_ids: tuple[int | None, int | None] = (None, None)
    index: tuple[int, int] = (0, 0)


def _random_fp_boxes(sample: MammogramSample, n: int, rng: np.random.Generator,
                     size_px: tuple[float, float]) -> list[BoundingBox]:
    h, w = sample.image.shape
    out: list[BoundingBox] = []
    tries = 0
    while len(out) < n and tries < 200:
        tries += 1
        bw = rng.uniform(*size_px)
        bh = bw * rng.uniform(0.8, 1.25)
        box = BoundingBox(rng.uniform(0, w - bw), rng.uniform(0, h - bh), bw, bh)
        if sample.image[int(box.center[1]), int(box.center[0])] < 0.1:
            continue
        if any(iou(box, g) > 0.1 for g in sample.annotations):
            continue
        out.append(box)
    return out


def build_candidates(cc: MammogramSample, mlo: MammogramSample, cfg: Mapping[str, Any],
                     rng: np.random.Generator | None = None, result=None,
                     iou_threshold: float = 0.5) -> list[MatchCandidate]:
    """All cross-view pairs for one breast.

    With a detection ``result`` the candidates are its boxes, labeled TP/FP
    against ground truth. Without one they are the ground-truth boxes plus
    ``extra_negatives`` random tissue boxes per view. ``y = 1`` only for two
    TP boxes of the same lesion that also pass the anatomical gate.
    """
    if result is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [max(b.w, b.h) for b in cc.annotations + mlo.annotations] or [24.0]
        span = (0.8 * min(sizes), 1.2 * max(sizes))
        views = []
        for s in (cc, mlo):
            fps = _random_fp_boxes(s, int(cfg["extra_negatives"]), rng, span)
            views.append(LabeledBoxes(list(s.annotations) + fps, [True] * len(s.annotations) + [False] * len(fps),
                                      [b.lesion_id for b in s.annotations] + [None] * len(fps)))
        lab_cc, lab_mlo = views
    else:
        lab_cc, lab_mlo = label_candidates(result, cc.annotations, mlo.annotations, iou_threshold)
    size = int(cfg["roi_input"])
    rois_cc = [extract_roi(cc, b, size) for b in lab_cc.boxes]
    rois_mlo = [extract_roi(mlo, b, size) for b in lab_mlo.boxes]
    gate = (float(cfg["gate_nipple_rel"]), tuple(cfg["gate_size_ratio"]))
    out = []
    for i, rc in enumerate(rois_cc):
        for j, rm in enumerate(rois_mlo):
            ids = (lab_cc.lesion_ids[i], lab_mlo.lesion_ids[j])
            tp = (lab_cc.is_tp[i], lab_mlo.is_tp[j])
            y = int(all(tp) and ids[0] == ids[1] and anatomical_gate(rc, rm, *gate, lesion_ids=ids))
            out.append(MatchCandidate(rc, rm, tp, y, ids, (i, j)))
    return out


class EmbeddingHead(nn.Module):
    def __init__(self, in_dim: int, embed_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim + 3, 128), nn.ReLU(inplace=True), nn.Linear(128, embed_dim))

    def forward(self, feats, anat):
        return self.net(torch.cat([feats, anat], dim=1))


class Matcher(nn.Module):
    def __init__(self, backbone: nn.Module, settings: Mapping[str, Any]):
        super().__init__()
        self.backbone = backbone
        self.head = EmbeddingHead(backbone.feature_dim, int(settings["embed_dim"]))
        self.settings = dict(settings)
        self.history: list[dict[str, float]] = []

    @property
    def margin(self) -> float:
        return float(self.settings["margin"])

    def embed(self, rois: Sequence[RoiPatch]) -> torch.Tensor:
        x = torch.from_numpy(np.stack([r.patch for r in rois]))[:, None]
        anat = torch.from_numpy(np.stack([r.features / FEATURE_SCALE for r in rois]))
        return self.head(self.backbone(x), anat)

    @torch.no_grad()
    def distances(self, pairs: Sequence[tuple[RoiPatch, RoiPatch]]) -> np.ndarray:
        if not pairs:
            return np.zeros(0)
        self.eval()
        a = self.embed([p[0] for p in pairs])
        b = self.embed([p[1] for p in pairs])
        return pair_distance(a, b).numpy()


def train_matcher(candidates: Sequence[MatchCandidate], backbone_source, cfg: Mapping[str, Any],
                  enc_cfg: EncoderConfig, *, seed: int = 0) -> Matcher:
    """Fit the embedding so same-lesion pairs are close and others at least ``margin`` apart."""
    ys = {c.y for c in candidates}
    if ys != {0, 1}:
        raise ValueError(f"matcher training needs both Y=1 and Y=0 pairs, got labels {sorted(ys)}")
    m = float(cfg["margin"])
    if m == 0:
        warnings.warn("margin m=0 makes every negative term vanish; the matcher will not separate pairs",
                      RuntimeWarning, stacklevel=2)
    backbone = load_backbone(backbone_source, enc_cfg, seed)
    model = Matcher(backbone, cfg)
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 601])
    opt = head_optimizer(model.backbone, model.head, cfg)
    bs = int(cfg["batch_size"])
    y_all = np.array([c.y for c in candidates], dtype=np.float32)
    for epoch in range(int(cfg["epochs"])):
        model.train()
        order = rng.permutation(len(candidates))
        losses = []
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            f1 = model.embed([candidates[i].roi_cc for i in idx])
            f2 = model.embed([candidates[i].roi_mlo for i in idx])
            loss = max_margin(f1, f2, torch.from_numpy(y_all[idx]), m)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        model.history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")})
    rois = [r for c in candidates for r in (c.roi_cc, c.roi_mlo)]
    refresh_batchnorm(model, (lambda i=i: model.embed(rois[i:i + bs]) for i in range(0, len(rois), bs)))
    model.eval()
    return model


def greedy_match(n_cc: int, n_mlo: int, distances: Mapping[tuple[int, int], float],
                 threshold: float) -> list[tuple[int, int, float]]:
    """Injective assignment taking the smallest remaining distance while below ``threshold``.

    ``distances`` only holds the pairs allowed to match (gate-passing).
    """
    used_cc: set[int] = set()
    used_mlo: set[int] = set()
    out = []
    for (i, j), d in sorted(distances.items(), key=lambda kv: (kv[1], kv[0])):
        if d >= threshold:
            break
        if i in used_cc or j in used_mlo or not (0 <= i < n_cc and 0 <= j < n_mlo):
            continue
        used_cc.add(i)
        used_mlo.add(j)
        out.append((i, j, float(d)))
    return out


def match(matcher: Matcher, result, cc: MammogramSample, mlo: MammogramSample,
          candidates: Sequence[MatchCandidate] | None = None) -> list[tuple[BoundingBox, BoundingBox, float]]:
    """Matched (cc box, mlo box, D) triples for one breast's detections."""
    cfg = matcher.settings
    if not result.B_cc or not result.B_mlo:
        return []
    if candidates is None:
        size = int(cfg["roi_input"])
        rois_cc = [extract_roi(cc, b, size) for b in result.B_cc]
        rois_mlo = [extract_roi(mlo, b, size) for b in result.B_mlo]
        candidates = [MatchCandidate(rc, rm, (False, False), 0, index=(i, j))
                      for i, rc in enumerate(rois_cc) for j, rm in enumerate(rois_mlo)]
    gate = (float(cfg["gate_nipple_rel"]), tuple(cfg["gate_size_ratio"]))
    allowed = [c for c in candidates if anatomical_gate(c.roi_cc, c.roi_mlo, *gate)]
    dist = matcher.distances([(c.roi_cc, c.roi_mlo) for c in allowed])
    table = {c.index: float(d) for c, d in zip(allowed, dist)}
    pairs = greedy_match(len(result.B_cc), len(result.B_mlo), table,
                         float(cfg["accept_fraction"]) * matcher.margin)
    return [(result.B_cc[i], result.B_mlo[j], d) for i, j, d in pairs]


def matching_accuracy(candidates: Sequence[MatchCandidate], matched: set[tuple[int, int]]) -> float:
    """Mean of true-pair link rate and rejection rate of pairs involving a false positive.

    Pairs of two TP boxes of different lesions count toward neither part.
    """
    true_pairs = [c for c in candidates if c.y == 1]
    fp_pairs = [c for c in candidates if not all(c.tp_flags)]
    parts = []
    if true_pairs:
        parts.append(np.mean([c.index in matched for c in true_pairs]))
    if fp_pairs:
        parts.append(np.mean([c.index not in matched for c in fp_pairs]))
    return float(np.mean(parts)) if parts else float("nan")


def breast_pairs(samples: Sequence[MammogramSample]) -> list[tuple[MammogramSample, MammogramSample]]:
    """(CC, MLO) pairs of the same breast; unpaired views are dropped."""
    views: dict[tuple, dict[str, MammogramSample]] = {}
    for s in samples:
        views.setdefault((s.domain, s.patient_id, s.laterality), {})[s.view] = s
    return [(v["CC"], v["MLO"]) for _, v in sorted(views.items()) if "CC" in v and "MLO" in v]
