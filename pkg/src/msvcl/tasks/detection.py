"""Single-scale anchor-free mass detector on the stride-8 backbone map.

Every map cell predicts an objectness logit and four distances (left, top,
right, bottom) to the box sides. Cells near a ground-truth box center are
positives; boxes are decoded, thresholded and pruned with NMS.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import generalized_box_iou_loss, nms as tv_nms, sigmoid_focal_loss

from ..data.sample import BoundingBox, MammogramSample
from ..evaluation.metrics import average_precision
from ..learning.augment import resize
from ..learning.encoder import EncoderConfig
from .backbone import load_backbone, param_groups, refresh_batchnorm

log = logging.getLogger(__name__)


@dataclass
class DetectionResult:
    """Scored candidates for the two views of one breast, best first."""

    B_cc: list[BoundingBox] = field(default_factory=list)
    B_mlo: list[BoundingBox] = field(default_factory=list)

    def __post_init__(self):
        for boxes in (self.B_cc, self.B_mlo):
            scores = [b.score for b in boxes]
            if any(s is None for s in scores) or scores != sorted(scores, reverse=True):
                raise ValueError("detections must carry scores sorted in descending order")

    def to_dict(self) -> dict[str, Any]:
        return {"B_cc": [b.to_dict() for b in self.B_cc], "B_mlo": [b.to_dict() for b in self.B_mlo]}


def nms(boxes: Sequence[BoundingBox], iou_threshold: float = 0.5) -> list[BoundingBox]:
    """Greedy non-maximum suppression; survivors sorted by descending score."""
    if not boxes:
        return []
    xyxy = torch.tensor([b.xyxy() for b in boxes], dtype=torch.float64)
    scores = torch.tensor([b.score or 0.0 for b in boxes], dtype=torch.float64)
    keep = tv_nms(xyxy, scores, iou_threshold).tolist()
    return [boxes[i] for i in keep]


class DetectionHead(nn.Module):
    def __init__(self, in_ch: int, hidden: int = 64):
        super().__init__()
        self.tower = nn.Sequential(nn.Conv2d(in_ch, hidden, 3, 1, 1), nn.GroupNorm(8, hidden), nn.ReLU(inplace=True),
                                   nn.Conv2d(hidden, hidden, 3, 1, 1), nn.GroupNorm(8, hidden), nn.ReLU(inplace=True))
        self.obj = nn.Conv2d(hidden, 1, 3, 1, 1)
        self.reg = nn.Conv2d(hidden, 4, 3, 1, 1)
        nn.init.constant_(self.obj.bias, -math.log(99.0))
        nn.init.zeros_(self.reg.weight)
        nn.init.constant_(self.reg.bias, math.log(2.0))

    def forward(self, fmap):
        t = self.tower(fmap)
        return self.obj(t)[:, 0], self.reg(t)


class Detector(nn.Module):
    def __init__(self, backbone: nn.Module, settings: Mapping[str, Any]):
        super().__init__()
        self.backbone = backbone
        self.head = DetectionHead(backbone.map_channels)
        self.stride = backbone.map_stride
        self.settings = dict(settings)
        self.history: list[dict[str, float]] = []

    @property
    def input_size(self) -> int:
        return int(self.settings["input_size"])

    def forward(self, x):
        logits, reg = self.head(self.backbone.features(x))
        return logits, reg

    def cell_centers(self, h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
        s = self.stride
        ys = (torch.arange(h, dtype=torch.float32) + 0.5) * s
        xs = (torch.arange(w, dtype=torch.float32) + 0.5) * s
        return torch.meshgrid(ys, xs, indexing="ij")

    def decode(self, reg: torch.Tensor, h: int, w: int) -> torch.Tensor:
        """(B, 4, h, w) log-distances -> (B, h, w, 4) xyxy boxes in input pixels."""
        cy, cx = self.cell_centers(h, w)
        d = torch.exp(reg.clamp(max=8.0)) * self.stride
        return torch.stack([cx - d[:, 0], cy - d[:, 1], cx + d[:, 2], cy + d[:, 3]], dim=-1)


def assign_targets(boxes_xyxy: np.ndarray, h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Positive-cell mask and the matched box per cell.

    A cell is positive for a box when its center lies inside the box and
    within max(0.75 * stride, side / 4) of the box center on each axis; the
    cell nearest each box center is always positive. Overlaps go to the
    smaller box.
    """
    pos = np.zeros((h, w), dtype=bool)
    target = np.zeros((h, w, 4), dtype=np.float32)
    area = np.full((h, w), np.inf)
    ys = (np.arange(h) + 0.5) * stride
    xs = (np.arange(w) + 0.5) * stride
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    for x0, y0, x1, y1 in boxes_xyxy:
        bx, by = (x0 + x1) / 2, (y0 + y1) / 2
        rx = max(0.75 * stride, (x1 - x0) / 4)
        ry = max(0.75 * stride, (y1 - y0) / 4)
        m = (cx > x0) & (cx < x1) & (cy > y0) & (cy < y1) & (np.abs(cx - bx) < rx) & (np.abs(cy - by) < ry)
        i = min(h - 1, max(0, int(by // stride)))
        j = min(w - 1, max(0, int(bx // stride)))
        m[i, j] = True
        a = (x1 - x0) * (y1 - y0)
        m &= a < area
        pos |= m
        area[m] = a
        target[m] = (x0, y0, x1, y1)
    return pos, target


def _prepare(sample: MammogramSample, size: int) -> tuple[np.ndarray, float, float]:
    h, w = sample.image.shape
    return resize(sample.image, size), size / w, size / h


def _batch_targets(samples, flips, size, stride):
    n_cells = size // stride
    pos, tgt = [], []
    for s, flip in zip(samples, flips):
        sx, sy = size / s.image.shape[1], size / s.image.shape[0]
        boxes = np.array([[b.x * sx, b.y * sy, (b.x + b.w) * sx, (b.y + b.h) * sy] for b in s.annotations],
                         dtype=np.float32).reshape(-1, 4)
        if flip and len(boxes):
            boxes = np.stack([size - boxes[:, 2], boxes[:, 1], size - boxes[:, 0], boxes[:, 3]], axis=1)
        p, t = assign_targets(boxes, n_cells, n_cells, stride)
        pos.append(p)
        tgt.append(t)
    return torch.from_numpy(np.stack(pos)), torch.from_numpy(np.stack(tgt))


def detection_loss(model: Detector, x: torch.Tensor, pos: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
    logits, reg = model(x)
    n_pos = max(1.0, float(pos.sum()))
    cls = sigmoid_focal_loss(logits, pos.float(), alpha=0.25, gamma=2.0, reduction="sum") / n_pos
    if not pos.any():
        return cls
    boxes = model.decode(reg, logits.shape[1], logits.shape[2])
    box = generalized_box_iou_loss(boxes[pos], tgt[pos], reduction="sum") / n_pos
    return cls + box


def finetune_detector(backbone_source, samples: Sequence[MammogramSample], cfg: Mapping[str, Any],
                      enc_cfg: EncoderConfig, *, seed: int = 0,
                      val_samples: Sequence[MammogramSample] | None = None) -> Detector:
    """Train the detector on ``samples`` (labeled, seen domains).

    ``cfg`` is the ``tasks.detection`` section. Horizontal flips are the only
    augmentation. Validation AP is recorded per epoch when ``val_samples`` is
    given.
    """
    if not samples:
        raise ValueError("detector fine-tuning needs a non-empty train split")
    backbone = load_backbone(backbone_source, enc_cfg, seed)
    model = Detector(backbone, cfg)
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 501])
    size = model.input_size
    images = np.stack([_prepare(s, size)[0] for s in samples])
    opt = torch.optim.SGD(param_groups(model.backbone, model.head, float(cfg["lr"]),
                                       float(cfg.get("backbone_lr_scale", 1.0))),
                          lr=float(cfg["lr"]), momentum=float(cfg["momentum"]),
                          weight_decay=float(cfg["weight_decay"]))
    bs = int(cfg["batch_size"])
    for epoch in range(int(cfg["epochs"])):
        model.train()
        order = rng.permutation(len(samples))
        losses = []
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            flips = rng.random(len(idx)) < 0.5
            x = images[idx].copy()
            x[flips] = x[flips][:, :, ::-1]
            pos, tgt = _batch_targets([samples[i] for i in idx], flips, size, model.stride)
            loss = detection_loss(model, torch.from_numpy(x)[:, None], pos, tgt)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 10.0)
            opt.step()
            losses.append(float(loss.detach()))
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if val_samples:
            row["val_ap"] = average_precision([detect(model, s) for s in val_samples],
                                              [s.annotations for s in val_samples],
                                              float(cfg.get("iou_threshold", 0.5)))
        model.history.append(row)
        log.debug("detector epoch %d %s", epoch, row)
    refresh_batchnorm(model, (lambda i=i: model(torch.from_numpy(images[i:i + bs])[:, None])
                              for i in range(0, len(images), bs)))
    model.eval()
    return model


@torch.no_grad()
def detect(model: Detector, sample: MammogramSample, score_threshold: float | None = None) -> list[BoundingBox]:
    """Scored boxes for one view in image pixels, best first."""
    model.eval()
    cfg = model.settings
    thr = float(cfg["score_threshold"] if score_threshold is None else score_threshold)
    size = model.input_size
    x, sx, sy = _prepare(sample, size)
    logits, reg = model(torch.from_numpy(np.ascontiguousarray(x))[None, None])
    scores = torch.sigmoid(logits[0]).flatten()
    boxes = model.decode(reg, logits.shape[1], logits.shape[2])[0].reshape(-1, 4)
    keep = torch.nonzero(scores > thr).flatten()
    if keep.numel() == 0:
        return []
    keep = keep[torch.argsort(scores[keep], descending=True)][:200]
    kept = tv_nms(boxes[keep].double(), scores[keep].double(), float(cfg["nms_iou"]))
    keep = keep[kept][: int(cfg["max_detections"])]
    h, w = sample.image.shape
    out = []
    for k in keep.tolist():
        x0, y0, x1, y1 = boxes[k].tolist()
        x0, x1 = max(0.0, x0 / sx), min(float(w), x1 / sx)
        y0, y1 = max(0.0, y0 / sy), min(float(h), y1 / sy)
        if x1 - x0 > 1e-3 and y1 - y0 > 1e-3:
            out.append(BoundingBox(x0, y0, x1 - x0, y1 - y0, score=float(scores[k])))
    return out


def detect_breast(model: Detector, cc: MammogramSample, mlo: MammogramSample) -> DetectionResult:
    return DetectionResult(detect(model, cc), detect(model, mlo))
