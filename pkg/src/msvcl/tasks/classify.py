"""BI-RADS rating (ROI input) and breast density (whole view) classifiers."""

from __future__ import annotations

from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..data.phantom import BIRADS_LABELS, DENSITY_LABELS
from ..data.sample import MammogramSample
from ..learning.augment import resize
from ..learning.encoder import EncoderConfig
from .backbone import head_optimizer, load_backbone, refresh_batchnorm
from .roi import extract_roi

TASK_LABELS = {"birads": tuple(BIRADS_LABELS), "density": tuple(DENSITY_LABELS)}


class MissingLabelsError(ValueError):
    """The requested task has no labels in the given samples."""


def classification_inputs(task: str, samples: Sequence[MammogramSample], cfg: Mapping[str, Any],
                          boxes=None) -> tuple[np.ndarray, list[str | None]]:
    """Model inputs and labels.

    Density uses the whole view resized to ``input_size``; BI-RADS uses one
    ROI per box (ground-truth boxes unless ``boxes`` gives a list per sample).
    """
    if task == "density":
        size = int(cfg["input_size"])
        x = np.stack([resize(s.image, size) for s in samples]) if samples else np.zeros((0, size, size))
        return x.astype(np.float32), [s.density_class for s in samples]
    if task == "birads":
        size = int(cfg["roi_input"])
        patches, labels = [], []
        for k, s in enumerate(samples):
            for b in (s.annotations if boxes is None else boxes[k]):
                patches.append(extract_roi(s, b, size).patch)
                labels.append(b.label)
        x = np.stack(patches) if patches else np.zeros((0, size, size), dtype=np.float32)
        return x.astype(np.float32), labels
    raise ValueError(f"unknown classification task {task!r}; expected birads or density")


class Classifier(nn.Module):
    def __init__(self, backbone: nn.Module, task: str, settings: Mapping[str, Any]):
        super().__init__()
        self.task = task
        self.labels = TASK_LABELS[task]
        self.backbone = backbone
        self.head = nn.Linear(backbone.feature_dim, len(self.labels))
        self.settings = dict(settings)
        self.history: list[dict[str, float]] = []

    def forward(self, x):
        return self.head(self.backbone(x))

    @torch.no_grad()
    def predict_proba(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        self.eval()
        if len(x) == 0:
            return np.zeros((0, len(self.labels)), dtype=np.float32)
        out = [F.softmax(self(torch.from_numpy(x[i:i + batch_size])[:, None]), dim=1).numpy()
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def predict(self, x: np.ndarray) -> list[str]:
        return [self.labels[i] for i in self.predict_proba(x).argmax(axis=1)]


def train_classifier(backbone_source, task: str, samples: Sequence[MammogramSample],
                     cfg: Mapping[str, Any], enc_cfg: EncoderConfig, *, seed: int = 0) -> Classifier:
    """Fine-tune backbone + linear head with cross-entropy (horizontal flips only)."""
    if task not in TASK_LABELS:
        raise ValueError(f"unknown classification task {task!r}; expected birads or density")
    x, labels = classification_inputs(task, samples, cfg)
    if not labels:
        raise MissingLabelsError(f"no {task} training examples in the given samples")
    missing = sum(lab is None for lab in labels)
    if missing:
        raise MissingLabelsError(f"{missing} of {len(labels)} {task} examples have no label")
    classes = TASK_LABELS[task]
    bad = {lab for lab in labels if lab not in classes}
    if bad:
        raise MissingLabelsError(f"unknown {task} labels {sorted(bad)}")
    y = np.array([classes.index(lab) for lab in labels])
    backbone = load_backbone(backbone_source, enc_cfg, seed)
    model = Classifier(backbone, task, cfg)
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 701])
    opt = head_optimizer(model.backbone, model.head, cfg)
    bs = int(cfg["batch_size"])
    for epoch in range(int(cfg["epochs"])):
        model.train()
        order = rng.permutation(len(y))
        losses, correct = [], 0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            xb = x[idx].copy()
            flips = rng.random(len(idx)) < 0.5
            xb[flips] = xb[flips][:, :, ::-1]
            logits = model(torch.from_numpy(xb)[:, None])
            target = torch.from_numpy(y[idx])
            loss = F.cross_entropy(logits, target)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
            correct += int((logits.argmax(1) == target).sum())
        model.history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
                              "train_acc": correct / len(y)})
    refresh_batchnorm(model, (lambda i=i: model(torch.from_numpy(x[i:i + bs])[:, None])
                              for i in range(0, len(x), bs)))
    model.eval()
    return model
