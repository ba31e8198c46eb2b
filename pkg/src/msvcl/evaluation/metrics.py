"""Detection AP and classification accuracy."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..data.sample import BoundingBox, greedy_claims


def pr_curve(predictions: Sequence[Sequence[BoundingBox]], ground_truth: Sequence[Sequence[BoundingBox]],
             iou_threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray, int]:
    """Precision and recall after each prediction in global score order."""
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground truth must cover the same images")
    scores, hits = [], []
    for preds, gts in zip(predictions, ground_truth):
        claims = greedy_claims(preds, gts, iou_threshold)
        scores.extend(p.score or 0.0 for p in preds)
        hits.extend(c is not None for c in claims)
    n_gt = sum(len(g) for g in ground_truth)
    order = np.argsort(-np.asarray(scores, dtype=float), kind="stable")
    tp = np.cumsum(np.asarray(hits, dtype=float)[order]) if hits else np.zeros(0)
    ranks = np.arange(1, len(tp) + 1)
    precision = tp / ranks if len(tp) else np.zeros(0)
    recall = tp / n_gt if n_gt else np.zeros_like(tp)
    return precision, recall, n_gt


def average_precision(predictions: Sequence[Sequence[BoundingBox]],
                      ground_truth: Sequence[Sequence[BoundingBox]],
                      iou_threshold: float = 0.5, interpolation: str = "all-point") -> float:
    """AP of scored boxes over a set of images (one list per image).

    ``interpolation`` is ``"all-point"`` (area under the monotone precision
    envelope) or ``"11-point"``. With no ground truth at all the result is
    NaN; with ground truth but no predictions it is 0.
    """
    if interpolation not in ("all-point", "11-point"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    precision, recall, n_gt = pr_curve(predictions, ground_truth, iou_threshold)
    if n_gt == 0:
        return float("nan")
    if len(precision) == 0:
        return 0.0
    if interpolation == "11-point":
        points = []
        for t in np.linspace(0, 1, 11):
            mask = recall >= t - 1e-12
            points.append(precision[mask].max() if mask.any() else 0.0)
        return float(np.mean(points))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def accuracy(predictions: Sequence, labels: Sequence) -> float:
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions vs {len(labels)} labels")
    if not labels:
        return float("nan")
    return float(np.mean([p == t for p, t in zip(predictions, labels)]))
