"""Contrastive objectives: masked NT-Xent and the max-margin pair loss."""

from __future__ import annotations

import logging

import torch

log = logging.getLogger(__name__)


def nt_xent(z: torch.Tensor, positive_map, negative_mask, tau: float = 0.5,
            stats: dict | None = None) -> torch.Tensor:
    """Masked normalized-temperature cross entropy.

    For every anchor ``i`` with partner ``j = positive_map[i]``::

        l_i = -log( exp(s_ij / tau) / (exp(s_ij / tau) + sum_{k: mask[i, k]} exp(s_ik / tau)) )

    with ``s`` the dot product of rows of ``z`` (callers pass unit vectors).
    Anchors without a positive (``positive_map[i] < 0``) are skipped and
    counted in ``stats["skipped"]``; an anchor with a positive but no eligible
    negative contributes ``-log(1) = 0``. The result is the mean over the
    remaining anchors.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    n = z.shape[0]
    pos = torch.as_tensor(positive_map, dtype=torch.long, device=z.device)
    mask = torch.as_tensor(negative_mask, dtype=torch.bool, device=z.device)
    if pos.shape != (n,) or mask.shape != (n, n):
        raise ValueError(f"expected positive_map ({n},) and mask ({n}, {n}); "
                         f"got {tuple(pos.shape)} and {tuple(mask.shape)}")
    logits = (z @ z.T) / tau
    has_pos = pos >= 0
    n_skip = int((~has_pos).sum())
    if n_skip:
        log.warning("nt_xent: skipped %d anchors without a positive", n_skip)
    if stats is not None:
        stats["skipped"] = stats.get("skipped", 0) + n_skip

    rows = torch.arange(n, device=z.device)
    pos_logit = logits[rows, pos.clamp(min=0)]
    neg_inf = torch.finfo(logits.dtype).min
    neg_logits = logits.masked_fill(~mask, neg_inf)
    pos_term = torch.where(has_pos, pos_logit, torch.full_like(pos_logit, neg_inf))
    denom = torch.logsumexp(torch.cat([pos_term[:, None], neg_logits], dim=1), dim=1)
    per_anchor = denom - pos_logit
    keep = has_pos
    if not bool(keep.any()):
        return z.sum() * 0.0
    return per_anchor[keep].mean()


def pair_distance(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """Euclidean distance per row with a gradient that stays finite at zero."""
    d2 = ((f1 - f2) ** 2).sum(dim=-1)
    positive = d2 > 0
    safe = torch.where(positive, d2, torch.ones_like(d2))
    return torch.where(positive, torch.sqrt(safe), torch.zeros_like(d2))


def max_margin(f1: torch.Tensor, f2: torch.Tensor, y, m: float = 10.0) -> torch.Tensor:
    """``(1/2K) * sum_k [ y D^2 + (1 - y) max(m - D, 0)^2 ]`` with ``D = ||f1 - f2||``."""
    if m < 0:
        raise ValueError(f"margin must be >= 0, got {m}")
    if f1.shape != f2.shape:
        raise ValueError(f"feature shapes differ: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    y = torch.as_tensor(y, dtype=f1.dtype, device=f1.device).reshape(-1)
    k = f1.shape[0]
    d2 = ((f1 - f2) ** 2).sum(dim=-1)
    d = pair_distance(f1, f2)
    hinge = torch.clamp(m - d, min=0.0) ** 2
    return (y * d2 + (1.0 - y) * hinge).sum() / (2.0 * k)
