"""Backbone initialization for the downstream heads."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

import torch
from torch import nn

from ..learning.checkpoint import load_checkpoint
from ..learning.encoder import EncoderConfig, build_encoder
from ..learning.warm import warm_start_state


def load_backbone(source: str | Path | Mapping[str, Any] | None, enc_cfg: EncoderConfig,
                  seed: int = 0, warm_steps: int = 150) -> nn.Module:
    """Encoder initialized from ``source``.

    ``None`` or ``"random"`` gives a fresh seeded init, ``"warm"`` the generic
    warm-start weights; a path or a pretraining payload loads its encoder.
    """
    torch.manual_seed(seed)
    encoder = build_encoder(enc_cfg)
    if source is None or source == "random":
        return encoder
    if source == "warm":
        encoder.load_state_dict(warm_start_state(enc_cfg, seed, steps=warm_steps))
        return encoder
    blob = source if isinstance(source, Mapping) else load_checkpoint(source, "pretrain")
    saved = blob.get("encoder_cfg")
    if saved is not None and EncoderConfig(**saved) != enc_cfg:
        raise ValueError(f"checkpoint encoder {saved} does not match requested {enc_cfg.to_dict()}")
    encoder.load_state_dict(blob["encoder"])
    return encoder


def param_groups(backbone: nn.Module, head: nn.Module, lr: float, backbone_lr_scale: float = 1.0):
    return [{"params": list(backbone.parameters()), "lr": lr * backbone_lr_scale},
            {"params": list(head.parameters()), "lr": lr}]


def head_optimizer(backbone: nn.Module, head: nn.Module, cfg: Mapping[str, Any]) -> torch.optim.Optimizer:
    """SGD with momentum unless ``cfg["optimizer"]`` is ``"adam"``."""
    lr = float(cfg["lr"])
    groups = param_groups(backbone, head, lr, float(cfg.get("backbone_lr_scale", 1.0)))
    kind = cfg.get("optimizer", "sgd")
    if kind == "adam":
        return torch.optim.Adam(groups, lr=lr, weight_decay=float(cfg["weight_decay"]))
    if kind == "sgd":
        return torch.optim.SGD(groups, lr=lr, momentum=float(cfg.get("momentum", 0.9)),
                               weight_decay=float(cfg["weight_decay"]))
    raise ValueError(f"unknown optimizer {kind!r}; expected sgd or adam")


@torch.no_grad()
def refresh_batchnorm(model: nn.Module, batches) -> None:
    """Recompute BatchNorm running statistics as a plain average over ``batches``.

    Short fine-tuning runs leave the exponential running averages far from
    the final weights' statistics; this makes eval mode match them.
    """
    bns = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns:
        return
    saved = [(m, m.momentum) for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    was_training = model.training
    model.train()
    for run in batches:
        run()
    for m, mom in saved:
        m.momentum = mom
    model.train(was_training)
