"""Contrastive pretraining: losses, augmentations, encoders and the training loop."""

from .augment import AugmentConfig, augment
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .encoder import ContrastiveModel, EncoderConfig, ProjectionHead, TinyEncoder, build_encoder
from .losses import max_margin, nt_xent, pair_distance
from .pretrain import PretrainError, deterministic_mode, pretrain, ssl_records
from .warm import warm_start_state

__all__ = [
    "AugmentConfig", "CheckpointError", "ContrastiveModel", "EncoderConfig", "PretrainError",
    "ProjectionHead", "TinyEncoder", "augment", "deterministic_mode", "build_encoder", "load_checkpoint", "max_margin",
    "nt_xent", "pair_distance", "pretrain", "save_checkpoint", "ssl_records", "warm_start_state",
]
