"""Generic warm-start weights.

Stand-in for natural-image initialization at desk scale: the encoder is
trained briefly to classify procedurally drawn shapes (disc, square,
triangle, cross) on textured backgrounds. Nothing here sees mammograms.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .encoder import EncoderConfig, build_encoder

N_CLASSES = 4


def generic_images(n: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((n, size, size), dtype=np.float32)
    labels = rng.integers(0, N_CLASSES, size=n)
    for i, label in enumerate(labels):
        bg = ndimage.gaussian_filter(rng.standard_normal((size, size)), rng.uniform(1, 4))
        bg = 0.3 + 0.15 * bg / (bg.std() + 1e-9) + rng.uniform(-0.2, 0.2) * (xx / size - 0.5)
        cx, cy = rng.uniform(0.3, 0.7, size=2) * size
        r = rng.uniform(0.12, 0.3) * size
        dx, dy = xx - cx, yy - cy
        if label == 0:
            shape = np.hypot(dx, dy) < r
        elif label == 1:
            shape = (np.abs(dx) < r * 0.8) & (np.abs(dy) < r * 0.8)
        elif label == 2:
            shape = (dy < r * 0.7) & (dy > -r + 2 * np.abs(dx) * 0.9)
        else:
            arm = r * 0.3
            shape = ((np.abs(dx) < arm) & (np.abs(dy) < r)) | ((np.abs(dy) < arm) & (np.abs(dx) < r))
        level = rng.uniform(0.45, 0.95) * rng.choice([1.0, -0.6])
        img = bg + level * shape + rng.normal(0, 0.03, size=bg.shape)
        images[i] = np.clip(img, 0, 1)
    return images, labels


def warm_start_state(cfg: EncoderConfig, seed: int, steps: int = 150, batch_size: int = 32,
                     size: int = 64, lr: float = 0.05) -> dict[str, torch.Tensor]:
    """Encoder ``state_dict`` after a short supervised run on generic shapes."""
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 4242])
    encoder = build_encoder(cfg)
    clf = nn.Linear(encoder.feature_dim, N_CLASSES)
    opt = torch.optim.SGD(list(encoder.parameters()) + list(clf.parameters()), lr=lr, momentum=0.9,
                          weight_decay=1e-4)
    encoder.train()
    for _ in range(steps):
        x, y = generic_images(batch_size, size, rng)
        logits = clf(encoder(torch.from_numpy(x)[:, None]))
        loss = F.cross_entropy(logits, torch.from_numpy(y))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return {k: v.detach().clone() for k, v in encoder.state_dict().items()}
