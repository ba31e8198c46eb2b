"""Toy-scale unpaired style transfer (cycle-consistent adversarial training).

Optional learned alternative to the parametric engine. The trained model is a
callable with the ``transfer_fn`` signature used by :class:`StylePool`, so it
can be dropped into a pool unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..learning.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch))

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """c7s1 stem, two stride-2 downsamplings, ``blocks`` residual blocks, two upsamplings."""

    def __init__(self, blocks: int = 9, ch: int = 64):
        super().__init__()
        layers: list[nn.Module] = [nn.ReflectionPad2d(3), nn.Conv2d(1, ch, 7), nn.InstanceNorm2d(ch),
                                   nn.ReLU(inplace=True)]
        c = ch
        for _ in range(2):
            layers += [nn.Conv2d(c, 2 * c, 3, 2, 1), nn.InstanceNorm2d(2 * c), nn.ReLU(inplace=True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(blocks)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(c, c // 2, 3, 2, 1, output_padding=1), nn.InstanceNorm2d(c // 2),
                       nn.ReLU(inplace=True)]
            c //= 2
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(c, 1, 7), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class PatchDiscriminator(nn.Module):
    """Six-convolution PatchGAN producing a map of real/fake scores."""

    def __init__(self, ch: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, ch, 4, 2, 1), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(ch, 2 * ch, 4, 2, 1), nn.InstanceNorm2d(2 * ch), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(2 * ch, 4 * ch, 4, 2, 1), nn.InstanceNorm2d(4 * ch), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(4 * ch, 8 * ch, 3, 1, 1), nn.InstanceNorm2d(8 * ch), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * ch, 8 * ch, 3, 1, 1), nn.InstanceNorm2d(8 * ch), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(8 * ch, 1, 3, 1, 1))

    def forward(self, x):
        return self.net(x)


@dataclass
class StyleTransferModel:
    """Two generators mapping between ``domains[0]`` and ``domains[1]``."""

    domains: tuple[str, str]
    forward_gen: ResnetGenerator
    backward_gen: ResnetGenerator
    settings: dict[str, Any] = field(default_factory=dict)
    history: list[dict[str, float]] = field(default_factory=list)

    def generator(self, src: str, dst: str) -> ResnetGenerator:
        if (src, dst) == self.domains:
            return self.forward_gen
        if (dst, src) == self.domains:
            return self.backward_gen
        raise KeyError(f"model maps {self.domains[0]}<->{self.domains[1]}, not {src}->{dst}")

    @torch.no_grad()
    def map(self, image: np.ndarray, src: str, dst: str) -> np.ndarray:
        if src == dst:
            return np.asarray(image, dtype=np.float32)
        gen = self.generator(src, dst).eval()
        h, w = image.shape
        ph, pw = (-h) % 4, (-w) % 4
        x = torch.from_numpy(np.asarray(image, dtype=np.float32))[None, None]
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        return gen(x)[0, 0, :h, :w].numpy().astype(np.float32)

    def __call__(self, image, src, dst, rng=None) -> np.ndarray:
        return self.map(image, src, dst)

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, "style-transfer", {
            "domains": list(self.domains), "settings": self.settings, "history": self.history,
            "forward": self.forward_gen.state_dict(), "backward": self.backward_gen.state_dict()})

    @classmethod
    def load(cls, path: str | Path) -> "StyleTransferModel":
        blob = load_checkpoint(path, "style-transfer")
        s = blob["settings"]
        gens = []
        for key in ("forward", "backward"):
            g = ResnetGenerator(int(s["blocks"]), int(s["base_channels"]))
            g.load_state_dict(blob[key])
            gens.append(g)
        return cls(tuple(blob["domains"]), gens[0], gens[1], dict(s), list(blob["history"]))


def _crop(image: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape
    if h < size or w < size:
        image = np.pad(image, ((0, max(0, size - h)), (0, max(0, size - w))))
        h, w = image.shape
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top:top + size, left:left + size]


def balanced_indices(n_i: int, n_j: int, per_epoch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Equal-size index draws from both domains for one epoch."""
    take = lambda n: rng.permutation(n)[:per_epoch] if per_epoch <= n else rng.integers(0, n, per_epoch)  # noqa: E731
    return take(n_i), take(n_j)


def train_style_transfer(domain_i_images: Sequence[np.ndarray], domain_j_images: Sequence[np.ndarray],
                         config: Mapping[str, Any], *, domains: tuple[str, str] = ("i", "j"),
                         seed: int = 0) -> StyleTransferModel:
    """Fit both generators on unpaired crops.

    ``config`` uses the ``styles.cyclegan`` keys: crop, blocks, epochs, lr,
    images_per_domain, cycle_weight, base_channels. Each epoch draws the same
    number of crops from each domain. ``history`` holds per-epoch mean losses.
    """
    if len(domain_i_images) == 0 or len(domain_j_images) == 0:
        raise ValueError("style transfer needs at least one image per domain")
    crop = int(config["crop"])
    blocks = int(config["blocks"])
    ch = int(config["base_channels"])
    per_epoch = int(config.get("images_per_domain") or min(len(domain_i_images), len(domain_j_images)))
    cycle_weight = float(config["cycle_weight"])
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 77])
    g_ij, g_ji = ResnetGenerator(blocks, ch), ResnetGenerator(blocks, ch)
    d_i, d_j = PatchDiscriminator(ch), PatchDiscriminator(ch)
    lr = float(config["lr"])
    opt_g = torch.optim.Adam(list(g_ij.parameters()) + list(g_ji.parameters()), lr=lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(list(d_i.parameters()) + list(d_j.parameters()), lr=lr, betas=(0.5, 0.999))
    history = []
    for epoch in range(int(config["epochs"])):
        idx_i, idx_j = balanced_indices(len(domain_i_images), len(domain_j_images), per_epoch, rng)
        sums = {"cycle": 0.0, "gen_adv": 0.0, "disc": 0.0}
        for a, b in zip(idx_i, idx_j):
            xi = torch.from_numpy(np.ascontiguousarray(_crop(domain_i_images[a], crop, rng), dtype=np.float32))[None, None]
            xj = torch.from_numpy(np.ascontiguousarray(_crop(domain_j_images[b], crop, rng), dtype=np.float32))[None, None]
            fake_j, fake_i = g_ij(xi), g_ji(xj)
            adv = d_j(fake_j), d_i(fake_i)
            gen_adv = sum(F.mse_loss(p, torch.ones_like(p)) for p in adv)
            cycle = F.l1_loss(g_ji(fake_j), xi) + F.l1_loss(g_ij(fake_i), xj)
            opt_g.zero_grad()
            (gen_adv + cycle_weight * cycle).backward()
            opt_g.step()

            disc = 0.0
            for d, real, fake in ((d_i, xi, fake_i), (d_j, xj, fake_j)):
                pr, pf = d(real), d(fake.detach())
                disc = disc + 0.5 * (F.mse_loss(pr, torch.ones_like(pr)) + F.mse_loss(pf, torch.zeros_like(pf)))
            opt_d.zero_grad()
            disc.backward()
            opt_d.step()
            sums["cycle"] += float(cycle.detach())
            sums["gen_adv"] += float(gen_adv.detach())
            sums["disc"] += float(disc.detach())
        row = {k: v / per_epoch for k, v in sums.items()}
        row.update(epoch=epoch, n_i=len(idx_i), n_j=len(idx_j))
        history.append(row)
        log.info("style transfer %s<->%s epoch %d cycle %.4f", *domains, epoch, row["cycle"])
    settings = {k: config[k] for k in ("crop", "blocks", "epochs", "lr", "cycle_weight", "base_channels")}
    settings["images_per_domain"] = per_epoch
    return StyleTransferModel(tuple(domains), g_ij, g_ji, settings, history)


class LearnedTransfer:
    """``transfer_fn`` backed by one learned model per domain pair."""

    def __init__(self, models: Sequence[StyleTransferModel]):
        self.models = {}
        for m in models:
            self.models[m.domains] = m
            self.models[m.domains[::-1]] = m

    def __call__(self, image, src, dst, rng=None) -> np.ndarray:
        if src == dst:
            return np.asarray(image, dtype=np.float32)
        if (src, dst) not in self.models:
            raise KeyError(f"no learned model for {src}->{dst}")
        return self.models[(src, dst)].map(image, src, dst)
