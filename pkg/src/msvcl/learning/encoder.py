"""Backbones and the projection head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class EncoderConfig:
    depth: str = "tiny"
    width: int = 16
    proj_dim: int = 128

    @classmethod
    def from_learning(cls, cfg: dict) -> "EncoderConfig":
        return cls(depth=cfg["encoder"], width=int(cfg["width"]), proj_dim=int(cfg["proj_dim"]))

    def to_dict(self) -> dict:
        return asdict(self)


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.short = None
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.short is None else self.short(x)))


class TinyEncoder(nn.Module):
    """Four-stage residual CNN for single-channel images.

    ``features(x)`` returns the stride-8 map used by the detection head;
    ``forward(x)`` returns the globally pooled ``8 * width`` vector.
    """

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.stem = nn.Sequential(nn.Conv2d(1, w, 3, 2, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True))
        self.layer1 = BasicBlock(w, 2 * w, 2)
        self.layer2 = BasicBlock(2 * w, 4 * w, 2)
        self.layer3 = BasicBlock(4 * w, 8 * w, 2)
        self.feature_dim = 8 * w
        self.map_channels = 4 * w
        self.map_stride = 8

    def features(self, x):
        return self.layer2(self.layer1(self.stem(x)))

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.layer3(self.features(x)), 1).flatten(1)


class ResNet50Encoder(nn.Module):
    """torchvision ResNet-50 trunk with a single-channel stem."""

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        net.conv1 = nn.Conv2d(1, 64, 7, 2, 3, bias=False)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4
        self.feature_dim = 2048
        self.map_channels = 512
        self.map_stride = 8

    def features(self, x):
        return self.layer2(self.layer1(self.stem(x)))

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.layer4(self.layer3(self.features(x))), 1).flatten(1)


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.depth == "tiny":
        return TinyEncoder(cfg.width)
    if cfg.depth in ("full", "resnet50"):
        return ResNet50Encoder()
    raise ValueError(f"unknown encoder depth {cfg.depth!r}")


class ProjectionHead(nn.Module):
    """Two affine layers with a ReLU between; output is L2-normalized."""

    def __init__(self, in_dim: int, out_dim: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, in_dim)
        self.fc2 = nn.Linear(in_dim, out_dim)

    def forward(self, h):
        return F.normalize(self.fc2(F.relu(self.fc1(h))), dim=1)


class ContrastiveModel(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = build_encoder(cfg)
        self.head = ProjectionHead(self.encoder.feature_dim, cfg.proj_dim)

    def forward(self, x):
        return self.head(self.encoder(x))
