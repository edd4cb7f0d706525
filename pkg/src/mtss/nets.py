"""Backbone presets: image batch -> pooled feature vector."""

from __future__ import annotations

import torch
from torch import nn

# (channels per stride-2 block)
_PRESETS = {
    "small": (32, 48, 64, 96),
    "medium": (48, 96, 128, 192),
    "wide": (32, 64, 128, 256),
}


def _block(c_in: int, c_out: int, extra_conv: bool) -> nn.Sequential:
    layers = [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.GroupNorm(8, c_out), nn.ReLU(inplace=True)]
    if extra_conv:
        layers += [nn.Conv2d(c_out, c_out, 3, padding=1), nn.GroupNorm(8, c_out), nn.ReLU(inplace=True)]
    return nn.Sequential(*layers)


class ConvBackbone(nn.Module):
    """Stride-2 conv blocks with GroupNorm, then global average pooling.

    GroupNorm keeps every output a function of its own image, so results do
    not depend on batch composition and train/eval behave the same.
    """

    def __init__(self, channels=(32, 48, 64, 96), extra_conv: bool = False):
        super().__init__()
        blocks, c = [], 3
        for c_out in channels:
            blocks.append(_block(c, c_out, extra_conv))
            c = c_out
        self.features = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.out_dim = c

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x - 0.5)).flatten(1)


class ResNet50Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None, norm_layer=lambda c: nn.GroupNorm(32, c))
        net.fc = nn.Identity()
        self.net = net
        self.out_dim = 2048

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x - 0.5)


def build_backbone(preset: str) -> nn.Module:
    if preset == "resnet50":
        return ResNet50Backbone()
    if preset not in _PRESETS:
        raise ValueError(f"unknown backbone preset {preset!r}")
    return ConvBackbone(_PRESETS[preset], extra_conv=preset == "medium")
