"""Residual encoder trunk with two bottleneck feature heads."""

from __future__ import annotations

from dataclasses import dataclass

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig


@dataclass
class EncoderOutput:
    style: torch.Tensor          # F_s, (N, C, H/s, W/s)
    conventional: torch.Tensor   # F_c, (N, C, H/s, W/s)
    bottleneck: torch.Tensor     # trunk output fed to the decoder
    skips: list[torch.Tensor]    # full, 1/2, 1/4 ... ordered fine -> coarse


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


def conv1x1(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 1, stride=stride)


NORM_KINDS = ("group", "none")


def norm_layer(channels: int, kind: str) -> nn.Module:
    """GroupNorm with up to 8 groups; per-sample, so no batch statistics or buffers."""
    if kind == "none":
        return nn.Identity()
    if kind == "group":
        return nn.GroupNorm(math.gcd(8, channels), channels)
    raise ValueError(f"unknown norm {kind!r}; expected one of {NORM_KINDS}")


class ResBlock(nn.Module):
    """Basic residual block; a 1x1 projection shortcut when shape changes."""

    def __init__(self, cin: int, cout: int, stride: int = 1, norm: str = "none"):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.norm1 = norm_layer(cout, norm)
        self.conv2 = conv3x3(cout, cout)
        self.norm2 = norm_layer(cout, norm)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(conv1x1(cin, cout, stride), norm_layer(cout, norm))

    def forward(self, x):
        out = self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x)))))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


def res_stage(cin: int, cout: int, blocks: int, stride: int, norm: str = "none") -> nn.Sequential:
    layers = [ResBlock(cin, cout, stride, norm)]
    layers += [ResBlock(cout, cout, 1, norm) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class FeatureHead(nn.Sequential):
    """3x3 conv, ReLU, 1x1 conv."""

    def __init__(self, cin: int, hidden: int, cout: int):
        super().__init__(conv3x3(cin, hidden), nn.ReLU(), conv1x1(hidden, cout))


class Encoder(nn.Module):
    """3x3 stem (no pooling), optional full-resolution residual stage, then one
    stride-2 residual stage per entry of ``encoder_channels``.

    Skips are the activations entering each stride-2 stage.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.downscale = config.downscale_factor
        c0 = config.stem_channels
        self.stem = nn.Sequential(conv3x3(3, c0), norm_layer(c0, config.norm))
        self.stem_stage = res_stage(c0, c0, config.stem_blocks, 1, config.norm) if config.stem_blocks else None
        stages = []
        cin = c0
        for cout, n in zip(config.encoder_channels, config.encoder_blocks):
            stages.append(res_stage(cin, cout, n, 2, config.norm))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.bottleneck_channels = cin
        self.skip_channels = [c0] + list(config.encoder_channels[:-1])
        self.style_head = FeatureHead(cin, config.head_width, config.feature_dim)
        self.conv_head = FeatureHead(cin, config.head_width, config.feature_dim)

    def forward(self, image: torch.Tensor) -> EncoderOutput:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected an (N, 3, H, W) image batch, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % self.downscale or w % self.downscale:
            raise ValueError(
                f"image size {h}x{w} is not divisible by downscale factor {self.downscale}"
            )
        x = F.relu(self.stem(image))
        if self.stem_stage is not None:
            x = self.stem_stage(x)
        skips = []
        for stage in self.stages:
            skips.append(x)
            x = stage(x)
        return EncoderOutput(self.style_head(x), self.conv_head(x), x, skips)


def init_parameters(module: nn.Module, rng: np.random.Generator) -> None:
    """Kaiming fan-in normal init for conv kernels, zero biases, unit norm scales.

    Draws come from ``rng`` in sorted parameter-name order, so a seed fixes the
    initial weights independently of torch's own RNG.
    """
    named = dict(module.named_parameters())
    with torch.no_grad():
        for name in sorted(named):
            p = named[name]
            if p.dim() >= 2:
                fan_in = int(np.prod(p.shape[1:]))
                w = rng.standard_normal(tuple(p.shape)) * np.sqrt(2.0 / fan_in)
                p.copy_(torch.from_numpy(w.astype(np.float32)))
            else:
                p.zero_()
        for m in module.modules():
            if isinstance(m, nn.GroupNorm):
                m.weight.fill_(1.0)


def build_encoder(config: ModelConfig, rng: np.random.Generator) -> Encoder:
    enc = Encoder(config)
    init_parameters(enc, rng)
    return enc
