"""UNet decoder guided by the RSR mask, and the adaptive two-mask fusion."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig
from .encoder import conv1x1, conv3x3, norm_layer


@dataclass
class FusionOutput:
    m_dec: torch.Tensor
    g: torch.Tensor
    m_fnl: torch.Tensor


class DecoderBlock(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int, norm: str = "none"):
        super().__init__()
        self.conv1 = conv3x3(cin + cskip, cout)
        self.norm1 = norm_layer(cout, norm)
        self.conv2 = conv3x3(cout, cout)
        self.norm2 = norm_layer(cout, norm)

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = torch.cat([x, skip], dim=1)
        return F.relu(self.norm2(self.conv2(F.relu(self.norm1(self.conv1(x))))))


class Decoder(nn.Module):
    """The coarse RSR mask is concatenated to the bottleneck before the first block."""

    def __init__(self, config: ModelConfig, bottleneck_channels: int, skip_channels: list[int]):
        super().__init__()
        blocks = []
        cin = bottleneck_channels + 1
        for cskip in reversed(skip_channels):
            blocks.append(DecoderBlock(cin, cskip, cskip, config.norm))
            cin = cskip
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = cin
        self.head = conv1x1(cin, 1)

    def forward(self, bottleneck, m_rsr, skips):
        if m_rsr.shape[-2:] != bottleneck.shape[-2:]:
            raise ValueError(
                f"guidance mask {tuple(m_rsr.shape[-2:])} does not match bottleneck "
                f"{tuple(bottleneck.shape[-2:])}"
            )
        if len(skips) != len(self.blocks):
            raise ValueError(f"decoder expects {len(self.blocks)} skips, got {len(skips)}")
        x = torch.cat([bottleneck, m_rsr], dim=1)
        for block, skip in zip(self.blocks, reversed(skips)):
            if skip.shape[-2] != 2 * x.shape[-2] or skip.shape[-1] != 2 * x.shape[-1]:
                raise ValueError(f"skip {tuple(skip.shape)} does not sit one level above {tuple(x.shape)}")
            x = block(x, skip)
        return torch.sigmoid(self.head(x)), x


def decode(decoder: Decoder, bottleneck, m_rsr, skips):
    return decoder(bottleneck, m_rsr, skips)


class Fusion(nn.Module):
    def __init__(self, feat_channels: int, hidden: int = 16):
        super().__init__()
        self.conv1 = conv3x3(feat_channels + 2, hidden)
        self.conv2 = conv1x1(hidden, 1)

    def gate(self, m_dec, m_rsr_up, last_feat):
        x = torch.cat([m_dec, m_rsr_up, last_feat], dim=1)
        return torch.sigmoid(self.conv2(F.relu(self.conv1(x))))


def combine(g: torch.Tensor, m_dec: torch.Tensor, m_rsr_up: torch.Tensor) -> torch.Tensor:
    out = g * m_dec + (1 - g) * m_rsr_up
    # rounding can leave the blend an ulp outside its endpoints
    return torch.clamp(out, torch.minimum(m_dec, m_rsr_up), torch.maximum(m_dec, m_rsr_up))


def fuse(fusion: Fusion, m_dec, m_rsr_up, last_feat, config: ModelConfig) -> FusionOutput:
    if m_dec.shape != m_rsr_up.shape:
        raise ValueError(f"m_dec {tuple(m_dec.shape)} and upsampled RSR mask {tuple(m_rsr_up.shape)} differ")
    if config.simple_average:
        g = torch.full_like(m_dec, 0.5)
    else:
        g = fusion.gate(m_dec, m_rsr_up, last_feat)
    return FusionOutput(m_dec, g, combine(g, m_dec, m_rsr_up))
