"""Recurrent self-reasoning: background-centroid similarity + conv GRU refinement.

Each iteration re-estimates the background style centroid from the current
mask, scores every bottleneck pixel against it at several neighbourhood
scales, and lets a convolutional GRU predict a residual update of the mask
logits. Every coarse mask is lifted to full resolution by learned convex
upsampling so it can be supervised directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ModelConfig
from .encoder import conv1x1, conv3x3

log = logging.getLogger(__name__)

INIT_LOGIT = -6.0


def _as_nchw_mask(mask: torch.Tensor) -> torch.Tensor:
    if mask.dim() == 3:
        mask = mask.unsqueeze(1)
    if mask.dim() != 4 or mask.shape[1] != 1:
        raise ValueError(f"mask must be (N, 1, H, W) or (N, H, W), got {tuple(mask.shape)}")
    return mask


def background_style_feature(style: torch.Tensor, mask: torch.Tensor, eps: float = 0.5) -> torch.Tensor:
    """Mean style vector over pixels with mask < eps, shape (N, C).

    The selection is a hard threshold and carries no gradient. A sample with
    no background pixel falls back to its global mean.
    """
    mask = _as_nchw_mask(mask)
    if style.dim() != 4 or style.shape[0] != mask.shape[0] or style.shape[-2:] != mask.shape[-2:]:
        raise ValueError(
            f"style {tuple(style.shape)} and mask {tuple(mask.shape)} are not spatially aligned"
        )
    sel = (mask.detach() < eps).to(style.dtype)
    count = sel.sum(dim=(1, 2, 3))
    summed = (style * sel).sum(dim=(2, 3))
    global_mean = style.mean(dim=(2, 3))
    safe = count.clamp(min=1.0).unsqueeze(1)
    return torch.where((count > 0).unsqueeze(1), summed / safe, global_mean)


def neighborhood_sum(style: torch.Tensor, l: int) -> torch.Tensor:
    """Channelwise sum over the (2l+1)x(2l+1) window; outside pixels count as zero."""
    if l < 0:
        raise ValueError("scale l must be >= 0")
    if l == 0:
        return style
    c = style.shape[1]
    k = 2 * l + 1
    kernel = style.new_ones(c, 1, k, k)
    return F.conv2d(style, kernel, padding=l, groups=c)


def multiscale_similarity(style: torch.Tensor, f_bg: torch.Tensor, scales: list[int]) -> torch.Tensor:
    """Cosine similarity between ``f_bg`` (N, C) and each pixel's neighbourhood
    aggregate, one output channel per scale: (N, len(scales), H, W).

    Zero-norm aggregates score 0; a zero-norm centroid yields all zeros.
    """
    if f_bg.shape != style.shape[:2]:
        raise ValueError(f"f_bg {tuple(f_bg.shape)} does not match style channels {tuple(style.shape[:2])}")
    bg_norm = f_bg.norm(dim=1)
    if (bg_norm == 0).any():
        log.warning("zero-norm background style feature; similarity set to 0")
    bg = f_bg[:, :, None, None]
    out = []
    for l in scales:
        agg = neighborhood_sum(style, l)
        dot = (agg * bg).sum(dim=1)
        denom = agg.norm(dim=1) * bg_norm[:, None, None]
        ok = denom > 0
        sim = torch.where(ok, dot / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(dot))
        out.append(sim.clamp(-1.0, 1.0))
    return torch.stack(out, dim=1)


def check_upsample_weights(weights: torch.Tensor, s: int, atol: float = 1e-4) -> None:
    n, ch, h, w = weights.shape
    if ch != 9 * s * s:
        raise ValueError(f"upsample weights need {9 * s * s} channels, got {ch}")
    wv = weights.view(n, 9, s * s, h, w)
    if not torch.isfinite(wv).all():
        raise FloatingPointError("upsample weights contain NaN or inf")
    if (wv < 0).any() or not torch.allclose(wv.sum(dim=1), torch.ones_like(wv[:, 0]), atol=atol):
        raise ValueError("upsample weights must be non-negative and sum to 1 over the 9 neighbours")


def convex_upsample(mask: torch.Tensor, weights: torch.Tensor, s: int, check: bool = True) -> torch.Tensor:
    """Lift an (N, 1, h, w) mask to (N, 1, s*h, s*w).

    ``weights`` is (N, 9*s*s, h, w); channel ``k*s*s + dy*s + dx`` weighs the
    k-th 3x3 neighbour (row-major) for sub-pixel (dy, dx). Borders replicate the
    edge value so every output is a convex combination of real mask values.
    """
    mask = _as_nchw_mask(mask)
    n, _, h, w = mask.shape
    if check:
        check_upsample_weights(weights, s)
    wv = weights.view(n, 1, 9, s, s, h, w)
    padded = F.pad(mask, (1, 1, 1, 1), mode="replicate")
    nb = F.unfold(padded, 3).view(n, 1, 9, 1, 1, h, w)
    up = (wv * nb).sum(dim=2)                     # (n, 1, s, s, h, w)
    up = up.permute(0, 1, 4, 2, 5, 3)             # (n, 1, h, s, w, s)
    return up.reshape(n, 1, s * h, s * w)


def bilinear_upsample(mask: torch.Tensor, s: int) -> torch.Tensor:
    return F.interpolate(_as_nchw_mask(mask), scale_factor=s, mode="bilinear", align_corners=False)


class ConvGRU(nn.Module):
    def __init__(self, hidden: int, inp: int):
        super().__init__()
        self.convz = conv3x3(hidden + inp, hidden)
        self.convr = conv3x3(hidden + inp, hidden)
        self.convq = conv3x3(hidden + inp, hidden)

    def forward(self, h: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        hx = torch.cat([h, x], dim=1)
        z = torch.sigmoid(self.convz(hx))
        r = torch.sigmoid(self.convr(hx))
        q = torch.tanh(self.convq(torch.cat([r * h, x], dim=1)))
        return (1 - z) * h + z * q


def gru_step(gru: ConvGRU, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    if x.shape[0] != h.shape[0] or x.shape[-2:] != h.shape[-2:]:
        raise ValueError("GRU input and hidden state are not spatially aligned")
    return gru(h, x)


@dataclass
class RSRState:
    mask_logits: torch.Tensor
    hidden: torch.Tensor | None
    iteration: int = 0
    upsampled_history: list[torch.Tensor] = field(default_factory=list)
    similarity_history: list[torch.Tensor] = field(default_factory=list)

    @property
    def mask(self) -> torch.Tensor:
        return torch.sigmoid(self.mask_logits)


@dataclass
class RSROutput:
    m_rsr: torch.Tensor          # coarse final mask
    m_rsr_up: torch.Tensor       # its full-resolution version
    history: list[torch.Tensor]  # full-resolution mask of every iteration
    similarity: list[torch.Tensor]
    state: RSRState


class RSRModule(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.scale = config.downscale_factor
        self.scales = list(config.scales)
        self.eps = config.mask_threshold
        c = config.feature_dim
        hid = config.gru_hidden_dim
        self.similarity_only = config.similarity_only
        if self.similarity_only:
            if 0 not in self.scales:
                raise ValueError("similarity_only needs scale 0 among the configured scales")
            return
        self.use_msm = not config.no_msm
        if self.use_msm:
            self.sim_conv = conv3x3(len(self.scales), config.sim_branch_channels)
        self.mask_conv = conv3x3(1, config.mask_branch_channels)
        self.input_channels = (
            (config.sim_branch_channels if self.use_msm else 0) + config.mask_branch_channels + c + 1
        )
        self.init_hidden = conv3x3(c, hid)
        if config.no_gru:
            self.plain = nn.Sequential(
                conv3x3(self.input_channels, hid), nn.ReLU(), conv3x3(hid, hid), nn.Tanh()
            )
        else:
            self.gru = ConvGRU(hid, self.input_channels)
        self.delta_head = nn.Sequential(conv3x3(hid, hid), nn.ReLU(), conv1x1(hid, 1))
        self.learned_upsample = not config.bilinear_upsample
        if self.learned_upsample:
            s = self.scale
            self.upsample_head = nn.Sequential(
                conv3x3(hid, config.upsample_hidden_dim), nn.ReLU(),
                conv3x3(config.upsample_hidden_dim, 9 * s * s),
            )

    # -- pieces -------------------------------------------------------------

    def build_gru_input(self, sim: torch.Tensor, context: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if sim.shape[-2:] != context.shape[-2:] or mask.shape[-2:] != context.shape[-2:]:
            raise ValueError("similarity map, features and mask are not spatially aligned")
        parts = [self.sim_conv(sim)] if self.use_msm else []
        parts += [self.mask_conv(mask), context, mask]
        return torch.cat(parts, dim=1)

    def upsample_weights(self, hidden: torch.Tensor) -> torch.Tensor:
        n, _, h, w = hidden.shape
        logits = 0.25 * self.upsample_head(hidden)
        return torch.softmax(logits.view(n, 9, -1, h, w), dim=1).view(n, -1, h, w)

    def upsample(self, mask: torch.Tensor, hidden: torch.Tensor | None) -> torch.Tensor:
        if self.similarity_only or not self.learned_upsample:
            return bilinear_upsample(mask, self.scale)
        return convex_upsample(mask, self.upsample_weights(hidden), self.scale)

    # -- loop ---------------------------------------------------------------

    def initial_state(self, style: torch.Tensor, context: torch.Tensor) -> RSRState:
        n, _, h, w = style.shape
        logits = style.new_full((n, 1, h, w), INIT_LOGIT)
        hidden = None if self.similarity_only else torch.tanh(self.init_hidden(context))
        return RSRState(logits, hidden)

    def step(self, state: RSRState, style: torch.Tensor, context: torch.Tensor) -> RSRState:
        if state.iteration >= self.config.num_iterations:
            raise ValueError("RSR state already ran the configured number of iterations")
        mask = state.mask
        f_bg = background_style_feature(style, mask, self.eps)
        sim = multiscale_similarity(style, f_bg, self.scales)
        if self.similarity_only:
            s0 = sim[:, self.scales.index(0):self.scales.index(0) + 1]
            new_mask = (1.0 - s0) / 2.0
            logits = torch.logit(new_mask.clamp(1e-6, 1 - 1e-6))
            hidden = None
        else:
            x = self.build_gru_input(sim, context, mask)
            if self.config.no_gru:
                hidden = self.plain(x)
            else:
                hidden = gru_step(self.gru, x, state.hidden)
            logits = state.mask_logits + self.delta_head(hidden)
            new_mask = torch.sigmoid(logits)
        up = self.upsample(new_mask, hidden)
        return RSRState(
            logits,
            hidden,
            state.iteration + 1,
            state.upsampled_history + [up],
            state.similarity_history + [sim],
        )

    def forward(self, style: torch.Tensor, conventional: torch.Tensor) -> RSROutput:
        context = style if self.config.no_fc else conventional
        state = self.initial_state(style, context)
        for _ in range(self.config.num_iterations):
            state = self.step(state, style, context)
        return RSROutput(
            state.mask, state.upsampled_history[-1], state.upsampled_history,
            state.similarity_history, state,
        )


def rsr_iteration(state: RSRState, style, conventional, module: RSRModule) -> RSRState:
    context = style if module.config.no_fc else conventional
    return module.step(state, style, context)


def run_rsr(style, conventional, module: RSRModule) -> RSROutput:
    return module(style, conventional)
