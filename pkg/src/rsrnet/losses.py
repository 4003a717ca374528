"""Hybrid BCE + SSIM + IoU mask loss with exponentially weighted deep supervision."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

CLAMP = 1e-6
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(pred: torch.Tensor, gt: torch.Tensor) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape")


def _to_nchw(x: torch.Tensor) -> torch.Tensor:
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return x


def _per_mask_bce(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    # p, g: (M, N, 1, H, W) -> (M,)
    p = p.clamp(CLAMP, 1 - CLAMP)
    return -(g * torch.log(p) + (1 - g) * torch.log(1 - p)).mean(dim=(1, 2, 3, 4))


def _per_mask_iou(p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    inter = (p * g).sum(dim=(2, 3, 4))
    union = p.sum(dim=(2, 3, 4)) + g.sum(dim=(2, 3, 4)) - inter
    return (1 - inter / (union + CLAMP)).mean(dim=1)


def bce_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_pair(pred, gt)
    return _per_mask_bce(_to_nchw(pred)[None], _to_nchw(gt)[None])[0]


def iou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Soft IoU per sample (product intersection), averaged over the batch."""
    _check_pair(pred, gt)
    return _per_mask_iou(_to_nchw(pred)[None], _to_nchw(gt)[None])[0]


def gaussian_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - size // 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float32) -> torch.Tensor:
    g = gaussian_1d(size, sigma)
    return torch.outer(g, g).to(dtype)


def blur_matrix(n: int, size: int, sigma: float, padding: str, dtype) -> torch.Tensor:
    """Banded matrix A with A @ x equal to 1-D Gaussian filtering of x.

    "same" rows are centred on every pixel (zero padding outside); "valid" rows
    cover only windows lying inside the signal.
    """
    g = gaussian_1d(size, sigma)
    half = size // 2
    if padding == "same":
        rows, offset = n, -half
    else:
        rows, offset = n - size + 1, 0
    a = torch.zeros(rows, n, dtype=torch.float64)
    for i in range(rows):
        for t in range(size):
            j = i + offset + t
            if 0 <= j < n:
                a[i, j] = g[t]
    return a.to(dtype)


def _ssim_maps(x: torch.Tensor, y: torch.Tensor, window: int, sigma: float, padding: str) -> torch.Tensor:
    h, w = x.shape[-2:]
    if padding == "valid":
        if min(h, w) < window:
            raise ValueError(f"image {h}x{w} is smaller than the {window}x{window} SSIM window")
    elif padding == "same":
        if min(h, w) < window // 2 + 1:
            raise ValueError(f"image {h}x{w} is smaller than half the {window}x{window} SSIM window")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    a = blur_matrix(h, window, sigma, padding, x.dtype)
    b = blur_matrix(w, window, sigma, padding, x.dtype)

    def blur(t):
        return a @ t @ b.T

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x ** 2
    syy = blur(y * y) - mu_y ** 2
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim_map(pred: torch.Tensor, gt: torch.Tensor, window: int = SSIM_WINDOW,
             sigma: float = SSIM_SIGMA, padding: str = "same") -> torch.Tensor:
    """Local SSIM under a separable Gaussian window.

    ``padding="same"`` zero-pads by half a window (one value per pixel);
    ``"valid"`` only scores windows lying fully inside the image.
    """
    _check_pair(pred, gt)
    return _ssim_maps(_to_nchw(pred), _to_nchw(gt), window, sigma, padding)


def _per_mask_ssim(p: torch.Tensor, g: torch.Tensor, padding: str = "same") -> torch.Tensor:
    return 1 - _ssim_maps(p, g.expand_as(p), SSIM_WINDOW, SSIM_SIGMA, padding).mean(dim=(1, 2, 3, 4))


def ssim_loss(pred: torch.Tensor, gt: torch.Tensor, padding: str = "same") -> torch.Tensor:
    _check_pair(pred, gt)
    return _per_mask_ssim(_to_nchw(pred)[None], _to_nchw(gt)[None], padding)[0]


@dataclass
class LossTerms:
    bce: torch.Tensor
    ssim: torch.Tensor
    iou: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.bce + self.ssim + self.iou


@dataclass
class LossBreakdown:
    per_mask: list[tuple[int, float, float, float, float]]  # (k, bce, ssim, iou, weight)
    final_mask_loss: float
    final_terms: tuple[float, float, float]
    total: float
    tensor: torch.Tensor | None = field(default=None, repr=False)

    def term_means(self) -> dict[str, float]:
        """Per-term means over all supervised masks (history and final)."""
        rows = [r[1:4] for r in self.per_mask] + [self.final_terms]
        n = len(rows)
        return {
            "bce": sum(r[0] for r in rows) / n,
            "ssim": sum(r[1] for r in rows) / n,
            "iou": sum(r[2] for r in rows) / n,
        }

    def log_row(self, step: int, lr: float) -> dict:
        return {"step": step, "lr": lr, "total": self.total, **self.term_means()}


def mask_loss(pred, gt, bce_on=True, ssim_on=True, iou_on=True) -> LossTerms:
    bce, ssim, iou = _stacked_terms([pred], gt, bce_on, ssim_on, iou_on)
    return LossTerms(bce[0], ssim[0], iou[0])


def _stacked_terms(masks, gt, bce_on, ssim_on, iou_on):
    for m in masks:
        _check_pair(m, gt)
    p = torch.stack([_to_nchw(m) for m in masks])
    g = _to_nchw(gt)[None].expand_as(p)
    zero = p.new_zeros(len(masks))
    return (
        _per_mask_bce(p, g) if bce_on else zero,
        _per_mask_ssim(p, g) if ssim_on else zero,
        _per_mask_iou(p, g) if iou_on else zero,
    )


def total_loss(history: list[torch.Tensor], m_fnl: torch.Tensor, gt: torch.Tensor,
               lam: float = 0.8, bce_on: bool = True, ssim_on: bool = True,
               iou_on: bool = True, allow_empty: bool = False,
               extra: list[torch.Tensor] | None = None) -> LossBreakdown:
    """Final-mask loss plus sum_k lam**(K-k) * loss(history[k-1]).

    ``allow_empty`` admits a decoder-only model with no recurrent history;
    ``extra`` masks are added with unit weight.
    """
    if not history and not allow_empty:
        raise ValueError("total_loss needs a non-empty mask history")
    if not bce_on:
        warnings.warn("BCE term disabled; training is known to diverge without it", stacklevel=2)
    extra = list(extra or [])
    K = len(history)
    masks = list(history) + [m_fnl] + extra
    bce, ssim, iou = _stacked_terms(masks, gt, bce_on, ssim_on, iou_on)
    per = bce + ssim + iou
    weights = per.new_tensor(weight_schedule(K, lam) + [1.0] * (1 + len(extra)))
    total = (weights * per).sum()
    vals = torch.stack([bce, ssim, iou], dim=1).detach().tolist()
    per_mask = [(k, *vals[k - 1], lam ** (K - k)) for k in range(1, K + 1)]
    return LossBreakdown(
        per_mask,
        float(per[K].detach()),
        tuple(vals[K]),
        float(total.detach()),
        total,
    )


def weight_schedule(K: int, lam: float) -> list[float]:
    return [lam ** (K - k) for k in range(1, K + 1)]
