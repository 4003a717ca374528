"""Pixel-level AP / F1 / IoU and model complexity reporting."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p.ravel(), g.ravel() > 0.5


def _counts(pred, gt, tau):
    p, g = _pair(pred, gt)
    hit = p >= tau
    tp = int(np.count_nonzero(hit & g))
    fp = int(np.count_nonzero(hit & ~g))
    fn = int(np.count_nonzero(~hit & g))
    return tp, fp, fn


def f1_at(pred, gt, tau: float = 0.5) -> float:
    tp, fp, fn = _counts(pred, gt, tau)
    if tp == 0:
        # precision and recall are both zero or undefined
        return 1.0 if fp == 0 and fn == 0 else 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def iou_at(pred, gt, tau: float = 0.5) -> float:
    tp, fp, fn = _counts(pred, gt, tau)
    union = tp + fp + fn
    return 1.0 if union == 0 else tp / union


def _ap_from_scores(scores: np.ndarray, labels: np.ndarray) -> float:
    n_pos = int(labels.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of every block of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    block_pos = np.diff(np.r_[0, tp])
    precision = tp / (tp + fp)
    return float(np.sum(block_pos * precision) / n_pos)


def average_precision(pred, gt) -> float:
    """Exact area under the pixel PR curve; tied scores form a single step.

    Returns NaN when ``gt`` has no positive pixel.
    """
    p, g = _pair(pred, gt)
    return _ap_from_scores(p, g)


def pooled_average_precision(preds: Iterable, gts: Iterable) -> float:
    ps, gs = zip(*(_pair(p, g) for p, g in zip(preds, gts)))
    return _ap_from_scores(np.concatenate(ps), np.concatenate(gs))


@dataclass
class EvalReport:
    ap_percent: float
    f1: float
    iou_percent: float
    per_image: list[tuple[str, float, float, float]]
    n_images: int
    n_ap_skipped: int = 0
    ap_mode: str = "per_image"

    def as_row(self) -> dict[str, float]:
        return {"AP(%)": self.ap_percent, "F1": self.f1, "IoU(%)": self.iou_percent}

    def table(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"{'AP(%)↑':>9} {'F1↑':>8} {'IoU(%)↑':>9}   n")
        lines.append(f"{self.ap_percent:9.2f} {self.f1:8.4f} {self.iou_percent:9.2f}   {self.n_images}")
        if self.n_ap_skipped:
            lines.append(f"({self.n_ap_skipped} image(s) with empty ground truth excluded from AP)")
        return "\n".join(lines)

    def write_records(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for ident, ap, f1, iou in self.per_image:
                fh.write(json.dumps({"id": ident, "ap": ap, "f1": f1, "iou": iou}) + "\n")


def _score_one(item):
    ident, pred, gt, tau = item
    return ident, average_precision(pred, gt), f1_at(pred, gt, tau), iou_at(pred, gt, tau)


def evaluate_dataset(preds: dict[str, np.ndarray], gts: dict[str, np.ndarray],
                     tau: float = 0.5, ap_mode: str = "per_image") -> EvalReport:
    """Score predictions against ground truths keyed by image id.

    Empty-gt images are skipped for AP (undefined) but kept for F1/IoU.
    ``ap_mode="pooled"`` ranks all pixels of the dataset jointly instead.
    """
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise KeyError(f"no prediction for image {missing[0]!r}")
    extra = sorted(set(preds) - set(gts))
    if extra:
        raise KeyError(f"no ground truth for image {extra[0]!r}")
    ids = sorted(gts)
    per_image = [_score_one((i, preds[i], gts[i], tau)) for i in ids]
    aps = np.array([r[1] for r in per_image])
    valid = ~np.isnan(aps)
    skipped = int((~valid).sum())
    if skipped:
        log.warning("%d image(s) have an empty ground-truth mask; excluded from AP", skipped)
    if ap_mode == "per_image":
        ap = float(aps[valid].mean()) if valid.any() else float("nan")
    elif ap_mode == "pooled":
        ap = pooled_average_precision([preds[i] for i in ids], [gts[i] for i in ids])
    else:
        raise ValueError(f"unknown ap_mode {ap_mode!r}")
    f1 = float(np.mean([r[2] for r in per_image])) if ids else float("nan")
    iou = float(np.mean([r[3] for r in per_image])) if ids else float("nan")
    return EvalReport(100 * ap, f1, 100 * iou, per_image, len(ids), skipped, ap_mode)


def three_mask_table(reports: dict[str, EvalReport]) -> str:
    names = list(reports)
    head = " | ".join(f"{n:^26}" for n in names)
    sub = " | ".join(f"{'AP(%)↑':>8} {'F1↑':>7} {'IoU(%)↑':>8}" for _ in names)
    vals = " | ".join(
        f"{r.ap_percent:8.2f} {r.f1:7.4f} {r.iou_percent:8.2f}" for r in reports.values()
    )
    return "\n".join([head, sub, vals])


# ---------------------------------------------------------------------------
# complexity


@dataclass
class ComplexityReport:
    parameter_count: int
    per_module_parameters: dict[str, int]
    flop_estimate: int
    per_module_flops: dict[str, int]
    inference_time_ms: float
    extra: dict[str, float] = field(default_factory=dict)

    def table(self) -> str:
        rsr = self.per_module_parameters.get("rsr", 0)
        lines = [
            f"{'':24}| {'RSR module':>12} | {'whole model':>12}",
            f"{'Number of parameters':24}| {rsr / 1e6:11.3f}M | {self.parameter_count / 1e6:11.3f}M",
            f"{'Inference time':24}| {'-':>12} | {self.inference_time_ms:10.2f}ms",
            f"{'GFlops':24}| {self.per_module_flops.get('rsr', 0) / 1e9:12.4f} | "
            f"{self.flop_estimate / 1e9:12.4f}",
        ]
        return "\n".join(lines)


def count_parameters(model: nn.Module) -> tuple[int, dict[str, int]]:
    per: dict[str, int] = {}
    for name, t in model.state_dict().items():
        per[name.split(".", 1)[0]] = per.get(name.split(".", 1)[0], 0) + t.numel()
    return sum(per.values()), per


def conv_flops(module: nn.Conv2d, out_shape) -> int:
    """2 * multiply-accumulates of one conv call (bias and elementwise ops ignored)."""
    n, cout, h, w = out_shape
    kh, kw = module.kernel_size
    cin = module.in_channels // module.groups
    return 2 * n * cout * h * w * cin * kh * kw


def estimate_flops(model: nn.Module, run) -> tuple[int, dict[str, int]]:
    """Analytic conv FLOPs of one ``run()`` call, grouped by top-level module."""
    per: dict[str, int] = {}
    handles = []
    for name, mod in model.named_modules():
        if isinstance(mod, nn.Conv2d):
            top = name.split(".", 1)[0]

            def hook(m, inp, out, top=top):
                per[top] = per.get(top, 0) + conv_flops(m, out.shape)

            handles.append(mod.register_forward_hook(hook))
    try:
        with torch.no_grad():
            run()
    finally:
        for h in handles:
            h.remove()
    return sum(per.values()), per


def complexity_report(model: nn.Module, input_size: int, n_timing_runs: int = 5,
                      warmup: int = 1) -> ComplexityReport:
    model.eval()
    x = torch.zeros(1, 3, input_size, input_size)
    total, per = count_parameters(model)
    flops, per_flops = estimate_flops(model, lambda: model(x))
    times = []
    with torch.no_grad():
        for i in range(warmup + n_timing_runs):
            t0 = time.perf_counter()
            model(x)
            if i >= warmup:
                times.append(1000 * (time.perf_counter() - t0))
    mean_ms = float(np.mean(times)) if times else float("nan")
    return ComplexityReport(total, per, flops, per_flops, mean_ms)
