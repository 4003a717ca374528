"""Model assembly, ablation rows, training loop and evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core import Checkpoint, ModelConfig, load_checkpoint, save_checkpoint, seeded_rng, set_deterministic
from .data import SamplePair, load_dataset
from .decoder import Decoder, Fusion, fuse
from .encoder import Encoder, init_parameters
from .losses import LossBreakdown, total_loss
from .metrics import EvalReport, evaluate_dataset
from .rsr import RSRModule

log = logging.getLogger(__name__)

# Ablation rows: UNet only; + RSR (decoder mask); similarity-only RSR; simple
# average; w/o GRU; w/o MSM; w/o F_c; bilinear upsample; full model.
ROWS: dict[int, dict[str, bool]] = {
    1: {"no_rsr": True},
    2: {"no_fusion": True},
    3: {"similarity_only": True, "no_fusion": True},
    4: {"simple_average": True},
    5: {"no_gru": True},
    6: {"no_msm": True},
    7: {"no_fc": True},
    8: {"bilinear_upsample": True},
    9: {},
}

ROW_NAMES = {
    1: "UNet",
    2: "UNet + RSR",
    3: "UNet + RSR (only similarity map)",
    4: "UNet + RSR + simple average",
    5: "UNet + RSR (w/o GRU) + comb.",
    6: "UNet + RSR (w/o MSM) + comb.",
    7: "UNet + RSR (w/o F_c) + comb.",
    8: "UNet + RSR (w/o weighted upsample) + comb.",
    9: "UNet + RSR + comb. (full)",
}


def row_config(row: int, base: ModelConfig) -> ModelConfig:
    from .core import ABLATION_FLAGS

    flags = {f: False for f in ABLATION_FLAGS}
    flags.update(ROWS[row])
    return base.with_overrides(**flags)


@dataclass
class ForwardOutput:
    history: list[torch.Tensor]
    m_rsr_up: torch.Tensor | None
    m_dec: torch.Tensor
    g: torch.Tensor | None
    m_fnl: torch.Tensor
    m_rsr: torch.Tensor | None = None
    similarity: list[torch.Tensor] = field(default_factory=list)


class RSRNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        if not config.no_rsr:
            self.rsr = RSRModule(config)
        self.decoder = Decoder(config, self.encoder.bottleneck_channels, self.encoder.skip_channels)
        if not (config.no_rsr or config.no_fusion or config.simple_average):
            self.fusion = Fusion(self.decoder.out_channels)

    def forward(self, image: torch.Tensor) -> ForwardOutput:
        cfg = self.config
        enc = self.encoder(image)
        if cfg.no_rsr:
            n, _, h, w = enc.bottleneck.shape
            guide = enc.bottleneck.new_zeros(n, 1, h, w)
            m_dec, _ = self.decoder(enc.bottleneck, guide, enc.skips)
            return ForwardOutput([], None, m_dec, None, m_dec)
        out = self.rsr(enc.style, enc.conventional)
        m_dec, last = self.decoder(enc.bottleneck, out.m_rsr, enc.skips)
        if cfg.no_fusion:
            g, m_fnl = None, m_dec
        else:
            fused = fuse(getattr(self, "fusion", None), m_dec, out.m_rsr_up, last, cfg)
            g, m_fnl = fused.g, fused.m_fnl
        return ForwardOutput(out.history, out.m_rsr_up, m_dec, g, m_fnl, out.m_rsr, out.similarity)


def build_model(config: ModelConfig, seed: int | None = None) -> RSRNet:
    model = RSRNet(config)
    init_parameters(model, seeded_rng(config.seed if seed is None else seed))
    return model


def forward(model: RSRNet, image) -> ForwardOutput:
    """Accepts an (H, W, 3) array or an (N, 3, H, W) tensor."""
    x = image_batch(image)
    expect = model.config.input_size
    if x.shape[-1] != expect or x.shape[-2] != expect:
        raise ValueError(f"image is {tuple(x.shape[-2:])}, config expects {expect}x{expect}")
    return model(x)


def image_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images.unsqueeze(0)
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def mask_batch(masks) -> torch.Tensor:
    arr = np.asarray(masks, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr[:, None]))


def compute_loss(out: ForwardOutput, gt: torch.Tensor, config: ModelConfig) -> LossBreakdown:
    extra = [out.m_dec] if (config.loss_direct_dec and out.m_dec is not out.m_fnl) else None
    return total_loss(
        out.history, out.m_fnl, gt, config.loss_lambda,
        config.loss_bce_on, config.loss_ssim_on, config.loss_iou_on,
        allow_empty=config.no_rsr, extra=extra,
    )


# ---------------------------------------------------------------------------
# training


class NumericalError(RuntimeError):
    pass


def lr_at(config: ModelConfig, epoch: int) -> float:
    """Step decay: one factor per milestone fraction already passed."""
    passed = sum(1 for f in config.lr_milestones if epoch >= f * config.epochs)
    return config.lr * config.lr_decay ** passed


def batch_order(n: int, config: ModelConfig, epoch: int) -> list[np.ndarray]:
    perm = seeded_rng(config.seed + 7919 * (epoch + 1)).permutation(n)
    return [perm[i:i + config.batch_size] for i in range(0, n, config.batch_size)]


def make_optimizer(model: nn.Module, config: ModelConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )


def _abort(out_dir: Path | None, step: int, epoch: int, batch_ids: list[str], what: str):
    if out_dir:
        (out_dir / "nan_dump.json").write_text(json.dumps(
            {"step": step, "epoch": epoch, "batch_ids": batch_ids, "non_finite": what}))
    raise NumericalError(f"non-finite {what} at step {step}, batch ids {batch_ids}")


@dataclass
class TrainResult:
    model: RSRNet
    checkpoint: Checkpoint
    log: list[dict]
    checkpoint_path: Path | None = None


def train_on_samples(config: ModelConfig, samples: list[SamplePair], ids: list[str] | None = None,
                     max_steps: int | None = None, out_dir: str | Path | None = None,
                     progress: bool = False) -> TrainResult:
    """Train from scratch; runs ``config.epochs`` epochs, or stops at ``max_steps``."""
    set_deterministic()
    model = build_model(config)
    model.train()
    opt = make_optimizer(model, config)
    ids = ids or [str(i) for i in range(len(samples))]
    images = np.stack([s.image for s in samples]).astype(np.float32)
    masks = np.stack([s.mask for s in samples]).astype(np.float32)
    n = len(samples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    epochs = config.epochs
    if max_steps is not None:
        epochs = math.ceil(max_steps / steps_per_epoch)
        # milestones are fractions of the run actually performed
        config = config.with_overrides(epochs=epochs)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_fh = open(out_dir / "train_log.jsonl", "w") if out_dir else None
    records: list[dict] = []
    step = 0
    try:
        for epoch in range(epochs):
            lr = lr_at(config, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            for idx in batch_order(n, config, epoch):
                if max_steps is not None and step >= max_steps:
                    break
                x = torch.from_numpy(np.ascontiguousarray(images[idx].transpose(0, 3, 1, 2)))
                y = torch.from_numpy(masks[idx][:, None])
                try:
                    out = model(x)
                except FloatingPointError:
                    _abort(out_dir, step + 1, epoch, [ids[i] for i in idx], "activations")
                loss = compute_loss(out, y, config)
                if not math.isfinite(loss.total):
                    _abort(out_dir, step + 1, epoch, [ids[i] for i in idx], "loss")
                opt.zero_grad(set_to_none=True)
                loss.tensor.backward()
                opt.step()
                # a diverged update would otherwise surface as a confusing error next step
                if not all(torch.isfinite(p).all() for p in model.parameters()):
                    _abort(out_dir, step + 1, epoch, [ids[i] for i in idx], "parameters after update")
                step += 1
                row = loss.log_row(step, lr)
                row["epoch"] = epoch
                row["batch_ids"] = [ids[i] for i in idx]
                records.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")
                if progress and (step % 25 == 0 or step == 1):
                    log.info("step %d epoch %d lr %.2e loss %.4f", step, epoch, lr, loss.total)
            if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(Checkpoint.from_model(model, config, step), out_dir / f"epoch_{epoch + 1:03d}.ckpt")
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    ckpt = Checkpoint.from_model(model, config, step, {"final_loss": records[-1]["total"] if records else None})
    path = None
    if out_dir:
        path = out_dir / "final.ckpt"
        save_checkpoint(ckpt, path)
    model.eval()
    return TrainResult(model, ckpt, records, path)


def train(config: ModelConfig, dataset_dir: str | Path, out_dir: str | Path,
          split: str | None = "train", max_steps: int | None = None, progress: bool = False) -> TrainResult:
    data = load_dataset(dataset_dir, split)
    if not data:
        raise ValueError(f"dataset {dataset_dir} (split {split}) is empty")
    ids = list(data)
    return train_on_samples(config, [data[i] for i in ids], ids, max_steps, out_dir, progress)


def checkpoint_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# inference & evaluation


def load_model(checkpoint: str | Path | Checkpoint, config: ModelConfig | None = None) -> RSRNet:
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model = RSRNet(ckpt.config)
    ckpt.load_into(model, config)
    model.eval()
    return model


@torch.no_grad()
def predict(model: RSRNet, samples: dict[str, SamplePair], batch_size: int = 16) -> dict[str, dict[str, np.ndarray]]:
    """Per-image full-resolution masks: m_fnl, m_dec, and m_rsr/g when present."""
    model.eval()
    ids = list(samples)
    out: dict[str, dict[str, np.ndarray]] = {}
    for i in range(0, len(ids), batch_size):
        chunk = ids[i:i + batch_size]
        res = model(image_batch(np.stack([samples[j].image for j in chunk])))
        for b, ident in enumerate(chunk):
            masks = {"m_fnl": res.m_fnl[b, 0].numpy(), "m_dec": res.m_dec[b, 0].numpy()}
            if res.m_rsr_up is not None:
                masks["m_rsr"] = res.m_rsr_up[b, 0].numpy()
            if res.g is not None:
                masks["g"] = res.g[b, 0].numpy()
            out[ident] = masks
    return out


def evaluate_model(model: RSRNet, samples: dict[str, SamplePair], ap_mode: str = "per_image") -> dict[str, EvalReport]:
    """Reports for the final mask and, when they exist, the RSR and decoder masks."""
    preds = predict(model, samples)
    gts = {i: s.mask for i, s in samples.items()}
    reports = {}
    for key in ("m_rsr", "m_dec", "m_fnl"):
        if all(key in p for p in preds.values()):
            reports[key] = evaluate_dataset({i: p[key] for i, p in preds.items()}, gts, ap_mode=ap_mode)
    return reports


def evaluate(checkpoint: str | Path | Checkpoint, dataset_dir: str | Path, split: str | None = "test",
             ap_mode: str = "per_image") -> dict[str, EvalReport]:
    model = load_model(checkpoint)
    return evaluate_model(model, load_dataset(dataset_dir, split), ap_mode)


# ---------------------------------------------------------------------------
# ablation sweeps


@dataclass
class AblationRun:
    row: int
    seed: int
    reports: dict[str, EvalReport]
    final_loss: float
    seconds: float


def run_ablation(base: ModelConfig, train_samples: dict[str, SamplePair], test_samples: dict[str, SamplePair],
                 rows: list[int], seeds: list[int], max_steps: int | None = None,
                 out_dir: str | Path | None = None, progress: bool = False) -> list[AblationRun]:
    """Train every (row, seed) pair identically and score it on the test split."""
    import time

    ids = list(train_samples)
    samples = [train_samples[i] for i in ids]
    runs = []
    for row in rows:
        for seed in seeds:
            cfg = row_config(row, base).with_overrides(seed=seed)
            sub = Path(out_dir) / f"row{row}_seed{seed}" if out_dir else None
            t0 = time.perf_counter()
            res = train_on_samples(cfg, samples, ids, max_steps, sub, progress)
            reports = evaluate_model(res.model, test_samples)
            runs.append(AblationRun(row, seed, reports, res.log[-1]["total"], time.perf_counter() - t0))
            log.info("row %d seed %d: AP %.2f", row, seed, reports["m_fnl"].ap_percent)
    return runs


def ablation_tables(runs: list[AblationRun]) -> tuple[str, str]:
    """Seed-averaged row table plus the per-mask breakdown for rows with an RSR branch."""
    rows = sorted({r.row for r in runs})

    def mean(row, key, attr):
        vals = [getattr(r.reports[key], attr) for r in runs if r.row == row and key in r.reports]
        return float(np.mean(vals)) if vals else float("nan")

    lines = [f"{'row':>3}  {'model':<44} {'AP(%)↑':>8} {'F1↑':>7} {'IoU(%)↑':>8}"]
    for row in rows:
        lines.append(f"{row:>3}  {ROW_NAMES[row]:<44} {mean(row, 'm_fnl', 'ap_percent'):8.2f} "
                     f"{mean(row, 'm_fnl', 'f1'):7.4f} {mean(row, 'm_fnl', 'iou_percent'):8.2f}")
    masks = ("m_rsr", "m_dec", "m_fnl")
    head = f"{'row':>3}  " + " | ".join(f"{m:^26}" for m in masks)
    sub = "     " + " | ".join(f"{'AP(%)↑':>8} {'F1↑':>7} {'IoU(%)↑':>8}" for _ in masks)
    breakdown = [head, sub]
    for row in rows:
        if ROWS[row].get("no_rsr"):
            continue
        breakdown.append(f"{row:>3}  " + " | ".join(
            f"{mean(row, m, 'ap_percent'):8.2f} {mean(row, m, 'f1'):7.4f} {mean(row, m, 'iou_percent'):8.2f}"
            for m in masks))
    return "\n".join(lines), "\n".join(breakdown)
