"""Shared configuration, seeding, mask validation and checkpoint I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields, asdict, replace
from pathlib import Path
from typing import Any

import numpy as np
import torch

# Fields that change the network topology or the forward computation. A
# checkpoint trained under one setting cannot be used for inference under
# another.
ARCHITECTURE_FIELDS = (
    "input_size",
    "stem_channels",
    "stem_blocks",
    "encoder_channels",
    "encoder_blocks",
    "feature_dim",
    "head_hidden_dim",
    "gru_hidden_dim",
    "sim_branch_channels",
    "mask_branch_channels",
    "upsample_hidden_dim",
    "norm",
    "downscale_factor",
    "num_iterations",
    "scales",
    "mask_threshold",
    "no_rsr",
    "no_fusion",
    "no_gru",
    "no_msm",
    "similarity_only",
    "simple_average",
    "no_fc",
    "bilinear_upsample",
)

ABLATION_FLAGS = (
    "no_rsr",
    "no_fusion",
    "no_gru",
    "no_msm",
    "similarity_only",
    "simple_average",
    "no_fc",
    "bilinear_upsample",
)


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    # architecture
    input_size: int = 64
    stem_channels: int = 16
    stem_blocks: int = 0
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64])
    encoder_blocks: list[int] = field(default_factory=lambda: [1, 1, 1])
    feature_dim: int = 32
    head_hidden_dim: int = 0  # 0 -> same as feature_dim
    gru_hidden_dim: int = 48
    sim_branch_channels: int = 16
    mask_branch_channels: int = 8
    upsample_hidden_dim: int = 64
    norm: str = "group"  # "group" or "none"; applies to residual and decoder blocks
    downscale_factor: int = 8
    num_iterations: int = 12
    scales: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    mask_threshold: float = 0.5

    # ablation switches; the ablation rows in pipeline.ROWS are combinations of these
    no_rsr: bool = False
    no_fusion: bool = False
    no_gru: bool = False
    no_msm: bool = False
    similarity_only: bool = False
    simple_average: bool = False
    no_fc: bool = False
    bilinear_upsample: bool = False

    # loss
    loss_lambda: float = 0.8
    loss_bce_on: bool = True
    loss_ssim_on: bool = True
    loss_iou_on: bool = True
    loss_direct_dec: bool = False

    # optimisation
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 60
    lr_milestones: list[float] = field(default_factory=lambda: [0.5, 0.67, 0.83, 0.92])
    lr_decay: float = 0.5
    checkpoint_every: int = 0  # epochs; 0 -> only the final checkpoint

    seed: int = 42

    def __post_init__(self) -> None:
        self.validate()

    @property
    def head_width(self) -> int:
        return self.head_hidden_dim or self.feature_dim

    @property
    def coarse_size(self) -> int:
        return self.input_size // self.downscale_factor

    def validate(self) -> None:
        if self.num_iterations < 1:
            raise ConfigError("num_iterations must be >= 1")
        if self.downscale_factor < 2:
            raise ConfigError("downscale_factor must be >= 2")
        if self.loss_lambda <= 0:
            raise ConfigError("loss_lambda must be > 0")
        if not self.scales or any(l < 0 for l in self.scales):
            raise ConfigError("scales must be non-empty and every scale >= 0")
        if self.input_size % self.downscale_factor:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by "
                f"downscale_factor {self.downscale_factor}"
            )
        if len(self.encoder_channels) != len(self.encoder_blocks):
            raise ConfigError("encoder_channels and encoder_blocks differ in length")
        if 2 ** len(self.encoder_channels) != self.downscale_factor:
            raise ConfigError(
                f"{len(self.encoder_channels)} stride-2 stages give downscale "
                f"{2 ** len(self.encoder_channels)}, not {self.downscale_factor}"
            )
        if self.norm not in ("group", "none"):
            raise ConfigError(f"norm must be 'group' or 'none', got {self.norm!r}")
        if not 0 < self.mask_threshold < 1:
            raise ConfigError("mask_threshold must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")

    def with_overrides(self, **kw: Any) -> "ModelConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def desk_config(**kw: Any) -> ModelConfig:
    return ModelConfig(**kw)


def paper_config(**kw: Any) -> ModelConfig:
    """ResNet34-shaped trunk without pooling, 512-channel bottleneck, 256-d heads.

    Decoder widths and the fifth encoder block are not published; this preset
    is an approximate reconstruction and is never trained here.
    """
    base = dict(
        input_size=256,
        stem_channels=64,
        stem_blocks=3,
        encoder_channels=[128, 256, 512],
        encoder_blocks=[4, 6, 3],
        feature_dim=256,
        gru_hidden_dim=128,
        sim_branch_channels=64,
        mask_branch_channels=32,
        upsample_hidden_dim=256,
        batch_size=32,
    )
    base.update(kw)
    return ModelConfig(**base)


PRESETS = {"desk": desk_config, "paper": paper_config}


# ---------------------------------------------------------------------------
# config files: "key = value" per line, '#' comments, lists comma separated


def _parse_value(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [s for s in (p.strip() for p in raw.strip("[]").split(",")) if s]
            kind = float if default and isinstance(default[0], float) else int
            return [kind(s) for s in items]
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    return raw


def parse_config_text(text: str, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    defaults = base.to_dict()
    updates: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if key in updates or updates:
                raise ConfigError("'preset' must be the first key in a config file")
            if raw not in PRESETS:
                raise ConfigError(f"unknown preset {raw!r}")
            base = PRESETS[raw]()
            defaults = base.to_dict()
            continue
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        updates[key] = _parse_value(raw, defaults[key], key)
    return base.with_overrides(**updates)


def load_config(path: str | Path, base: ModelConfig | None = None) -> ModelConfig:
    return parse_config_text(Path(path).read_text(), base)


def format_config(config: ModelConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def save_config(config: ModelConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(config))


def config_mismatch(a: ModelConfig, b: ModelConfig) -> list[str]:
    """Names of architecture/ablation fields on which two configs disagree."""
    da, db = a.to_dict(), b.to_dict()
    return [k for k in ARCHITECTURE_FIELDS if da[k] != db[k]]


# ---------------------------------------------------------------------------
# seeding


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; its output is specified bit-for-bit across platforms."""
    if seed < 0:
        raise ValueError("seed must be >= 0")
    return np.random.Generator(np.random.PCG64(seed))


def derived_seed(master_seed: int, *keys: int) -> int:
    """Stable child seed for (master_seed, keys); independent of call order."""
    ss = np.random.SeedSequence([master_seed, *keys])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def set_deterministic(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


# ---------------------------------------------------------------------------
# masks


def as_mask(values: torch.Tensor | np.ndarray, clamp: bool = True):
    """Validate a probability mask. Out-of-range or non-finite values are
    clamped when ``clamp`` is set and rejected otherwise."""
    is_np = isinstance(values, np.ndarray)
    t = torch.as_tensor(values)
    if not torch.is_floating_point(t):
        t = t.to(torch.float32)
    if clamp:
        t = torch.nan_to_num(t, nan=0.0, posinf=1.0, neginf=0.0).clamp(0.0, 1.0)
    elif not torch.isfinite(t).all() or (t < 0).any() or (t > 1).any():
        raise ValueError("mask values must be finite and lie in [0, 1]")
    return t.numpy() if is_np else t


def check_features(t: torch.Tensor, name: str = "feature map") -> torch.Tensor:
    if t.dim() != 4 or min(t.shape[1:]) < 1:
        raise ValueError(f"{name} must be (N, C, H, W) with C, H, W >= 1, got {tuple(t.shape)}")
    return t


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: MAGIC, uint64 little-endian header length, UTF-8 JSON header, blob.
# The header holds format version, config, step, metadata and a manifest of
# {name, shape, offset, nbytes}; every array is little-endian float32.

MAGIC = b"RSRCKPT\n"
FORMAT_VERSION = 1
NAMESPACES = ("encoder", "rsr", "decoder", "fusion")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    @classmethod
    def from_model(cls, model: torch.nn.Module, config: ModelConfig, step: int = 0,
                   metadata: dict[str, Any] | None = None) -> "Checkpoint":
        params = {
            name: t.detach().cpu().numpy().astype("<f4", copy=True)
            for name, t in model.state_dict().items()
        }
        return cls(config, params, step, dict(metadata or {}))

    def load_into(self, model: torch.nn.Module, config: ModelConfig | None = None) -> None:
        if config is not None:
            bad = config_mismatch(self.config, config)
            if bad:
                raise CheckpointError(
                    "checkpoint was trained under a different configuration; "
                    f"mismatched fields: {', '.join(bad)}"
                )
        expected = model.state_dict()
        missing = sorted(set(expected) - set(self.params))
        if missing:
            raise CheckpointError(f"checkpoint is missing parameter blob {missing[0]!r}")
        extra = sorted(set(self.params) - set(expected))
        if extra:
            raise CheckpointError(f"checkpoint has unexpected parameter blob {extra[0]!r}")
        state = {}
        for name, ref in expected.items():
            arr = self.params[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"parameter {name!r} has shape {arr.shape}, model expects {tuple(ref.shape)}"
                )
            state[name] = torch.from_numpy(np.array(arr, dtype=np.float32))
        model.load_state_dict(state)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    manifest = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        raw = arr.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "config": ckpt.config.to_dict(),
        "step": int(ckpt.step),
        "metadata": ckpt.metadata,
        "manifest": manifest,
    }
    head = json.dumps(header, indent=1, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint_header(path: str | Path) -> tuple[dict[str, Any], bytes]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    start = len(MAGIC) + 8
    if len(data) < start:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC):start])
    try:
        header = json.loads(data[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    return header, data[start + hlen:]


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, blob = read_checkpoint_header(path)
    for key in ("format_version", "config", "step", "manifest"):
        if key not in header:
            raise CheckpointError(f"{path}: header field {key!r} missing")
    if header["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header['format_version']} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    try:
        config = ModelConfig().with_overrides(**header["config"])
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid config field: {exc}") from exc
    params = {}
    for entry in header["manifest"]:
        name = entry.get("name", "?")
        shape = tuple(entry["shape"])
        off, n = entry["offset"], entry["nbytes"]
        if n != 4 * int(np.prod(shape, dtype=np.int64)) or off + n > len(blob):
            raise CheckpointError(f"{path}: parameter blob {name!r} is truncated or inconsistent")
        params[name] = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=off).reshape(shape).copy()
    return Checkpoint(config, params, int(header["step"]), header.get("metadata", {}))


def manifest_parameter_count(path: str | Path) -> int:
    header, _ = read_checkpoint_header(path)
    return int(sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["manifest"]))
