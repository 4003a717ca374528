"""Synthetic inharmonious composites, on-disk datasets and an iHarmony4 adapter.

A composite is a procedurally generated base image whose region (under 50% of
the area) receives a parametric colour shift: per-channel gain/bias, gamma and
a hue rotation about the grey axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .core import derived_seed, seeded_rng

MAX_RETRIES = 200


@dataclass
class ShiftParams:
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    hue_degrees: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")

    @property
    def is_identity(self) -> bool:
        return (tuple(self.gain) == (1.0, 1.0, 1.0) and tuple(self.bias) == (0.0, 0.0, 0.0)
                and self.gamma == 1.0 and self.hue_degrees == 0.0)


@dataclass
class SamplePair:
    image: np.ndarray   # (H, W, 3) float in [0, 1]
    mask: np.ndarray    # (H, W) float in {0, 1}
    meta: dict = field(default_factory=dict)


@dataclass
class DataConfig:
    size: int = 64
    min_area: float = 0.02
    max_area: float = 0.5
    min_delta: float = 0.08   # minimum mean |change| inside the region
    test_fraction: float = 0.2


def _hue_matrix(degrees: float) -> np.ndarray:
    """Rotation of RGB space about the (1,1,1) axis."""
    a = math.radians(degrees)
    u = np.full(3, 1 / math.sqrt(3))
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return math.cos(a) * np.eye(3) + math.sin(a) * k + (1 - math.cos(a)) * np.outer(u, u)


def shift_pixels(pixels: np.ndarray, shift: ShiftParams) -> np.ndarray:
    """Apply a shift to an (..., 3) array in [0, 1]; result clamped to [0, 1]."""
    out = pixels * np.asarray(shift.gain) + np.asarray(shift.bias)
    out = np.clip(out, 0.0, 1.0)
    if shift.gamma != 1.0:
        out = out ** shift.gamma
    if shift.hue_degrees != 0.0:
        out = np.clip(out @ _hue_matrix(shift.hue_degrees).T, 0.0, 1.0)
    return out


def apply_shift(image: np.ndarray, mask: np.ndarray, shift: ShiftParams) -> np.ndarray:
    """Shift only the pixels where ``mask`` is set; background is copied bit-exactly."""
    out = image.copy()
    sel = np.asarray(mask) > 0.5
    if sel.any():
        out[sel] = shift_pixels(image[sel], shift)
    return out


def generate_base_image(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.zeros((size, size, 3))
    # smooth colour gradient
    for c in range(3):
        a, b, base = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.2, 0.8)
        img[..., c] = base + a * (xx - 0.5) + b * (yy - 0.5)
    # soft coloured blobs
    for _ in range(int(rng.integers(3, 8))):
        cy, cx = rng.uniform(0, size, 2)
        r = rng.uniform(0.08, 0.3) * size
        blob = np.exp(-((yy * (size - 1) - cy) ** 2 + (xx * (size - 1) - cx) ** 2) / (2 * r * r))
        img += blob[..., None] * rng.uniform(-0.35, 0.35, 3)
    # fine texture
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(1.0, 1.0, 0))
    img += 0.03 * noise
    return np.clip(img, 0.0, 1.0)


def _ellipse(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ry, rx = rng.uniform(0.08, 0.4, 2) * size
    t = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(t) + dy * math.sin(t)
    v = -dx * math.sin(t) + dy * math.cos(t)
    return ((u / rx) ** 2 + (v / ry) ** 2) <= 1.0


def _polygon(rng, size):
    n = int(rng.integers(5, 10))
    cy, cx = rng.uniform(0.25, 0.75, 2) * size
    angles = np.sort(rng.uniform(0, 2 * math.pi, n))
    radii = rng.uniform(0.1, 0.4, n) * size
    pts = [(float(cx + r * math.cos(a)), float(cy + r * math.sin(a))) for a, r in zip(angles, radii)]
    canvas = Image.new("L", (size, size), 0)
    ImageDraw.Draw(canvas).polygon(pts, fill=1)
    return np.asarray(canvas, dtype=bool)


def count_components(mask: np.ndarray) -> int:
    """Number of 4-connected foreground components."""
    _, n = ndimage.label(np.asarray(mask) > 0.5)
    return int(n)


def generate_region_mask(rng: np.random.Generator, size: int, max_area: float = 0.5,
                         min_area: float = 0.02) -> np.ndarray:
    """Filled ellipse or star-shaped polygon, one 4-connected component,
    with area fraction in [min_area, max_area)."""
    if not 0 < min_area < max_area <= 0.5:
        raise ValueError("need 0 < min_area < max_area <= 0.5")
    for _ in range(MAX_RETRIES):
        m = _ellipse(rng, size) if rng.random() < 0.5 else _polygon(rng, size)
        frac = m.mean()
        if min_area <= frac < max_area and count_components(m) == 1:
            return m.astype(np.float32)
    raise RuntimeError("could not draw a region mask satisfying the area constraints")


def sample_shift(rng: np.random.Generator) -> ShiftParams:
    return ShiftParams(
        gain=tuple(float(g) for g in rng.uniform(0.6, 1.4, 3)),
        bias=tuple(float(b) for b in rng.uniform(-0.15, 0.15, 3)),
        gamma=float(np.exp(rng.uniform(-0.4, 0.4))),
        hue_degrees=float(rng.uniform(-40, 40)),
    )


def make_sample(seed: int, cfg: DataConfig) -> SamplePair:
    rng = seeded_rng(seed)
    base = generate_base_image(rng, cfg.size)
    mask = generate_region_mask(rng, cfg.size, cfg.max_area, cfg.min_area)
    sel = mask > 0.5
    for _ in range(MAX_RETRIES):
        shift = sample_shift(rng)
        image = apply_shift(base, mask, shift)
        if np.abs(image[sel] - base[sel]).mean() >= cfg.min_delta:
            break
    else:
        raise RuntimeError("could not draw a colour shift above the minimum magnitude")
    meta = {"seed": seed, "shift": asdict(shift), "area": float(mask.mean()),
            "bbox": [int(v) for v in _bbox(sel)]}
    return SamplePair(image, mask, meta)


def _bbox(sel):
    ys, xs = np.nonzero(sel)
    return ys.min(), xs.min(), ys.max() + 1, xs.max() + 1


def make_dataset(master_seed: int, n: int, cfg: DataConfig | None = None) -> list[SamplePair]:
    """Sample i depends only on (master_seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or DataConfig()
    return [make_sample(derived_seed(master_seed, i), cfg) for i in range(n)]


def split_ids(ids: list[str], seed: int, test_fraction: float = 0.2) -> tuple[list[str], list[str]]:
    order = seeded_rng(seed).permutation(len(ids))
    n_test = int(round(test_fraction * len(ids)))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test


# ---------------------------------------------------------------------------
# persistence: images/<id>.png, masks/<id>.png, meta/<id>.json, train.txt, test.txt


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0, 1) * 255).astype(np.uint8)


def save_dataset(samples: list[SamplePair], root: str | Path, seed: int = 42,
                 test_fraction: float = 0.2) -> list[str]:
    root = Path(root)
    for sub in ("images", "masks", "meta"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    ids = [f"{i:05d}" for i in range(len(samples))]
    for ident, s in zip(ids, samples):
        Image.fromarray(to_uint8(s.image), "RGB").save(root / "images" / f"{ident}.png")
        Image.fromarray(np.where(s.mask > 0.5, 255, 0).astype(np.uint8), "L").save(
            root / "masks" / f"{ident}.png")
        (root / "meta" / f"{ident}.json").write_text(json.dumps(s.meta, sort_keys=True))
    train, test = split_ids(ids, seed, test_fraction)
    (root / "train.txt").write_text("".join(i + "\n" for i in train))
    (root / "test.txt").write_text("".join(i + "\n" for i in test))
    return ids


def read_image(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path: Path) -> np.ndarray:
    return (np.asarray(Image.open(path).convert("L")) > 127).astype(np.float32)


def load_dataset(root: str | Path, split: str | None = None) -> dict[str, SamplePair]:
    """Load a saved dataset, or an iHarmony4 layout when ``composite_images/`` exists."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    if (root / "composite_images").is_dir():
        return load_iharmony4(root, split)
    images = {p.stem: p for p in (root / "images").glob("*.png")}
    masks = {p.stem: p for p in (root / "masks").glob("*.png")}
    for ident in sorted(set(images) ^ set(masks)):
        raise FileNotFoundError(f"sample {ident!r} is missing its image or mask file")
    ids = sorted(images)
    if split is not None:
        listing = root / f"{split}.txt"
        if not listing.exists():
            raise FileNotFoundError(f"split file {listing} not found")
        wanted = listing.read_text().split()
        for ident in wanted:
            if ident not in images:
                raise FileNotFoundError(f"split {split!r} lists missing sample {ident!r}")
        ids = wanted
    out = {}
    for ident in ids:
        meta_path = root / "meta" / f"{ident}.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        out[ident] = SamplePair(read_image(images[ident]), read_mask(masks[ident]), meta)
    return out


def iharmony4_mask_name(composite_name: str) -> str:
    """``<image>_<mask>_<variant>.jpg`` pairs with ``masks/<image>_<mask>.png``."""
    stem = Path(composite_name).stem
    parts = stem.split("_")
    if len(parts) < 3:
        raise ValueError(f"{composite_name!r} does not follow <image>_<mask>_<variant>")
    return "_".join(parts[:-1]) + ".png"


def load_iharmony4(root: str | Path, split: str | None = None,
                   size: int | None = None) -> dict[str, SamplePair]:
    """Adapter for one iHarmony4 sub-dataset directory.

    Expects ``composite_images/``, ``masks/`` and optionally ``real_images/``
    plus ``<Name>_train.txt`` / ``<Name>_test.txt`` listings of composite paths.
    ``size`` resizes (bilinear image, nearest mask).
    """
    root = Path(root)
    comps = sorted((root / "composite_images").glob("*.*"))
    if split is not None:
        listings = list(root.glob(f"*_{split}.txt"))
        if not listings:
            raise FileNotFoundError(f"no *_{split}.txt listing in {root}")
        wanted = {Path(line).name for f in listings for line in f.read_text().split()}
        comps = [c for c in comps if c.name in wanted]
    out = {}
    for comp in comps:
        mask_path = root / "masks" / iharmony4_mask_name(comp.name)
        if not mask_path.exists():
            raise FileNotFoundError(f"composite {comp.name!r} has no mask {mask_path.name!r}")
        img = Image.open(comp).convert("RGB")
        msk = Image.open(mask_path).convert("L")
        if size is not None:
            img = img.resize((size, size), Image.BILINEAR)
            msk = msk.resize((size, size), Image.NEAREST)
        image = np.asarray(img, dtype=np.float32) / 255.0
        mask = (np.asarray(msk) > 127).astype(np.float32)
        out[comp.stem] = SamplePair(image, mask, {"source": "iharmony4", "composite": comp.name,
                                                   "mask": mask_path.name})
    return out
