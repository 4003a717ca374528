"""Static figure dumps: iteration masks, similarity heatmaps, fusion panel."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .data import to_uint8

log = logging.getLogger(__name__)

HEATMAP_SCALES = (0, 3)
HEATMAP_CMAP = "RdBu_r"
PANEL_ORDER = ("m_rsr", "m_dec", "g", "m_fnl", "gt")


def mask_png(mask: np.ndarray, path: Path) -> Path:
    Image.fromarray(to_uint8(np.asarray(mask, dtype=np.float64)), "L").save(path)
    return path


def similarity_rgb(sim: np.ndarray) -> np.ndarray:
    """Diverging colour map with the range pinned to [-1, 1]."""
    t = (np.clip(sim, -1.0, 1.0) + 1.0) / 2.0
    return to_uint8(colormaps[HEATMAP_CMAP](t)[..., :3])


def upscale(rgb: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(rgb)
    return np.asarray(img.resize((size, size), Image.NEAREST))


def panel(tiles: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Tiles side by side on a white strip; grayscale tiles become RGB."""
    rgb = [np.repeat(to_uint8(t)[..., None], 3, -1) if t.ndim == 2 else t for t in tiles]
    h = max(t.shape[0] for t in rgb)
    w = sum(t.shape[1] for t in rgb) + gap * (len(rgb) - 1)
    out = np.full((h, w, 3), 255, np.uint8)
    x = 0
    for t in rgb:
        out[:t.shape[0], x:x + t.shape[1]] = t
        x += t.shape[1] + gap
    return out


def dump_visuals(out, gt: np.ndarray | None, scales: list[int], out_dir: str | Path) -> dict[str, list[Path]]:
    """Write per-iteration masks, similarity heatmaps for l in {0, 3} and the
    fusion panel for the first item of a ``ForwardOutput`` batch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, list[Path]] = {"iterations": [], "similarity": [], "panel": []}
    size = out.m_fnl.shape[-1]

    for k, m in enumerate(out.history, 1):
        written["iterations"].append(mask_png(m[0, 0].detach().numpy(), out_dir / f"iter_{k:02d}_mask.png"))
    if out.history:
        strip = panel([m[0, 0].detach().numpy() for m in out.history])
        Image.fromarray(strip).save(out_dir / "iterations_strip.png")

    for k, sim in enumerate(out.similarity, 1):
        for l in HEATMAP_SCALES:
            if l not in scales:
                if k == 1:
                    log.warning("scale l=%d not configured; heatmap skipped", l)
                continue
            s = sim[0, scales.index(l)].detach().numpy()
            path = out_dir / f"iter_{k:02d}_sim_l{l}.png"
            Image.fromarray(upscale(similarity_rgb(s), size)).save(path)
            written["similarity"].append(path)

    blank = np.zeros((size, size))
    maps = {
        "m_rsr": out.m_rsr_up, "m_dec": out.m_dec, "g": out.g, "m_fnl": out.m_fnl,
    }
    tiles = [blank if maps[k] is None else maps[k][0, 0].detach().numpy() for k in PANEL_ORDER[:4]]
    tiles.append(blank if gt is None else np.asarray(gt, dtype=np.float64))
    path = out_dir / "fusion_panel.png"
    Image.fromarray(panel(tiles)).save(path)
    written["panel"].append(path)
    return written
