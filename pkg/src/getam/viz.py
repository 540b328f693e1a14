"""Heatmaps, overlays, and histogram rendering.

All rendering uses a fixed 256-entry colormap built by integer linear
interpolation between the anchor colors below, so output PNGs are
byte-reproducible across platforms.  Overlays blend half image, half
colormapped map.  Histograms are drawn as plain bars on a white canvas with
no text, keeping the renderer dependency-free.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from .gtt import atomic_write_bytes

# Anchor colors of the built-in heat colormap (dark blue -> magenta -> orange
# -> yellow -> white), interpolated to 256 RGB entries.
_ANCHORS = np.array([
    (5, 5, 40),
    (60, 15, 110),
    (160, 40, 95),
    (235, 115, 40),
    (250, 220, 80),
    (255, 255, 255),
], dtype=np.float64)


def _build_table() -> np.ndarray:
    n_seg = len(_ANCHORS) - 1
    pos = np.linspace(0.0, n_seg, 256)
    idx = np.minimum(pos.astype(int), n_seg - 1)
    frac = pos - idx
    table = _ANCHORS[idx] * (1 - frac)[:, None] + _ANCHORS[idx + 1] * frac[:, None]
    return np.round(table).astype(np.uint8)


COLORMAP = _build_table()


def heatmap_rgb(map01: np.ndarray) -> np.ndarray:
    """Colormapped uint8 [H, W, 3] from a map with values in [0, 1]."""
    idx = np.clip(np.round(map01 * 255), 0, 255).astype(np.uint8)
    return COLORMAP[idx]


def overlay_rgb(image: np.ndarray, map01: np.ndarray) -> np.ndarray:
    """Half image, half heatmap, clamped. ``image`` is [3, H, W] in [0, 1]."""
    base = np.moveaxis(image, 0, -1) * 255.0
    blend = 0.5 * base + 0.5 * heatmap_rgb(map01).astype(np.float64)
    return np.clip(np.round(blend), 0, 255).astype(np.uint8)


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def save_gray_png(path, map01: np.ndarray) -> None:
    arr = np.clip(np.round(map01 * 255), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _png_bytes(arr, "L"))


def save_rgb_png(path, rgb: np.ndarray) -> None:
    atomic_write_bytes(path, _png_bytes(rgb, "RGB"))


def save_overlay_png(path, image: np.ndarray, map01: np.ndarray) -> None:
    save_rgb_png(path, overlay_rgb(image, map01))


def histogram_png(path, counts: np.ndarray, width: int = 400,
                  height: int = 240) -> None:
    """Bar chart of bin counts: black bars on white, thin baseline, no text."""
    counts = np.asarray(counts, dtype=np.float64)
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    peak = counts.max() if counts.size and counts.max() > 0 else 1.0
    n = len(counts)
    margin = 10
    span = width - 2 * margin
    for i, c in enumerate(counts):
        x0 = margin + int(i * span / n)
        x1 = margin + int((i + 1) * span / n) - 2
        bar = int((height - 2 * margin) * (c / peak))
        if bar > 0:
            canvas[height - margin - bar:height - margin, x0:x1 + 1] = (40, 40, 40)
    canvas[height - margin:height - margin + 2, margin:width - margin] = 0
    atomic_write_bytes(path, _png_bytes(canvas, "RGB"))
