"""Pseudo-label completion from class activation maps and a binary saliency mask.

Pipeline per image: refine the raw maps with color-affinity propagation,
max-normalize each class channel, synthesize a background channel
(1 - max_c activation)^gamma, assign salient pixels by channel argmax
(foreground wins -> class id, background wins -> unknown 255, non-salient ->
background 0), then mine non-salient pixels whose activation clears a
per-class quantile threshold: exactly one class above threshold labels the
pixel, several label it unknown, none leaves it background.

Saliency maps are plain {0,1} arrays; pseudo labels are integer arrays over
{0, 1..C, 255}.  Setting the mining quantile to 1.0 disables mining (the
threshold becomes the channel maximum and the comparison is strict).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import kernels
from .attribution import ClassAttentionMap, max_normalize
from .vit import bilinear_matrix

UNKNOWN = 255


@dataclass
class MiningConfig:
    """High-activation mining quantile and background exponent."""

    alpha: float = 0.9
    gamma: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma <= 1.0:
            raise ValueError(f"gamma must be > 1, got {self.gamma}")


@dataclass
class ActivationStack:
    """Per-channel-normalized foreground maps plus the synthesized background."""

    M_fg: np.ndarray  # [C, H, W], each channel max-normalized
    M_bg: np.ndarray  # [H, W]
    gamma: float

    @classmethod
    def build(cls, m_fg_raw: np.ndarray, gamma: float) -> "ActivationStack":
        m_fg = np.stack([max_normalize(ch) for ch in m_fg_raw]) \
            if m_fg_raw.shape[0] else m_fg_raw.copy()
        return cls(M_fg=m_fg, M_bg=background_channel(m_fg, gamma), gamma=gamma)

    @property
    def M(self) -> np.ndarray:
        """[C+1, H, W] stack with the background at channel 0."""
        return np.concatenate([self.M_bg[None], self.M_fg], axis=0)


def background_channel(m_fg: np.ndarray, gamma: float) -> np.ndarray:
    """(1 - max over class channels)^gamma; all-absent pixels score 1."""
    if gamma <= 1.0:
        raise ValueError(f"gamma must be > 1, got {gamma}")
    if m_fg.shape[0] == 0:
        return np.ones(m_fg.shape[1:])
    return (1.0 - m_fg.max(axis=0)) ** gamma


def _check_binary(saliency: np.ndarray) -> np.ndarray:
    s = np.asarray(saliency)
    if not np.isin(s, (0, 1)).all():
        raise ValueError("saliency map must be binary {0, 1}")
    return s


def saliency_constrained_masking(stack: ActivationStack,
                                 saliency: np.ndarray) -> np.ndarray:
    """Assign salient pixels by stack argmax; everything non-salient is background.

    Argmax runs over all C+1 channels with ties resolved toward the lowest
    channel index (background first), so ambiguous pixels never become
    foreground.  A salient pixel whose argmax is the background channel is
    marked unknown.
    """
    s = _check_binary(saliency)
    m = stack.M
    if m.shape[1:] != s.shape:
        raise ValueError(f"stack spatial shape {m.shape[1:]} != saliency {s.shape}")
    winner = m.argmax(axis=0)
    pseudo = np.where(winner > 0, winner, UNKNOWN)
    return np.where(s == 1, pseudo, 0).astype(np.int64)


def mining_thresholds(m_fg: np.ndarray, alpha: float) -> np.ndarray:
    """Per-class activation threshold: the alpha-quantile over the whole image."""
    if m_fg.shape[0] == 0:
        return np.zeros(0)
    return np.quantile(m_fg.reshape(m_fg.shape[0], -1), alpha, axis=1)


def conflict_counts(m_fg: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Number of classes strictly above their threshold at each pixel."""
    if m_fg.shape[0] == 0:
        return np.zeros(m_fg.shape[1:], dtype=np.int64)
    return (m_fg > thresholds[:, None, None]).sum(axis=0)


def high_activation_mining(pseudo: np.ndarray, m_fg: np.ndarray,
                           saliency: np.ndarray, cfg: MiningConfig) -> np.ndarray:
    """Recover confidently-activated objects in non-salient regions.

    Operates only where the saliency mask is 0; salient pixels are returned
    untouched.  A raised quantile can only shrink the mined region.
    """
    s = _check_binary(saliency)
    out = pseudo.copy()
    if m_fg.shape[0] == 0:
        return out
    thresholds = mining_thresholds(m_fg, cfg.alpha)
    exceed = m_fg > thresholds[:, None, None]
    counts = exceed.sum(axis=0)
    winner = exceed.argmax(axis=0) + 1  # valid wherever counts == 1
    nonsalient = s == 0
    out[nonsalient & (counts == 1)] = winner[nonsalient & (counts == 1)]
    out[nonsalient & (counts > 1)] = UNKNOWN
    return out


def pamr_refine(m_fg: np.ndarray, image: np.ndarray, iterations: int) -> np.ndarray:
    """Color-affinity smoothing of the class maps over a dilated neighborhood.

    Affinities are computed once from the image and held fixed while the maps
    are propagated ``iterations`` times; channels are max-normalized after
    the loop.  Zero iterations is the identity.
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    if m_fg.shape[1:] != image.shape[1:]:
        raise ValueError(f"maps {m_fg.shape[1:]} and image {image.shape[1:]} disagree")
    if iterations == 0 or m_fg.shape[0] == 0:
        return m_fg.copy()
    hw3 = np.ascontiguousarray(np.moveaxis(np.asarray(image, np.float64), 0, -1))
    affinity = kernels.pamr_affinity(hw3, kernels.OFFSETS)
    refined = kernels.pamr_propagate(np.ascontiguousarray(m_fg, np.float64),
                                     affinity, kernels.OFFSETS, iterations)
    return np.stack([max_normalize(ch) for ch in refined])


def upsample_map(arr: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinearly resize a square map to ``out_size`` (constant maps stay constant)."""
    grid = arr.shape[0]
    if arr.shape != (grid, grid):
        raise ValueError(f"expected a square map, got {arr.shape}")
    if grid == out_size:
        return arr.copy()
    flat = bilinear_matrix(grid, out_size) @ arr.ravel()
    return flat.reshape(out_size, out_size)


def complete_labels(maps: dict[int, ClassAttentionMap], saliency: np.ndarray,
                    image: np.ndarray, cfg: MiningConfig, n_classes: int,
                    pamr_iters: int = 10, use_pamr: bool = True) -> np.ndarray:
    """Full per-image completion: refine, stack, mask by saliency, mine.

    ``maps`` is keyed by 1-based class id; classes absent from the image get
    identically-zero channels and can never be emitted.  Maps smaller than
    the saliency resolution are bilinearly upsampled first.  Deterministic.
    """
    s = _check_binary(saliency)
    h, w = s.shape
    m_fg = np.zeros((n_classes, h, w))
    for cls, cam in maps.items():
        if not 1 <= cls <= n_classes:
            raise ValueError(f"class id {cls} outside 1..{n_classes}")
        arr = cam.map
        if arr.shape != (h, w):
            arr = upsample_map(arr, h)
        m_fg[cls - 1] = arr
    if use_pamr and pamr_iters > 0:
        m_fg = pamr_refine(m_fg, image, pamr_iters)
    stack = ActivationStack.build(m_fg, cfg.gamma)
    pseudo = saliency_constrained_masking(stack, s)
    return high_activation_mining(pseudo, stack.M_fg, s, cfg)


# -- PNG exchange -----------------------------------------------------------

def _save_png_atomic(path, arr: np.ndarray, mode: str) -> None:
    import io

    from .gtt import atomic_write_bytes

    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def write_label_png(path, pseudo: np.ndarray) -> None:
    """Store a pseudo label as a palette-free 8-bit grayscale PNG (raw values)."""
    _save_png_atomic(path, pseudo.astype(np.uint8), "L")


def read_label_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.int64)


def write_saliency_png(path, saliency: np.ndarray) -> None:
    _save_png_atomic(path, (_check_binary(saliency) * 255).astype(np.uint8), "L")


def read_saliency_png(path) -> np.ndarray:
    """Binary saliency from an 8-bit PNG, thresholded at 128."""
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr >= 128).astype(np.int64)
