"""Class-wise attention maps from tap captures.

The per-block map couples the [class]-row attention with its class gradient:
relu(grad * attn) * relu(grad), i.e. attention weighted element-wise by the
squared gradient with negative evidence discarded.  Block maps are summed
across layers (raw, unnormalized) and only the final aggregate is
max-normalized; element-wise and matrix-product fusion exist solely for the
distribution analysis that motivates summation.  A token-space analogue of
the classic gradient-weighted CNN map serves as the baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError
from .vit import AttentionTap, TokenFeatures, VisionTransformer


@dataclass
class ClassAttentionMap:
    """Nonnegative h-by-w evidence map for one class."""

    class_id: int
    map: np.ndarray
    normalized: bool = False


@dataclass
class ClsAttentionRow:
    """The [class]-token row of one block's attention and its gradient."""

    block_index: int
    a_cls: np.ndarray
    grad_cls: np.ndarray
    class_id: int


def max_normalize(arr: np.ndarray) -> np.ndarray:
    """Scale so the maximum is 1; an identically-zero map stays zero."""
    peak = arr.max()
    return arr / peak if peak > 0 else arr.copy()


def extract_cls_row(tap: AttentionTap, c: int) -> ClsAttentionRow:
    """Slice row 0, columns 1..n of the tap's attention and gradient."""
    if tap.grad_A is None:
        raise ValueError(f"tap {tap.block_index} has no gradient; "
                         "run backprop_class_score first")
    if tap.class_id != c:
        raise ValueError(f"tap {tap.block_index} holds gradient for class "
                         f"{tap.class_id}, not {c}")
    return ClsAttentionRow(
        block_index=tap.block_index,
        a_cls=tap.A.data[0, 1:].copy(),
        grad_cls=tap.grad_A.data[0, 1:].copy(),
        class_id=c,
    )


def getam_block(row: ClsAttentionRow) -> ClassAttentionMap:
    """Per-block map: relu(grad * attn) * relu(grad), reshaped to the grid.

    Never normalized at block level; nonnegative by construction, zero
    wherever the gradient is nonpositive, and quadratic in the gradient
    scale.
    """
    g, a = row.grad_cls, row.a_cls
    flat = np.maximum(g * a, 0.0) * np.maximum(g, 0.0)
    side = int(round(len(flat) ** 0.5))
    shape = (side, side) if side * side == len(flat) else (1, len(flat))
    return ClassAttentionMap(class_id=row.class_id,
                             map=flat.reshape(shape), normalized=False)


def aggregate(blocks: list[ClassAttentionMap], mode: str = "sum") -> ClassAttentionMap:
    """Fuse per-block maps; the result is max-normalized to [0, 1].

    ``sum`` is the published aggregation.  ``ewmul`` (pointwise product) and
    ``matmul`` (sequential matrix product over the square grid, renormalized
    after each product) exist for the fusion-distribution analysis only.
    """
    if not blocks:
        raise ValueError("aggregate needs at least one block map")
    shapes = {b.map.shape for b in blocks}
    if len(shapes) > 1:
        raise DimensionError(f"block maps disagree in shape: {sorted(shapes)}")
    class_ids = {b.class_id for b in blocks}
    if len(class_ids) > 1:
        raise ValueError(f"block maps mix classes: {sorted(class_ids)}")

    if mode == "sum":
        fused = np.zeros_like(blocks[0].map)
        for b in blocks:
            fused = fused + b.map
    elif mode == "ewmul":
        fused = np.ones_like(blocks[0].map)
        for b in blocks:
            fused = fused * b.map
    elif mode == "matmul":
        fused = blocks[0].map.copy()
        for b in blocks[1:]:
            fused = max_normalize(fused @ b.map)
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return ClassAttentionMap(class_id=blocks[0].class_id,
                             map=max_normalize(fused), normalized=True)


@dataclass
class FusionStats:
    """Distribution summary of fused, normalized map values over an image set."""

    mode: str
    suppressed_mass: float       # fraction of values below 0.1
    histogram: np.ndarray        # 20 equal bins over [0, 1]
    bin_edges: np.ndarray
    spread: float                # standard deviation of the values


def fusion_distribution_stats(per_image_blocks: list[list[ClassAttentionMap]],
                              mode: str) -> FusionStats:
    """Fuse each image's block maps and summarize the pooled value distribution."""
    if len(per_image_blocks) < 10:
        raise ValueError(f"need at least 10 images, got {len(per_image_blocks)}")
    pooled = np.concatenate(
        [aggregate(blocks, mode).map.ravel() for blocks in per_image_blocks])
    hist, edges = np.histogram(pooled, bins=20, range=(0.0, 1.0))
    return FusionStats(mode=mode,
                       suppressed_mass=float(np.mean(pooled < 0.1)),
                       histogram=hist, bin_edges=edges,
                       spread=float(pooled.std()))


def synthetic_block_maps(rng: np.random.Generator, n_images: int = 12,
                         n_blocks: int = 4, grid: int = 8) -> list[list[ClassAttentionMap]]:
    """Seeded ensemble of attention-like block maps for the fusion analysis.

    Each block map is a localized bump (a different object part per block)
    over a low, heavy-tailed background, scaled into [0, 1], mimicking how
    successive blocks highlight different regions of the same object.
    """
    ys, xs = np.mgrid[0:grid, 0:grid]
    out = []
    for _ in range(n_images):
        cy, cx = rng.uniform(grid * 0.25, grid * 0.75, size=2)
        blocks = []
        for _ in range(n_blocks):
            by = cy + rng.normal(0, grid * 0.15)
            bx = cx + rng.normal(0, grid * 0.15)
            sigma = rng.uniform(grid * 0.08, grid * 0.2)
            bump = np.exp(-((ys - by) ** 2 + (xs - bx) ** 2) / (2 * sigma ** 2))
            noise = rng.gamma(shape=0.4, scale=0.08, size=(grid, grid))
            blocks.append(ClassAttentionMap(
                class_id=1, map=max_normalize(bump + noise), normalized=False))
        out.append(blocks)
    return out


def gradcam_baseline(features: TokenFeatures, c: int) -> ClassAttentionMap:
    """Token-space analogue of the gradient-weighted CNN map.

    Channel weights are the global average of the patch-token gradients at
    the final block's input anchor; the map is the relu of the weighted
    feature sum over those same tokens, reshaped to the grid.
    """
    if features.grad_F is None:
        raise ValueError("token features carry no gradient; "
                         "run backprop_class_score with features first")
    if features.grad_class_id != c:
        raise ValueError(f"token gradient is for class {features.grad_class_id}, "
                         f"not {c}")
    grad_patch = features.grad_F[1:]
    weights = grad_patch.mean(axis=0)
    flat = np.maximum(features.F.data[1:] @ weights, 0.0)
    side = int(round(len(flat) ** 0.5))
    return ClassAttentionMap(class_id=c, map=flat.reshape(side, side),
                             normalized=False)


def attribute_image(model: VisionTransformer, image: np.ndarray,
                    classes: list[int], method: str = "getam",
                    fusion: str = "sum") -> dict[int, ClassAttentionMap]:
    """Produce one normalized map per class for a single image.

    ``classes`` uses 1-based foreground ids (0 is background everywhere
    else); logits are indexed at ``class - 1``.  Methods: ``getam``,
    ``gradcam``, ``cam-add``, ``cam-ignore``.
    """
    pred, feats, taps = model.forward_with_taps(image)
    maps: dict[int, ClassAttentionMap] = {}
    for cls in sorted(classes):
        c = cls - 1
        if method == "getam":
            model.backprop_class_score(pred, c, taps)
            blocks = [getam_block(extract_cls_row(tap, c)) for tap in taps]
            fused = aggregate(blocks, fusion)
        elif method == "gradcam":
            model.backprop_class_score(pred, c, taps, features=feats)
            raw = gradcam_baseline(feats, c)
            fused = ClassAttentionMap(class_id=c, map=max_normalize(raw.map),
                                      normalized=True)
        elif method in ("cam-add", "cam-ignore"):
            cam = model.cam_head_variants(feats, method.split("-")[1])
            fused = ClassAttentionMap(class_id=c, map=max_normalize(cam[c]),
                                      normalized=True)
        else:
            raise ValueError(f"unknown attribution method {method!r}")
        maps[cls] = ClassAttentionMap(class_id=cls, map=fused.map,
                                      normalized=True)
    return maps
