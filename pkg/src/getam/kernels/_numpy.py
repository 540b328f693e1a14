"""Pure-numpy reference implementations of the refinement kernels.

Neighbor access is expressed as paired destination/source slices per offset;
out-of-frame neighbors are excluded from the softmax and contribute nothing
to propagation.
"""

import numpy as np


def _slices(dy: int, dx: int, h: int, w: int):
    dst_y = slice(max(0, -dy), h - max(0, dy))
    src_y = slice(max(0, dy), h + min(0, dy))
    dst_x = slice(max(0, -dx), w - max(0, dx))
    src_x = slice(max(0, dx), w + min(0, dx))
    return dst_y, src_y, dst_x, src_x


def pamr_affinity(image: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Softmax affinities exp(-d2 / (2 sigma^2)) over valid neighbors.

    ``image`` is [H, W, 3]; ``sigma`` is the population standard deviation of
    the Euclidean neighbor color distances across the whole image, floored to
    keep a constant image (sigma = 0) on the uniform-affinity branch.
    """
    h, w, _ = image.shape
    k = len(offsets)
    d2 = np.zeros((k, h, w))
    valid = np.zeros((k, h, w), dtype=bool)
    for i, (dy, dx) in enumerate(offsets):
        dst_y, src_y, dst_x, src_x = _slices(int(dy), int(dx), h, w)
        diff = image[dst_y, dst_x] - image[src_y, src_x]
        d2[i, dst_y, dst_x] = (diff * diff).sum(axis=-1)
        valid[i, dst_y, dst_x] = True
    dists = np.sqrt(d2[valid])
    sigma = dists.std() if dists.size else 0.0
    denom = max(2.0 * sigma * sigma, 1e-24)
    weights = np.where(valid, np.exp(-d2 / denom), 0.0)
    total = weights.sum(axis=0)
    return np.divide(weights, total, out=np.zeros_like(weights),
                     where=total > 0)


def pamr_propagate(masks: np.ndarray, affinity: np.ndarray,
                   offsets: np.ndarray, iters: int) -> np.ndarray:
    """Replace each pixel's class scores by the affinity-weighted neighbor mean."""
    out = masks.copy()
    h, w = masks.shape[1:]
    for _ in range(iters):
        acc = np.zeros_like(out)
        for i, (dy, dx) in enumerate(offsets):
            dst_y, src_y, dst_x, src_x = _slices(int(dy), int(dx), h, w)
            acc[:, dst_y, dst_x] += (affinity[i, dst_y, dst_x]
                                     * out[:, src_y, src_x])
        out = acc
    return out
