"""Numba-compiled refinement kernels (hot path).

Same contracts as ``_numpy``; explicit per-pixel loops compiled with
``@njit(cache=True)``.  Loops stay serial so results are reproducible
bit-for-bit run to run.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def pamr_affinity(image: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    h, w, _ = image.shape
    k = offsets.shape[0]
    d2 = np.zeros((k, h, w))
    valid = np.zeros((k, h, w), dtype=np.bool_)

    # pass 1: squared color distances, plus running stats of the distances
    count = 0
    total = 0.0
    for i in range(k):
        dy, dx = offsets[i, 0], offsets[i, 1]
        for y in range(h):
            yy = y + dy
            if yy < 0 or yy >= h:
                continue
            for x in range(w):
                xx = x + dx
                if xx < 0 or xx >= w:
                    continue
                s = 0.0
                for c in range(3):
                    diff = image[y, x, c] - image[yy, xx, c]
                    s += diff * diff
                d2[i, y, x] = s
                valid[i, y, x] = True
                total += np.sqrt(s)
                count += 1
    if count > 0:
        mean = total / count
        var = 0.0
        for i in range(k):
            for y in range(h):
                for x in range(w):
                    if valid[i, y, x]:
                        dev = np.sqrt(d2[i, y, x]) - mean
                        var += dev * dev
        sigma = np.sqrt(var / count)
    else:
        sigma = 0.0
    denom = 2.0 * sigma * sigma
    if denom < 1e-24:
        denom = 1e-24

    # pass 2: softmax over valid neighbors
    aff = np.zeros((k, h, w))
    for y in range(h):
        for x in range(w):
            tot = 0.0
            for i in range(k):
                if valid[i, y, x]:
                    e = np.exp(-d2[i, y, x] / denom)
                    aff[i, y, x] = e
                    tot += e
            if tot > 0.0:
                for i in range(k):
                    aff[i, y, x] /= tot
    return aff


@njit(cache=True)
def pamr_propagate(masks: np.ndarray, affinity: np.ndarray,
                   offsets: np.ndarray, iters: int) -> np.ndarray:
    n_ch, h, w = masks.shape
    k = offsets.shape[0]
    cur = masks.copy()
    for _ in range(iters):
        nxt = np.zeros((n_ch, h, w))
        for i in range(k):
            dy, dx = offsets[i, 0], offsets[i, 1]
            for y in range(h):
                yy = y + dy
                if yy < 0 or yy >= h:
                    continue
                for x in range(w):
                    xx = x + dx
                    if xx < 0 or xx >= w:
                        continue
                    a = affinity[i, y, x]
                    for c in range(n_ch):
                        nxt[c, y, x] += a * cur[c, yy, xx]
        cur = nxt
    return cur
