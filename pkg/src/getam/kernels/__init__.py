"""Hot numeric kernels for the refinement loop, with two interchangeable backends.

The default backend compiles the inner loops with numba's ``@njit``; setting
the environment variable ``GETAM_NUMBA=0`` (or any of ``false``/``no``)
before import selects the pure-numpy fallback instead.  Both produce the
same numbers to floating-point reduction order; ``benchmarks/bench_kernels.py``
compares their speed.

Kernels:

* ``pamr_affinity(image_hw3, offsets)`` — per-pixel softmax affinities over a
  dilated neighborhood, from squared color distances scaled by twice the
  squared per-image standard deviation of neighbor color distances.
* ``pamr_propagate(masks, affinity, offsets, iters)`` — repeated
  affinity-weighted averaging of class score maps over that neighborhood.
"""

import os

import numpy as np

#: L-infinity radii of the dilated neighborhood; 8 offsets per radius.
RADII = (1, 2, 4, 8)


def _make_offsets() -> np.ndarray:
    offs = []
    for r in RADII:
        for dy in (-r, 0, r):
            for dx in (-r, 0, r):
                if dy or dx:
                    offs.append((dy, dx))
    return np.array(offs, dtype=np.int64)


OFFSETS = _make_offsets()

_flag = os.environ.get("GETAM_NUMBA", "1").strip().lower()
_want_numba = _flag not in ("0", "false", "no")

if _want_numba:
    try:
        from ._numba import pamr_affinity, pamr_propagate
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - depends on environment
        from ._numpy import pamr_affinity, pamr_propagate
        BACKEND = "numpy"
else:
    from ._numpy import pamr_affinity, pamr_propagate
    BACKEND = "numpy"

__all__ = ["BACKEND", "OFFSETS", "RADII", "pamr_affinity", "pamr_propagate"]
