"""Benchmark the refinement kernels: numba @njit vs pure numpy.

Runs the affinity and propagation kernels at several image sizes with both
backends, reports wall time and agreement.  The numba path is the package
default; export GETAM_NUMBA=0 to select the numpy path at import time.

Usage: python benchmarks/bench_kernels.py [--iters 10] [--repeats 3]
"""

import argparse
import time

import numpy as np

from getam.kernels import OFFSETS
from getam.kernels import _numba as knb
from getam.kernels import _numpy as knp


def timed(fn, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iters", type=int, default=10,
                        help="propagation iterations per call")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    # warm up JIT compilation outside the timed region
    img_small = rng.random((16, 16, 3))
    masks_small = rng.random((3, 16, 16))
    aff_small = knb.pamr_affinity(img_small, OFFSETS)
    knb.pamr_propagate(masks_small, aff_small, OFFSETS, 2)

    header = (f"{'size':>10} {'kernel':<10} {'numpy [ms]':>12} "
              f"{'numba [ms]':>12} {'speedup':>8} {'max diff':>10}")
    print(header)
    print("-" * len(header))
    for size in (32, 64, 128, 256):
        img = rng.random((size, size, 3))
        masks = rng.random((4, size, size))

        t_np, aff_np = timed(lambda: knp.pamr_affinity(img, OFFSETS), args.repeats)
        t_nb, aff_nb = timed(lambda: knb.pamr_affinity(img, OFFSETS), args.repeats)
        diff = np.abs(aff_np - aff_nb).max()
        print(f"{size:>8}px {'affinity':<10} {t_np * 1e3:>12.2f} "
              f"{t_nb * 1e3:>12.2f} {t_np / t_nb:>7.1f}x {diff:>10.2e}")

        t_np, p_np = timed(
            lambda: knp.pamr_propagate(masks, aff_np, OFFSETS, args.iters),
            args.repeats)
        t_nb, p_nb = timed(
            lambda: knb.pamr_propagate(masks, aff_nb, OFFSETS, args.iters),
            args.repeats)
        diff = np.abs(p_np - p_nb).max()
        print(f"{size:>8}px {'propagate':<10} {t_np * 1e3:>12.2f} "
              f"{t_nb * 1e3:>12.2f} {t_np / t_nb:>7.1f}x {diff:>10.2e}")


if __name__ == "__main__":
    main()
