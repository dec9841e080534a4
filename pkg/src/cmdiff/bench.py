"""Time the numba kernels against their numpy counterparts.

    python -m cmdiff.bench [--repeat 20] [--size 64]

Numba timings exclude the first (compiling) call. Outputs are also compared
so a speedup never hides a divergence.
"""

import argparse
import time

import numpy as np

from . import kernels
from ._accel import HAS_NUMBA


def _time(fn, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def cases(size=64, batch=8, bins=32, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.random((batch * 3, size * size))
    g = rng.standard_normal((batch * 3, bins))
    img = rng.random((size, size))
    gx, gy = kernels.sobel_np(img)
    mag = np.hypot(gx, gy)
    return {
        "soft_histogram": (kernels.soft_histogram_nb, kernels.soft_histogram_np, (x, bins)),
        "soft_histogram_grad": (kernels.soft_histogram_grad_nb, kernels.soft_histogram_grad_np, (x, g)),
        "sobel": (kernels.sobel_nb, kernels.sobel_np, (img,)),
        "nonmax_suppress": (kernels.nonmax_suppress_nb, kernels.nonmax_suppress_np, (mag, gx, gy)),
    }


def run(size=64, repeat=20):
    """Rows of (kernel, numba_s or None, numpy_s, max_abs_diff or None)."""
    rows = []
    for name, (nb, npf, args) in cases(size).items():
        t_np, out_np = _time(npf, args, repeat)
        t_nb = diff = None
        if HAS_NUMBA:
            nb(*args)  # compile
            t_nb, out_nb = _time(nb, args, repeat)
            diff = _max_diff(out_nb, out_np)
        rows.append((name, t_nb, t_np, diff))
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    if not HAS_NUMBA:
        print("numba unavailable or disabled (CMDIFF_NO_NUMBA); timing numpy only")
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'max|diff|':>12}")
    for name, t_nb, t_np, diff in run(args.size, args.repeat):
        nb_s = f"{t_nb * 1e3:10.3f}" if t_nb is not None else f"{'-':>10}"
        sp = f"{t_np / t_nb:9.1f}" if t_nb else f"{'-':>9}"
        d = f"{diff:12.2e}" if diff is not None else f"{'-':>12}"
        print(f"{name:<22}{nb_s}{t_np * 1e3:10.3f}{sp}{d}")


if __name__ == "__main__":
    main()
