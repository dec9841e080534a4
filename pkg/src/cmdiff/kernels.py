"""Hot per-pixel kernels: triangular soft histograms, Sobel gradients and
Canny non-maximum suppression.

Every kernel has a numba loop implementation (``*_nb``) and a vectorized
numpy implementation (``*_np``). The unsuffixed names dispatch to whichever
backend ``cmdiff._accel`` selected at import time; both variants stay
importable so tests and the benchmark can compare them directly.
"""

import numpy as np

from ._accel import HAS_NUMBA, njit

# ---------------------------------------------------------------------------
# soft histogram
#
# Bin centers c_j = (j + 0.5) / B. A value is clamped to [c_0, c_{B-1}] and
# split linearly between its two neighbouring centers, which is the same as
# the triangular weight max(0, 1 - |x - c_j| * B) inside that range.
# ---------------------------------------------------------------------------


@njit(cache=True)
def soft_histogram_nb(x, bins):
    rows, n = x.shape
    out = np.zeros((rows, bins))
    lo = 0.5 / bins
    hi = (bins - 0.5) / bins
    for r in range(rows):
        for k in range(n):
            v = min(max(x[r, k], lo), hi)
            pos = v * bins - 0.5
            j = int(np.floor(pos))
            if j >= bins - 1:
                j = bins - 2
            frac = pos - j
            out[r, j] += 1.0 - frac
            out[r, j + 1] += frac
        for j in range(bins):
            out[r, j] /= n
    return out


@njit(cache=True)
def soft_histogram_grad_nb(x, grad_hist):
    rows, n = x.shape
    bins = grad_hist.shape[1]
    out = np.zeros((rows, n))
    lo = 0.5 / bins
    hi = (bins - 0.5) / bins
    for r in range(rows):
        for k in range(n):
            v = x[r, k]
            if v <= lo or v >= hi:
                continue
            pos = v * bins - 0.5
            j = int(np.floor(pos))
            if j >= bins - 1:
                j = bins - 2
            out[r, k] = bins * (grad_hist[r, j + 1] - grad_hist[r, j]) / n
    return out


def _split(x, bins):
    lo, hi = 0.5 / bins, (bins - 0.5) / bins
    pos = np.clip(x, lo, hi) * bins - 0.5
    j = np.minimum(np.floor(pos).astype(np.int64), bins - 2)
    return j, pos - j


def soft_histogram_np(x, bins):
    rows, n = x.shape
    j, frac = _split(x, bins)
    offset = (np.arange(rows) * bins)[:, None]
    idx = (offset + j).ravel()
    h = np.bincount(idx, weights=(1.0 - frac).ravel(), minlength=rows * bins)
    h += np.bincount(idx + 1, weights=frac.ravel(), minlength=rows * bins)
    return h.reshape(rows, bins) / n


def soft_histogram_grad_np(x, grad_hist):
    rows, n = x.shape
    bins = grad_hist.shape[1]
    lo, hi = 0.5 / bins, (bins - 0.5) / bins
    j, _ = _split(x, bins)
    g_lo = np.take_along_axis(grad_hist, j, axis=1)
    g_hi = np.take_along_axis(grad_hist, j + 1, axis=1)
    inside = (x > lo) & (x < hi)
    return np.where(inside, bins * (g_hi - g_lo) / n, 0.0)


# ---------------------------------------------------------------------------
# Sobel (replicate-padded 3x3 correlation)
# ---------------------------------------------------------------------------


@njit(cache=True)
def sobel_nb(img):
    h, w = img.shape
    gx = np.empty((h, w))
    gy = np.empty((h, w))
    for i in range(h):
        im = max(i - 1, 0)
        ip = min(i + 1, h - 1)
        for j in range(w):
            jm = max(j - 1, 0)
            jp = min(j + 1, w - 1)
            gx[i, j] = (img[im, jp] + 2.0 * img[i, jp] + img[ip, jp]) - (
                img[im, jm] + 2.0 * img[i, jm] + img[ip, jm]
            )
            gy[i, j] = (img[ip, jm] + 2.0 * img[ip, j] + img[ip, jp]) - (
                img[im, jm] + 2.0 * img[im, j] + img[im, jp]
            )
    return gx, gy


def sobel_np(img):
    p = np.pad(img, 1, mode="edge")
    up, mid, down = p[:-2], p[1:-1], p[2:]
    gx = (up[:, 2:] + 2 * mid[:, 2:] + down[:, 2:]) - (up[:, :-2] + 2 * mid[:, :-2] + down[:, :-2])
    gy = (down[:, :-2] + 2 * down[:, 1:-1] + down[:, 2:]) - (up[:, :-2] + 2 * up[:, 1:-1] + up[:, 2:])
    return gx, gy


# ---------------------------------------------------------------------------
# Canny non-maximum suppression over four quantized directions
# ---------------------------------------------------------------------------


@njit(cache=True)
def nonmax_suppress_nb(mag, gx, gy):
    h, w = mag.shape
    out = np.zeros((h, w))
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            m = mag[i, j]
            if m == 0.0:
                continue
            angle = np.arctan2(gy[i, j], gx[i, j]) * 180.0 / np.pi
            if angle < 0.0:
                angle += 180.0
            if angle < 22.5 or angle >= 157.5:
                a, b = mag[i, j - 1], mag[i, j + 1]
            elif angle < 67.5:
                a, b = mag[i - 1, j - 1], mag[i + 1, j + 1]
            elif angle < 112.5:
                a, b = mag[i - 1, j], mag[i + 1, j]
            else:
                a, b = mag[i - 1, j + 1], mag[i + 1, j - 1]
            if m >= a and m >= b:
                out[i, j] = m
    return out


def nonmax_suppress_np(mag, gx, gy):
    h, w = mag.shape
    angle = np.degrees(np.arctan2(gy, gx))
    angle = np.where(angle < 0, angle + 180.0, angle)
    p = np.pad(mag, 1)
    c = lambda di, dj: p[1 + di : 1 + di + h, 1 + dj : 1 + dj + w]  # noqa: E731
    horiz = (angle < 22.5) | (angle >= 157.5)
    diag = (angle >= 22.5) & (angle < 67.5)
    vert = (angle >= 67.5) & (angle < 112.5)
    anti = (angle >= 112.5) & (angle < 157.5)
    a = np.select([horiz, diag, vert, anti], [c(0, -1), c(-1, -1), c(-1, 0), c(-1, 1)])
    b = np.select([horiz, diag, vert, anti], [c(0, 1), c(1, 1), c(1, 0), c(1, -1)])
    keep = (mag >= a) & (mag >= b) & (mag != 0)
    keep[0, :] = keep[-1, :] = False
    keep[:, 0] = keep[:, -1] = False
    return np.where(keep, mag, 0.0)


if HAS_NUMBA:
    soft_histogram = soft_histogram_nb
    soft_histogram_grad = soft_histogram_grad_nb
    sobel = sobel_nb
    nonmax_suppress = nonmax_suppress_nb
else:
    soft_histogram = soft_histogram_np
    soft_histogram_grad = soft_histogram_grad_np
    sobel = sobel_np
    nonmax_suppress = nonmax_suppress_np
