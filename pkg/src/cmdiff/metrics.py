"""Image-quality and distribution metrics: PSNR, SSIM, FID from feature
vectors, and histogram distances.

Images are 8-bit arrays (H x W or H x W x C). FID consumes externally
extracted feature vectors; :func:`patch_features` is a deliberately crude
built-in extractor for smoke tests and its FID values are not comparable to
Inception-based FID.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .constraints import chi2_distance

MAX_INTENSITY = 255.0
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5
HIST_METRICS = ("chi2", "euclidean", "bhattacharyya")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """10 log10(M N 255^2 / sum (a - b)^2), averaged over channels as one
    pooled MSE. Identical images return ``math.inf``."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(MAX_INTENSITY**2 / mse))


def _ssim_formula(mu_a, mu_b, var_a, var_b, cov):
    c1 = (SSIM_K1 * MAX_INTENSITY) ** 2
    c2 = (SSIM_K2 * MAX_INTENSITY) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(x, w):
    return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)


def _ssim_channel(a, b, window):
    if window == "global":
        mu_a, mu_b = a.mean(), b.mean()
        return float(_ssim_formula(mu_a, mu_b, a.var(), b.var(), ((a - mu_a) * (b - mu_b)).mean()))
    w = gaussian_window()
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    return float(np.mean(_ssim_formula(mu_a, mu_b, var_a, var_b, cov)))


def ssim(a, b, window="gaussian11"):
    """SSIM on 8-bit images, averaged over channels.

    ``window="global"`` applies the formula to whole-image moments;
    ``"gaussian11"`` averages it over 11 x 11 Gaussian (sigma 1.5) windows
    fully inside the image.
    """
    a, b = _pair(a, b)
    if window not in ("global", "gaussian11"):
        raise ValueError(f"unknown SSIM window {window!r}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if window == "gaussian11" and min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], window) for c in range(a.shape[-1])]))


def _sqrt_psd(m, tol=1e-8):
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    vals = np.where(vals < tol, np.maximum(vals, 0.0), vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_features(feats_a, feats_b):
    """Frechet distance between Gaussian fits of two feature sets (rows = vectors).

    The cross term tr((S_a S_b)^(1/2)) is evaluated as the trace of the square
    root of the symmetric S_a^(1/2) S_b S_a^(1/2); eigenvalues below 1e-8 are
    clamped at 0.
    """
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("each feature set needs at least 2 vectors")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    root_a = _sqrt_psd(cov_a)
    inner = np.linalg.eigvalsh((root_a @ cov_b @ root_a + (root_a @ cov_b @ root_a).T) / 2)
    cross = np.sum(np.sqrt(np.clip(inner, 0.0, None)))
    value = np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross
    return float(max(value, 0.0))


def histogram_distance(p, q, metric="chi2", eps=1e-6):
    """chi2 (same bin form as the sampling constraint), squared Euclidean, or
    Bhattacharyya -ln sum sqrt(p q); zero overlap gives ``math.inf``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histogram length mismatch: {p.shape} vs {q.shape}")
    if metric == "chi2":
        return float(chi2_distance(p, q, eps))
    if metric == "euclidean":
        return float(np.sum((p - q) ** 2))
    if metric == "bhattacharyya":
        bc = np.sum(np.sqrt(p * q))
        return math.inf if bc <= 0 else float(max(-np.log(bc), 0.0))
    raise ValueError(f"unknown histogram metric {metric!r}; expected one of {HIST_METRICS}")


def channel_histograms(img_u8, bins):
    """Per-channel normalized hard histograms of an 8-bit image on [0, 1]."""
    x = np.asarray(img_u8, dtype=np.float64) / MAX_INTENSITY
    if x.ndim == 2:
        x = x[..., None]
    out = []
    for c in range(x.shape[-1]):
        counts, _ = np.histogram(x[..., c], bins=bins, range=(0.0, 1.0))
        out.append(counts / counts.sum())
    return np.array(out)


class PerceptualMetric(Protocol):
    """Paired-image perceptual distance (e.g. LPIPS); no implementation ships here."""

    def __call__(self, a, b) -> float: ...


def lpips_unavailable(a, b):
    raise NotImplementedError("LPIPS needs pretrained network weights; pass a PerceptualMetric implementation")


def patch_features(img_u8, patch=8):
    """Smoke-test feature vector: mean-pooled flattened patch x patch luminance
    patches, scaled to [0, 1]. Not comparable to Inception-based FID."""
    x = np.asarray(img_u8, dtype=np.float64) / MAX_INTENSITY
    if x.ndim == 3:
        x = x @ np.array([0.299, 0.587, 0.114]) if x.shape[-1] == 3 else x[..., 0]
    h, w = (x.shape[0] // patch) * patch, (x.shape[1] // patch) * patch
    if h == 0 or w == 0:
        raise ValueError(f"image smaller than the {patch}x{patch} patch")
    tiles = x[:h, :w].reshape(h // patch, patch, w // patch, patch).transpose(0, 2, 1, 3)
    return tiles.reshape(-1, patch * patch).mean(axis=0)


# ---------------------------------------------------------------------------
# feature files and reports
# ---------------------------------------------------------------------------


def write_features(path, feats):
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"dim_{i}" for i in range(feats.shape[1])])
        w.writerows([[repr(float(v)) for v in row] for row in feats])


def read_features(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not all(h.startswith("dim_") for h in rows[0]):
        raise ValueError(f"{path}: expected a header row dim_0..dim_(k-1)")
    return np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)


@dataclass
class MetricReport:
    ids: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    fid: float = None
    hist_distances: dict = field(default_factory=dict)  # metric -> per-channel mean distances
    notes: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.ids)

    @property
    def mean_psnr(self):
        finite = [v for v in self.psnr if math.isfinite(v)]
        return float(np.mean(finite)) if finite else math.inf

    @property
    def infinite_psnr_count(self):
        return sum(1 for v in self.psnr if not math.isfinite(v))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "psnr_db", "ssim"])
            for sid, p, s in zip(self.ids, self.psnr, self.ssim):
                w.writerow([sid, "inf" if not math.isfinite(p) else f"{p:.6f}", f"{s:.6f}"])
            note = f"{self.infinite_psnr_count} identical pairs excluded" if self.infinite_psnr_count else ""
            w.writerow(["mean", "inf" if not math.isfinite(self.mean_psnr) else f"{self.mean_psnr:.6f}",
                        f"{self.mean_ssim:.6f}", note])
            if self.fid is not None:
                w.writerow(["fid", f"{self.fid:.6f}"])
            for metric, per_channel in self.hist_distances.items():
                w.writerow([f"hist_{metric}"] + [f"{v:.6g}" for v in per_channel])
            for note in self.notes:
                w.writerow(["note", note])


def evaluate_pairs(ids, preds, truths, window="gaussian11", bins=32, prior_hist=None):
    """Per-image PSNR/SSIM and mean per-channel histogram distances of 8-bit
    prediction/truth pairs. Distances are against ``prior_hist`` (C x B)
    when given, else against each truth image."""
    report = MetricReport()
    hd = {m: [] for m in HIST_METRICS}
    for sid, p, t in zip(ids, preds, truths):
        report.ids.append(sid)
        report.psnr.append(psnr(p, t))
        use = window if min(np.shape(p)[:2]) >= SSIM_WINDOW else "global"
        report.ssim.append(ssim(p, t, use))
        hp = channel_histograms(p, bins)
        hq = np.asarray(prior_hist) if prior_hist is not None else channel_histograms(t, bins)
        for m in HIST_METRICS:
            hd[m].append([histogram_distance(hp[c], hq[c], m) for c in range(hp.shape[0])])
    report.hist_distances = {m: np.mean(np.array(v), axis=0).tolist() for m, v in hd.items() if v}
    return report


def read_report(path):
    """Parse a report CSV back into plain per-row dicts (helper for tooling/tests)."""
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


__all__ = [
    "psnr",
    "ssim",
    "fid_from_features",
    "histogram_distance",
    "channel_histograms",
    "patch_features",
    "MetricReport",
    "PerceptualMetric",
    "evaluate_pairs",
    "read_features",
    "write_features",
]
