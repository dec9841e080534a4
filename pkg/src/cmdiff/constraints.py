"""Target-modality statistical priors and the differentiable constraint
losses used to steer sampling.

All losses take images on [0, 1], shaped H x W x 3 or N x H x W x 3, and
return per-image values (scalar for a single image). Gradients are analytic,
so no autodiff framework is involved.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError

METRICS = ("chi2", "euclidean", "bhattacharyya")
DEFAULT_BINS = 32
DEFAULT_LAMBDA = 20.0
DEFAULT_EPS = 1e-6


# ---------------------------------------------------------------------------
# histogram distances: value and gradient with respect to the first argument
# ---------------------------------------------------------------------------


def chi2_distance(p, q, eps=DEFAULT_EPS):
    """sum_i (p_i - q_i)^2 / (p_i + q_i + eps) over the last axis."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    return np.sum((p - q) ** 2 / (p + q + eps), axis=-1)


def _chi2_grad(p, q, eps):
    s = p + q + eps
    return (p - q) * (p + 3 * q + 2 * eps) / s**2


def _euclidean(p, q):
    return np.sum((p - q) ** 2, axis=-1), 2.0 * (p - q)


def _bhattacharyya_smoothed(p, q, eps):
    # -ln of the overlap of (p + eps) and (q + eps), rescaled so equal
    # histograms give exactly 0; finite gradient where p_i = 0.
    bins = p.shape[-1]
    root = np.sqrt((p + eps) * (q + eps))
    overlap = np.sum(root, axis=-1, keepdims=True) / (1.0 + bins * eps)
    value = -np.log(overlap[..., 0])
    grad = -0.5 * np.sqrt((q + eps) / (p + eps)) / (overlap * (1.0 + bins * eps))
    return value, grad


def histogram_loss(p, q, metric="chi2", eps=DEFAULT_EPS):
    """Distance between predicted histograms ``p`` and priors ``q`` (last axis
    = bins) and its gradient with respect to ``p``."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if metric == "chi2":
        return chi2_distance(p, q, eps), _chi2_grad(p, q, eps)
    if metric == "euclidean":
        return _euclidean(p, q)
    if metric == "bhattacharyya":
        return _bhattacharyya_smoothed(p, q, eps)
    raise ConfigError(f"unknown histogram metric {metric!r}; expected one of {METRICS}")


# ---------------------------------------------------------------------------
# priors
# ---------------------------------------------------------------------------


@dataclass
class ConstraintSpec:
    prior_hist: np.ndarray  # 3 x B, rows sum to 1
    prior_mean: np.ndarray  # 3
    prior_std: np.ndarray  # 3
    lambda_ccl: float = DEFAULT_LAMBDA
    lambda_scl: float = DEFAULT_LAMBDA
    eps: float = DEFAULT_EPS
    metric: str = "chi2"
    guidance_scale: float = 1.0
    modality: str = ""
    pixel_count: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.prior_hist = np.asarray(self.prior_hist, dtype=np.float64)
        self.prior_mean = np.asarray(self.prior_mean, dtype=np.float64)
        self.prior_std = np.asarray(self.prior_std, dtype=np.float64)
        self.validate()

    @property
    def bins(self) -> int:
        return self.prior_hist.shape[-1]

    def validate(self):
        if self.prior_hist.ndim != 2 or self.prior_hist.shape[0] != 3:
            raise ConfigError(f"prior_hist must be 3 x B, got {self.prior_hist.shape}")
        if self.bins < 2:
            raise ConfigError("need at least 2 histogram bins")
        if np.any(np.abs(self.prior_hist.sum(axis=1) - 1.0) > 1e-9) or np.any(self.prior_hist < 0):
            raise ConfigError("prior histograms must be non-negative and sum to 1")
        if self.prior_mean.shape != (3,) or self.prior_std.shape != (3,) or np.any(self.prior_std < 0):
            raise ConfigError("prior moments must be 3-vectors with std >= 0")
        if self.lambda_ccl < 0 or self.lambda_scl < 0:
            raise ConfigError("constraint weights must be >= 0")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown histogram metric {self.metric!r}; expected one of {METRICS}")

    def with_(self, **changes):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return ConstraintSpec(**d)

    @property
    def active(self) -> bool:
        return self.guidance_scale != 0 and (self.lambda_ccl > 0 or self.lambda_scl > 0)

    def to_dict(self):
        return {
            "bins": self.bins,
            "modality": self.modality,
            "prior_hist": self.prior_hist.tolist(),
            "prior_mean": self.prior_mean.tolist(),
            "prior_std": self.prior_std.tolist(),
            "lambda_ccl": self.lambda_ccl,
            "lambda_scl": self.lambda_scl,
            "eps": self.eps,
            "metric": self.metric,
            "guidance_scale": self.guidance_scale,
            "pixel_count": self.pixel_count,
        }

    @classmethod
    def from_dict(cls, d):
        spec = cls(
            prior_hist=d["prior_hist"],
            prior_mean=d["prior_mean"],
            prior_std=d["prior_std"],
            lambda_ccl=float(d.get("lambda_ccl", DEFAULT_LAMBDA)),
            lambda_scl=float(d.get("lambda_scl", DEFAULT_LAMBDA)),
            eps=float(d.get("eps", DEFAULT_EPS)),
            metric=d.get("metric", "chi2"),
            guidance_scale=float(d.get("guidance_scale", 1.0)),
            modality=d.get("modality", ""),
            pixel_count=int(d.get("pixel_count", 0)),
        )
        if "bins" in d and int(d["bins"]) != spec.bins:
            raise ConfigError(f"bins field {d['bins']} disagrees with histogram length {spec.bins}")
        return spec

    def save(self, path):
        from .data_io import atomic_write_text

        atomic_write_text(path, json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def hard_histogram(values, bins):
    """Normalized B-bin histogram of [0, 1] values (last bin closed)."""
    counts, _ = np.histogram(np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return counts / max(counts.sum(), 1)


def fit_constraints(images, modality="", bins=DEFAULT_BINS, **spec_kwargs):
    """Pool per-channel histograms and moments over every pixel of ``images``.

    ``images`` is an iterable of H x W x 3 arrays on [-1, 1] (or one stacked
    N x H x W x 3 array). Moments are merged per image (Chan et al.) so large
    datasets never need to sit in memory at once.
    """
    if bins < 2:
        raise ConfigError("need at least 2 histogram bins")
    counts = np.zeros((3, bins))
    n_total, mean, m2 = 0, np.zeros(3), np.zeros(3)
    for img in images:
        y = np.clip((np.asarray(img, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0).reshape(-1, 3)
        n = y.shape[0]
        for c in range(3):
            counts[c] += np.histogram(y[:, c], bins=bins, range=(0.0, 1.0))[0]
        mu = y.mean(axis=0)
        ssd = ((y - mu) ** 2).sum(axis=0)
        delta = mu - mean
        total = n_total + n
        mean = mean + delta * n / total
        m2 = m2 + ssd + delta**2 * n_total * n / total
        n_total = total
    if n_total == 0:
        raise ConfigError("cannot fit constraints on an empty dataset")
    hist = counts / counts.sum(axis=1, keepdims=True)
    return ConstraintSpec(
        prior_hist=hist,
        prior_mean=mean,
        prior_std=np.sqrt(m2 / n_total),
        modality=str(getattr(modality, "value", modality)),
        pixel_count=n_total,
        **spec_kwargs,
    )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _rows(y):
    """(N, H, W, 3) -> contiguous (N * 3, H * W) channel rows."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 3
    if single:
        y = y[None]
    if y.shape[-1] != 3:
        raise ValueError(f"expected 3-channel images, got shape {y.shape}")
    n = y.shape[0]
    rows = np.ascontiguousarray(np.moveaxis(y, -1, 1).reshape(n * 3, -1))
    return rows, y.shape, single


def _unrows(g, shape):
    n = shape[0]
    return np.moveaxis(g.reshape(n, 3, *shape[1:-1]), 1, -1)


def _finish(value, single):
    return float(value[0]) if single else value


def soft_histogram(values, bins):
    """Differentiable histogram of one channel of [0, 1] values."""
    if bins < 2:
        raise ConfigError("need at least 2 histogram bins")
    x = np.ascontiguousarray(np.asarray(values, dtype=np.float64).reshape(1, -1))
    return kernels.soft_histogram(x, bins)[0]


def soft_histogram_grad(values, grad_hist):
    """Vector-Jacobian product of :func:`soft_histogram`: d(sum g_i h_i)/dx."""
    x = np.ascontiguousarray(np.asarray(values, dtype=np.float64).reshape(1, -1))
    g = np.ascontiguousarray(np.asarray(grad_hist, dtype=np.float64).reshape(1, -1))
    return kernels.soft_histogram_grad(x, g)[0].reshape(np.shape(values))


def _ccl(rows, n, spec, want_grad):
    h = kernels.soft_histogram(rows, spec.bins)
    prior = np.tile(spec.prior_hist, (n, 1))
    d, dh = histogram_loss(h, prior, spec.metric, spec.eps)
    value = d.reshape(n, 3).sum(axis=1)
    grad = kernels.soft_histogram_grad(rows, np.ascontiguousarray(dh)) if want_grad else None
    return value, grad


def _scl(rows, n, spec, want_grad):
    p = rows.shape[1]
    mu = rows.mean(axis=1)
    centered = rows - mu[:, None]
    sd = np.sqrt((centered**2).mean(axis=1))
    mu_gap = mu - np.tile(spec.prior_mean, n)
    sd_gap = sd - np.tile(spec.prior_std, n)
    value = (np.abs(mu_gap) + np.abs(sd_gap)).reshape(n, 3).sum(axis=1)
    grad = None
    if want_grad:
        inv_sd = np.divide(1.0, sd, out=np.zeros_like(sd), where=sd > 0)
        grad = np.sign(mu_gap)[:, None] / p + (np.sign(sd_gap) * inv_sd)[:, None] * centered / p
    return value, grad


def channel_constraint_loss(y, spec: ConstraintSpec):
    """Histogram distance between soft per-channel histograms and the priors, summed over channels."""
    rows, shape, single = _rows(y)
    value, _ = _ccl(rows, shape[0], spec, False)
    return _finish(value, single)


def statistical_constraint_loss(y, spec: ConstraintSpec):
    """Sum over channels of |mean gap| + |std gap| against the priors."""
    rows, shape, single = _rows(y)
    value, _ = _scl(rows, shape[0], spec, False)
    return _finish(value, single)


def constraint_loss(y, spec: ConstraintSpec):
    """``lambda_ccl * L_ccl + lambda_scl * L_scl`` and its gradient w.r.t. ``y``."""
    rows, shape, single = _rows(y)
    n = shape[0]
    value = np.zeros(n)
    grad = np.zeros_like(rows)
    if spec.lambda_ccl > 0:
        v, g = _ccl(rows, n, spec, True)
        value += spec.lambda_ccl * v
        grad += spec.lambda_ccl * g
    if spec.lambda_scl > 0:
        v, g = _scl(rows, n, spec, True)
        value += spec.lambda_scl * v
        grad += spec.lambda_scl * g
    grad = _unrows(grad, shape)
    if single:
        return float(value[0]), grad[0]
    return value, grad
