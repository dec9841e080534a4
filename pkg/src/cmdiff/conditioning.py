"""Network-input assembly: modality bookkeeping, gray->RGB replication, edge
maps and the channel-concatenated conditioned input.

Images here are numpy arrays laid out H x W x C with values in [-1, 1];
edge maps are H x W x 1 in [0, 1].
"""

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import IngestionError

C_VIS = 3
C_IR = 3
E_CHANNELS = 1
CANNY_THRESHOLDS = (0.1, 0.3)
CANNY_SIGMA = 1.0
# Largest Sobel magnitude for a [0, 1] luminance image (full-range step along a diagonal).
_SOBEL_MAX = 4.0 * np.sqrt(2.0)


class Modality(str, enum.Enum):
    IR = "ir"
    VIS = "vis"

    @property
    def other(self):
        return Modality.VIS if self is Modality.IR else Modality.IR

    @classmethod
    def parse(cls, value):
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown modality {value!r}; expected 'ir' or 'vis'") from None


@dataclass(frozen=True)
class Direction:
    """Translation direction; ``id`` 0 is IR->VIS and 1 is VIS->IR."""

    id: int

    def __post_init__(self):
        if self.id not in (0, 1):
            raise ValueError(f"direction label must be 0 or 1, got {self.id}")

    @property
    def source(self) -> Modality:
        return Modality.IR if self.id == 0 else Modality.VIS

    @property
    def target(self) -> Modality:
        return self.source.other

    @property
    def name(self) -> str:
        return "ir2vis" if self.id == 0 else "vis2ir"

    @classmethod
    def parse(cls, value):
        if isinstance(value, Direction):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        key = str(value).lower().replace("_", "").replace("-", "").replace("to", "2")
        if key == "ir2vis":
            return IR_TO_VIS
        if key == "vis2ir":
            return VIS_TO_IR
        raise ValueError(f"unknown direction {value!r}; expected ir2vis or vis2ir")

    @classmethod
    def to_target(cls, target: Modality):
        return IR_TO_VIS if Modality(target) is Modality.VIS else VIS_TO_IR


IR_TO_VIS = Direction(0)
VIS_TO_IR = Direction(1)


def replicate_gray_to_rgb(img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] != 1:
        raise ValueError(f"expected a single-channel image, got {img.shape[-1]} channels")
    return np.repeat(img, 3, axis=-1)


def luminance01(img):
    """Luminance on [0, 1] of an H x W x C image stored on [-1, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    x = np.clip((img + 1.0) / 2.0, 0.0, 1.0)
    if x.shape[-1] == 1:
        return x[..., 0]
    return x[..., 0] * 0.299 + x[..., 1] * 0.587 + x[..., 2] * 0.114


def sobel_edges(img):
    gx, gy = kernels.sobel(np.ascontiguousarray(luminance01(img)))
    mag = np.hypot(gx, gy) / _SOBEL_MAX
    return np.clip(mag, 0.0, 1.0)[..., None]


def canny_edges(img, thresholds=CANNY_THRESHOLDS, sigma=CANNY_SIGMA):
    low, high = thresholds
    lum = ndimage.gaussian_filter(luminance01(img), sigma, mode="nearest")
    gx, gy = kernels.sobel(np.ascontiguousarray(lum))
    mag = np.hypot(gx, gy) / _SOBEL_MAX
    thin = kernels.nonmax_suppress(mag, gx, gy)
    weak = thin >= low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros(thin.shape + (1,))
    strong_labels = np.unique(labels[thin >= high])
    keep = np.isin(labels, strong_labels[strong_labels > 0])
    return keep.astype(np.float64)[..., None]


def load_external_edges(path, sample_id=None, shape=None):
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing external edge map for sample {sample_id!r}: {path}")
    try:
        with Image.open(path) as im:
            edges = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise IngestionError(f"unreadable edge map for sample {sample_id!r}: {path}") from exc
    if shape is not None and edges.shape != tuple(shape):
        with Image.open(path) as im:
            im = im.convert("L").resize((shape[1], shape[0]), Image.BILINEAR)
            edges = np.asarray(im, dtype=np.float64) / 255.0
    return edges[..., None]


def detect_edges(img, detector="sobel", external_path=None, sample_id=None):
    """Edge map (H x W x 1, values in [0, 1]) with the selected detector.

    ``external`` reads an 8-bit grayscale file from ``external_path``.
    """
    if detector == "sobel":
        return sobel_edges(img)
    if detector == "canny":
        return canny_edges(img)
    if detector == "external":
        if external_path is None:
            raise IngestionError(f"no external edge map path given for sample {sample_id!r}")
        return load_external_edges(external_path, sample_id, shape=np.shape(img)[:2])
    raise ValueError(f"unknown edge detector {detector!r}")


def assemble_input(noisy_target, source, edges):
    """Concatenate [noisy target | source | edges] along the channel axis.

    Accepts H x W x C arrays or batches N x H x W x C.
    """
    noisy_target, source, edges = (np.asarray(a) for a in (noisy_target, source, edges))
    if noisy_target.shape[-1] != C_VIS or source.shape[-1] != C_IR:
        raise ValueError("noisy target and source must have 3 channels")
    if edges.shape[-1] != E_CHANNELS:
        raise ValueError(f"edge map must have {E_CHANNELS} channel")
    if not (noisy_target.shape[:-1] == source.shape[:-1] == edges.shape[:-1]):
        raise ValueError(
            f"spatial size mismatch: {noisy_target.shape[:-1]}, {source.shape[:-1]}, {edges.shape[:-1]}"
        )
    return np.concatenate([noisy_target, source, edges], axis=-1)


def split_input(z):
    """Inverse of :func:`assemble_input` by channel slicing."""
    return z[..., :C_VIS], z[..., C_VIS : C_VIS + C_IR], z[..., C_VIS + C_IR :]
