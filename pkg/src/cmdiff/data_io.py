"""Paired IR/VIS datasets on disk, the procedural synthetic generator, and
8-bit image persistence.

On-disk layout::

    root/
      manifest.json          {root, resolution, train: [ids], test: [ids]}
      ir/<id>.png            8-bit grayscale
      vis/<id>.png           8-bit RGB
      edges_ir/<id>.png      optional precomputed edge maps
      edges_vis/<id>.png
"""

import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .conditioning import Modality, detect_edges, replicate_gray_to_rgb
from .errors import IngestionError

MANIFEST = "manifest.json"
DESK_RESOLUTION = 32
TRAIN_FRACTION = 0.9


def to_unit_range(u8):
    """8-bit [0, 255] -> [-1, 1]."""
    return np.asarray(u8, dtype=np.float64) / 127.5 - 1.0


def to_uint8(x):
    """[-1, 1] -> 8-bit via (x + 1) * 127.5, clamped, rounded half-up."""
    v = (np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.floor(v + 0.5).clip(0, 255).astype(np.uint8)


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_image(tensor, path):
    """Write an H x W x C image on [-1, 1] (or uint8) as an 8-bit PNG; C == 1
    is stored as grayscale."""
    arr = np.asarray(tensor)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_image_u8(path, resolution=None, gray=False):
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("L" if gray else "RGB")
            if resolution is not None and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    return arr[..., None] if arr.ndim == 2 else arr


def load_image(path, resolution=None, gray=False):
    """Read an 8-bit PNG as H x W x C on [-1, 1]."""
    return to_unit_range(load_image_u8(path, resolution, gray))


@dataclass
class PairedSample:
    id: str
    ir: np.ndarray  # H x W x 3, identical channels
    vis: np.ndarray  # H x W x 3
    edges_ir: np.ndarray  # H x W x 1 on [0, 1]
    edges_vis: np.ndarray

    def image(self, modality):
        return self.ir if Modality(modality) is Modality.IR else self.vis

    def edges(self, modality):
        return self.edges_ir if Modality(modality) is Modality.IR else self.edges_vis


@dataclass
class DatasetManifest:
    root: Path
    resolution: int
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def ids(self):
        return sorted(self.train + self.test)

    @property
    def N(self):
        return len(self.train) + len(self.test)

    def to_dict(self):
        return {"root": str(self.root), "resolution": self.resolution, "train": self.train, "test": self.test}

    def save(self):
        atomic_write_text(Path(self.root) / MANIFEST, json.dumps(self.to_dict(), indent=2))

    def validate(self):
        train, test = set(self.train), set(self.test)
        if train & test:
            raise IngestionError(f"ids in both splits: {sorted(train & test)}")
        if len(train) != len(self.train) or len(test) != len(self.test):
            raise IngestionError("duplicate ids in manifest")


def split_ids(ids, train_fraction=TRAIN_FRACTION):
    ids = sorted(ids)
    n_train = int(round(len(ids) * train_fraction))
    if len(ids) > 1:
        n_train = min(max(n_train, 1), len(ids) - 1)
    return ids[:n_train], ids[n_train:]


def _scan(root):
    root = Path(root)
    ir_dir, vis_dir = root / "ir", root / "vis"
    if not ir_dir.is_dir() or not vis_dir.is_dir():
        raise IngestionError(f"{root} must contain ir/ and vis/ subdirectories")
    ir = {p.stem for p in ir_dir.glob("*.png")}
    vis = {p.stem for p in vis_dir.glob("*.png")}
    orphans = sorted(ir ^ vis)
    if orphans:
        details = [f"{i} (only in {'ir' if i in ir else 'vis'}/)" for i in orphans]
        raise IngestionError("unmatched files: " + ", ".join(details))
    return sorted(ir)


def load_manifest(root, resolution=None):
    """Manifest from ``root/manifest.json``, or built from the directory scan."""
    root = Path(root)
    ids = _scan(root)
    mf = root / MANIFEST
    if mf.is_file():
        d = json.loads(mf.read_text())
        m = DatasetManifest(root, int(resolution or d["resolution"]), list(d["train"]), list(d["test"]))
        missing = sorted(set(m.ids) - set(ids))
        if missing:
            raise IngestionError(f"manifest lists ids without image files: {missing}")
    else:
        if resolution is None:
            first = load_image_u8(root / "vis" / f"{ids[0]}.png") if ids else None
            resolution = first.shape[0] if first is not None else DESK_RESOLUTION
        train, test = split_ids(ids)
        m = DatasetManifest(root, int(resolution), train, test)
    m.validate()
    return m


def load_sample(root, sample_id, resolution, edge_detector="sobel"):
    root = Path(root)
    ir = replicate_gray_to_rgb(load_image(root / "ir" / f"{sample_id}.png", resolution, gray=True))
    vis = load_image(root / "vis" / f"{sample_id}.png", resolution)
    if edge_detector == "external":
        e_ir = detect_edges(ir, "external", root / "edges_ir" / f"{sample_id}.png", sample_id)
        e_vis = detect_edges(vis, "external", root / "edges_vis" / f"{sample_id}.png", sample_id)
    else:
        e_ir = detect_edges(ir, edge_detector)
        e_vis = detect_edges(vis, edge_detector)
    return PairedSample(sample_id, ir, vis, e_ir, e_vis)


def load_paired_dataset(root, resolution=None, split=None, edge_detector="sobel"):
    """Return ``(manifest, iterator of PairedSample)`` in sorted-id order.

    ``split`` restricts iteration to "train" or "test"; default is all ids.
    """
    manifest = load_manifest(root, resolution)
    ids = manifest.ids if split is None else sorted(getattr(manifest, split))

    def iterate():
        for sid in ids:
            yield load_sample(manifest.root, sid, manifest.resolution, edge_detector)

    return manifest, iterate()


def stack_samples(samples):
    """Arrays (N x H x W x C) for ir, vis, edges_ir, edges_vis, plus the ids."""
    samples = list(samples)
    if not samples:
        raise IngestionError("no samples to stack")
    return {
        "ids": [s.id for s in samples],
        "ir": np.stack([s.ir for s in samples]),
        "vis": np.stack([s.vis for s in samples]),
        "edges_ir": np.stack([s.edges_ir for s in samples]),
        "edges_vis": np.stack([s.edges_vis for s in samples]),
    }


# ---------------------------------------------------------------------------
# synthetic paired-modality generator
# ---------------------------------------------------------------------------

# Object classes: VIS colour (RGB on [0, 1]) and IR emissivity gray level.
OBJECT_CLASSES = (
    {"name": "vehicle", "rgb": (0.80, 0.15, 0.12), "ir": 0.92},
    {"name": "roof", "rgb": (0.20, 0.30, 0.85), "ir": 0.70},
    {"name": "tarp", "rgb": (0.95, 0.85, 0.20), "ir": 0.55},
    {"name": "pool", "rgb": (0.15, 0.65, 0.70), "ir": 0.08},
)
VIS_GROUND = (0.55, 0.62, 0.48)
IR_GROUND = 0.25
IR_NOISE = 0.02
IR_BLUR = 0.6
SHAPES = ("rect", "ellipse")


def _smooth_field(rng, res, scale):
    coarse = rng.standard_normal((max(2, res // scale), max(2, res // scale)))
    f = ndimage.zoom(coarse, res / coarse.shape[0], order=1)[:res, :res]
    return f / (np.abs(f).max() + 1e-12)


def render_scene(rng, res):
    """One synthetic pair as float arrays on [0, 1]: vis (HxWx3), ir (HxW), class-id map.

    ``labels`` holds -1 for background and the object class index elsewhere.
    """
    tex = _smooth_field(rng, res, 4)
    fine = rng.standard_normal((res, res)) * 0.03
    vis = np.empty((res, res, 3))
    for c in range(3):
        vis[..., c] = VIS_GROUND[c] + 0.08 * tex + fine
    ir = IR_GROUND + 0.05 * tex
    labels = -np.ones((res, res), dtype=np.int64)
    yy, xx = np.mgrid[0:res, 0:res]
    for _ in range(rng.integers(1, 4)):
        k = int(rng.integers(len(OBJECT_CLASSES)))
        size = rng.integers(res // 5, res // 3 + 1, size=2)
        cy, cx = rng.integers(size // 2 + 1, res - size // 2 - 1)
        if SHAPES[int(rng.integers(len(SHAPES)))] == "rect":
            mask = (np.abs(yy - cy) <= size[0] / 2) & (np.abs(xx - cx) <= size[1] / 2)
        else:
            mask = ((yy - cy) / (size[0] / 2)) ** 2 + ((xx - cx) / (size[1] / 2)) ** 2 <= 1.0
        labels[mask] = k
        shade = 1.0 + rng.uniform(-0.05, 0.05)
        for c in range(3):
            vis[..., c][mask] = OBJECT_CLASSES[k]["rgb"][c] * shade
        ir[mask] = OBJECT_CLASSES[k]["ir"]
    ir = ndimage.gaussian_filter(ir, IR_BLUR, mode="nearest")
    # Object interiors stay constant under the blur; noise is added after it.
    ir = ir + rng.standard_normal(ir.shape) * IR_NOISE
    return np.clip(vis, 0, 1), np.clip(ir, 0, 1), labels


def generate_synthetic_pairs(out, count, resolution=DESK_RESOLUTION, seed=0, with_edges=False):
    """Write ``count`` procedural IR/VIS pairs plus a manifest under ``out``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = Path(out)
    for sub in ("ir", "vis"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = max(4, len(str(count - 1)))
    ids = []
    for i in range(count):
        sid = f"{i:0{width}d}"
        vis, ir, _ = render_scene(rng, resolution)
        save_image(np.floor(vis * 255 + 0.5).astype(np.uint8), out / "vis" / f"{sid}.png")
        save_image(np.floor(ir * 255 + 0.5).astype(np.uint8), out / "ir" / f"{sid}.png")
        if with_edges:
            for mod, img in (("ir", replicate_gray_to_rgb(ir * 2 - 1)), ("vis", vis * 2 - 1)):
                e = detect_edges(img, "sobel")
                save_image(np.floor(e * 255 + 0.5).astype(np.uint8), out / f"edges_{mod}" / f"{sid}.png")
        ids.append(sid)
    train, test = split_ids(ids)
    manifest = DatasetManifest(out, resolution, train, test)
    manifest.save()
    return manifest
