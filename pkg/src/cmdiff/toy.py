"""Desk-scale end-to-end profile: 200 synthetic 32x32 pairs, T = 200, the
desk denoiser, a few thousand AdamW steps on one CPU.

``ensure_toy_run`` is idempotent: it regenerates the dataset only when
missing and resumes training from the newest checkpoint, so an interrupted
run continues where it stopped.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

from .data_io import MANIFEST, generate_synthetic_pairs
from .denoiser import DESK
from .schedule import DESK_T, scaled_linear_schedule
from .trainer import TrainConfig, latest_checkpoint, run_training

log = logging.getLogger(__name__)

TOY_PAIRS = 200
TOY_RESOLUTION = 32
TOY_ITERS = 6000
TOY_TRAIN = TrainConfig(lr=5e-4, batch_size=8, total_iters=TOY_ITERS, checkpoint_every=1000, seed=0)


@dataclass
class ToyRun:
    data: Path
    run_dir: Path
    checkpoint: Path


def toy_schedule():
    return scaled_linear_schedule(DESK_T)


def ensure_toy_run(root, iters=TOY_ITERS, progress=None):
    root = Path(root)
    data = root / "data"
    if not (data / MANIFEST).is_file():
        generate_synthetic_pairs(data, TOY_PAIRS, TOY_RESOLUTION, seed=0)
    run_dir = root / "run"
    cfg = TrainConfig(**{**TOY_TRAIN.__dict__, "total_iters": iters})
    ckpt = latest_checkpoint(run_dir)
    if ckpt is None or int(ckpt.stem.split("_")[1]) < iters:
        log.info("training toy model to %d iterations in %s", iters, run_dir)
        run_training(data, cfg, DESK, toy_schedule(), run_dir, progress=progress)
        ckpt = latest_checkpoint(run_dir)
    return ToyRun(data, run_dir, ckpt)
