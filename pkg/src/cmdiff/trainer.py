"""Bidirectional diffusion training.

Every step draws one batch of aligned pairs and trains both directions on
it: the IR->VIS term noises the VIS image and conditions on IR, the VIS->IR
term does the reverse, and the weighted sum of the two noise-prediction
MSEs is minimised with AdamW.
"""

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import rng as rng_mod
from .conditioning import IR_TO_VIS, VIS_TO_IR
from .data_io import atomic_write_text, load_paired_dataset, stack_samples
from .denoiser import MODALITY_IR, MODALITY_VIS, DenoiserConfig, build_denoiser
from .errors import ConfigError, NumericError
from .schedule import DiffusionSchedule, build_linear_schedule

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("iteration", "epoch", "loss_ir_to_vis", "loss_vis_to_ir", "lr")
NORMALIZATION = {"image": "x / 127.5 - 1", "edges": "[0, 1]", "constraints": "(x + 1) / 2 clamped to [0, 1]"}


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.9
    lr_decay_every: int = 2000
    batch_size: int = 8
    total_iters: int = 1000
    lambda_ir_to_vis: float = 1.0
    lambda_vis_to_ir: float = 1.0
    weight_decay: float = 0.01
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    disable_tdg: bool = False
    disable_cfc: bool = False
    checkpoint_every: int = 1000
    edge_detector: str = "sobel"

    def validate(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.lambda_ir_to_vis < 0 or self.lambda_vis_to_ir < 0:
            raise ConfigError("direction loss weights must be >= 0")
        if self.batch_size < 1 or self.total_iters < 0 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be >= 1, total_iters >= 0")

    def lr_at(self, iteration: int) -> float:
        """Step-decayed learning rate after ``iteration`` completed steps."""
        return self.lr * self.lr_decay ** (iteration // self.lr_decay_every)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def to_nchw(x):
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(x, dtype=np.float32), -1, -3)))


def to_nhwc(x):
    return np.moveaxis(x.detach().cpu().numpy().astype(np.float64), -3, -1)


def condition(noisy_target, source, edges, use_edges=True):
    """Torch (N x C x H x W) counterpart of ``conditioning.assemble_input``."""
    parts = [noisy_target, source] + ([edges] if use_edges else [])
    return torch.cat(parts, dim=1)


class TorchSchedule:
    """float32 lookups of the numpy schedule for batched torch step indices."""

    def __init__(self, sched: DiffusionSchedule):
        self.sched = sched
        self.sqrt_ab = torch.tensor(np.sqrt(sched.alpha_bars), dtype=torch.float32)
        self.sqrt_1m_ab = torch.tensor(np.sqrt(1.0 - sched.alpha_bars), dtype=torch.float32)

    def q_sample(self, x0, t, eps):
        a = self.sqrt_ab[t - 1].view(-1, 1, 1, 1)
        b = self.sqrt_1m_ab[t - 1].view(-1, 1, 1, 1)
        return a * x0 + b * eps


def joint_loss(predictor, batch, t1, t2, eps1, eps2, tsched: TorchSchedule, cfg: TrainConfig, use_edges=True):
    """Weighted sum of the IR->VIS and VIS->IR noise-prediction MSEs.

    ``predictor(z, t, labels, source_modality)`` is the denoiser (or any
    stand-in with that signature). Both directions run as one stacked batch.
    Returns ``(loss, loss_ir_to_vis, loss_vis_to_ir)`` as tensors.
    """
    n = batch["ir"].shape[0]
    x_vis_t = tsched.q_sample(batch["vis"], t1, eps1)
    x_ir_t = tsched.q_sample(batch["ir"], t2, eps2)
    z = torch.cat(
        [
            condition(x_vis_t, batch["ir"], batch["edges_ir"], use_edges),
            condition(x_ir_t, batch["vis"], batch["edges_vis"], use_edges),
        ]
    )
    t = torch.cat([t1, t2])
    labels = torch.tensor([IR_TO_VIS.id] * n + [VIS_TO_IR.id] * n)
    modality = torch.tensor([MODALITY_IR] * n + [MODALITY_VIS] * n)
    pred = predictor(z, t, labels, modality)
    l1 = F.mse_loss(pred[:n], eps1)
    l2 = F.mse_loss(pred[n:], eps2)
    return cfg.lambda_ir_to_vis * l1 + cfg.lambda_vis_to_ir * l2, l1, l2


class TrainState:
    def __init__(self, model, cfg: TrainConfig, sched: DiffusionSchedule):
        self.model = model
        self.cfg = cfg
        self.sched = sched
        self.tsched = TorchSchedule(sched)
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.generator = rng_mod.torch_generator(cfg.seed, "train")
        self.iteration = 0

    def state_dict(self):
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "generator": self.generator.get_state(),
            "iteration": self.iteration,
        }

    def load_state_dict(self, d):
        self.model.load_state_dict(d["model"])
        self.optimizer.load_state_dict(d["optimizer"])
        self.generator.set_state(d["generator"])
        self.iteration = int(d["iteration"])


def new_state(cfg: TrainConfig, model_cfg: DenoiserConfig, sched: DiffusionSchedule):
    cfg.validate()
    model_cfg = DenoiserConfig.from_dict(
        {**model_cfg.to_dict(), "use_tdg": not cfg.disable_tdg, "use_cfc": not cfg.disable_cfc}
    )
    model = build_denoiser(model_cfg, seed=rng_mod.substream_seed(cfg.seed, "init"))
    return TrainState(model, cfg, sched)


def train_step(state: TrainState, batch):
    """One AdamW step on the joint loss. Returns a dict of python floats."""
    cfg, g = state.cfg, state.generator
    n = batch["ir"].shape[0]
    T = state.sched.T
    t1 = torch.randint(1, T + 1, (n,), generator=g)
    t2 = torch.randint(1, T + 1, (n,), generator=g)
    eps1 = torch.randn(batch["vis"].shape, generator=g)
    eps2 = torch.randn(batch["ir"].shape, generator=g)
    lr = cfg.lr_at(state.iteration)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    loss, l1, l2 = joint_loss(
        state.model, batch, t1, t2, eps1, eps2, state.tsched, cfg, use_edges=state.model.cfg.use_cfc
    )
    if not torch.isfinite(loss):
        snapshot = {
            "iteration": state.iteration,
            "t1": t1.tolist(),
            "t2": t2.tolist(),
            "loss_ir_to_vis": l1.item(),
            "loss_vis_to_ir": l2.item(),
        }
        raise NumericError(f"non-finite loss at iteration {state.iteration}", snapshot)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(state.model.parameters(), cfg.grad_clip)
    state.optimizer.step()
    state.iteration += 1
    return {"loss": loss.item(), "loss_ir_to_vis": l1.item(), "loss_vis_to_ir": l2.item(), "lr": lr}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_manifest(model_cfg: DenoiserConfig, sched: DiffusionSchedule, cfg: TrainConfig, iteration: int):
    return {
        "denoiser": model_cfg.to_dict(),
        "schedule": sched.to_dict(),
        "normalization": NORMALIZATION,
        "train": asdict(cfg),
        "iteration": iteration,
        "input_channels": model_cfg.input_channels,
        "direction_embedding": model_cfg.use_tdg,
        "cross_modality_features": model_cfg.use_cfc,
    }


def save_checkpoint(state: TrainState, path, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = state.state_dict()
    if extra:
        blob["extra"] = extra
    tmp = path.with_suffix(".pt.tmp")
    torch.save(blob, tmp)
    tmp.replace(path)
    manifest = checkpoint_manifest(state.model.cfg, state.sched, state.cfg, state.iteration)
    atomic_write_text(path.with_suffix(".json"), json.dumps(manifest, indent=2))
    return path


def read_manifest(path):
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_checkpoint(path):
    """Model (eval mode), schedule and sidecar manifest from a checkpoint."""
    path = Path(path)
    manifest = read_manifest(path)
    model_cfg = DenoiserConfig.from_dict(manifest["denoiser"])
    model = build_denoiser(model_cfg)
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model.load_state_dict(blob["model"])
    model.eval()
    return model, DiffusionSchedule.from_dict(manifest["schedule"]), manifest


def latest_checkpoint(out_dir):
    ckpts = sorted((Path(out_dir) / "checkpoints").glob("ckpt_*.pt"))
    return ckpts[-1] if ckpts else None


def config_diff(a: dict, b: dict, prefix=""):
    diffs = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            diffs += config_diff(va, vb, f"{prefix}{k}.")
        elif va != vb:
            diffs.append(f"{prefix}{k}: {va!r} != {vb!r}")
    return diffs


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _load_train_tensors(data_root, edge_detector):
    _, samples = load_paired_dataset(data_root, split="train", edge_detector=edge_detector)
    arrays = stack_samples(samples)
    return {k: to_nchw(arrays[k]) for k in ("ir", "vis", "edges_ir", "edges_vis")}, arrays["ids"]


def _write_loss_rows(path, rows):
    lines = [",".join(LOSS_COLUMNS)]
    for r in rows:
        lines.append(f"{r['iteration']},{r['epoch']},{r['loss_ir_to_vis']:.8g},{r['loss_vis_to_ir']:.8g},{r['lr']:.8g}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_loss_csv(path):
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k in ("iteration", "epoch") else float(v)) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def run_training(data, cfg: TrainConfig, model_cfg: DenoiserConfig, sched: DiffusionSchedule, out_dir,
                 resume=True, progress=None):
    """Train for ``cfg.total_iters`` steps, writing checkpoints and ``losses.csv``.

    ``data`` is a dataset root or a dict of N x C x H x W tensors (ir, vis,
    edges_ir, edges_vis). Resumes from the newest checkpoint in ``out_dir``
    when one exists and its configuration matches.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = data if isinstance(data, dict) else _load_train_tensors(data, cfg.edge_detector)[0]
    n = tensors["ir"].shape[0]
    if n == 0:
        raise ConfigError("training set is empty")
    if tensors["ir"].shape[-1] != model_cfg.image_size:
        raise ConfigError(f"data resolution {tensors['ir'].shape[-1]} != model image_size {model_cfg.image_size}")

    state = new_state(cfg, model_cfg, sched)
    rows, epoch, perm, pos, sums = [], 0, None, 0, [0.0, 0.0, 0]
    ckpt = latest_checkpoint(out_dir) if resume else None
    if ckpt is not None:
        want = checkpoint_manifest(state.model.cfg, sched, cfg, 0)
        have = read_manifest(ckpt)
        ignore = {"iteration", "train"}
        diffs = config_diff({k: v for k, v in have.items() if k not in ignore},
                            {k: v for k, v in want.items() if k not in ignore})
        tdiff = [d for d in config_diff(have["train"], want["train"]) if not d.startswith(("total_iters", "checkpoint_every"))]
        if diffs or tdiff:
            raise ConfigError("checkpoint does not match run config:\n  " + "\n  ".join(diffs + tdiff))
        blob = torch.load(ckpt, map_location="cpu", weights_only=False)
        state.load_state_dict(blob)
        extra = blob.get("extra", {})
        epoch, pos, sums = extra.get("epoch", 0), extra.get("pos", 0), list(extra.get("sums", sums))
        perm = torch.tensor(extra["perm"]) if extra.get("perm") is not None else None
        rows = [r for r in extra.get("rows", [])]
        log.info("resumed from %s at iteration %d", ckpt, state.iteration)

    loss_path = out_dir / "losses.csv"
    atomic_write_text(out_dir / "train_config.json", json.dumps(
        {"train": asdict(cfg), "denoiser": state.model.cfg.to_dict(), "schedule": sched.to_dict()}, indent=2))

    def snapshot():
        extra = {"epoch": epoch, "pos": pos, "sums": sums, "rows": rows,
                 "perm": perm.tolist() if perm is not None else None}
        return save_checkpoint(state, out_dir / "checkpoints" / f"ckpt_{state.iteration:07d}.pt", extra)

    while state.iteration < cfg.total_iters:
        if perm is None or pos >= n:
            perm = torch.randperm(n, generator=state.generator)
            pos = 0
        idx = perm[pos : pos + cfg.batch_size]
        pos += len(idx)
        batch = {k: v[idx] for k, v in tensors.items()}
        rec = train_step(state, batch)
        sums[0] += rec["loss_ir_to_vis"]
        sums[1] += rec["loss_vis_to_ir"]
        sums[2] += 1
        if pos >= n:
            rows.append({"iteration": state.iteration, "epoch": epoch, "loss_ir_to_vis": sums[0] / sums[2],
                         "loss_vis_to_ir": sums[1] / sums[2], "lr": rec["lr"]})
            _write_loss_rows(loss_path, rows)
            epoch, sums = epoch + 1, [0.0, 0.0, 0]
        if progress is not None:
            progress(state.iteration, rec)
        if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.total_iters:
            snapshot()
    if not loss_path.exists() or not rows:
        _write_loss_rows(loss_path, rows)
    return state, rows
