"""Constraint-guided reverse sampling and source-to-target translation.

Each reverse step predicts the noise, forms the clean-image estimate, takes
the Gaussian posterior of x_{t-1}, and shifts its mean against the gradient
of the constraint loss evaluated on that estimate:

    mean <- mean - s * var * grad_{x0} L_cons

The gradient is not propagated back through the denoiser.
"""

import logging

import numpy as np
import torch

from . import rng as rng_mod
from .conditioning import Direction, Modality, detect_edges
from .constraints import ConstraintSpec, constraint_loss
from .data_io import to_uint8
from .denoiser import MODALITY_IR, MODALITY_VIS
from .schedule import DiffusionSchedule, posterior_params, predict_x0
from .trainer import condition, to_nchw, to_nhwc

log = logging.getLogger(__name__)


def constraint_gradient(x0_hat, spec: ConstraintSpec):
    """Constraint loss and its gradient with respect to an estimate on [-1, 1].

    Statistics are taken on (x0 + 1) / 2; the chain rule contributes the 1/2.
    """
    y = np.clip((x0_hat + 1.0) / 2.0, 0.0, 1.0)
    loss, grad_y = constraint_loss(y, spec)
    inside = (x0_hat > -1.0) & (x0_hat < 1.0)
    return loss, np.where(inside, 0.5 * grad_y, 0.0)


def guided_reverse_step(x_t, t, eps_pred, sched: DiffusionSchedule, spec=None, noise=None, clamp=True,
                        guidance_sign=-1.0):
    """One reverse step from ``x_t`` (H x W x 3 or N x H x W x 3, float64).

    ``noise`` is the standard-normal draw for this step (ignored at t = 1).
    ``guidance_sign=+1`` reproduces the "mu + Sigma * grad" variant for
    comparison. Returns ``(x_prev, info)``.
    """
    x0 = predict_x0(x_t, eps_pred, t, sched, clamp=clamp)
    mean, var = posterior_params(x_t, x0, t, sched)
    info = {"x0": x0, "loss": None, "guided": False}
    if spec is not None and spec.active:
        loss, grad = constraint_gradient(x0, spec)
        if np.all(np.isfinite(grad)):
            mean = mean + guidance_sign * spec.guidance_scale * var * grad
            info.update(loss=loss, guided=True)
        else:
            log.warning("non-finite constraint gradient at t=%d; guidance skipped for this step", t)
    if t > 1:
        if noise is None:
            raise ValueError("noise is required for t > 1")
        return mean + np.sqrt(var) * noise, info
    return mean, info


def _trajectory_rngs(seed, n, first_index=0):
    base = rng_mod.substream_seed(seed, "sampling")
    return [np.random.default_rng(np.random.SeedSequence([base, first_index + i])) for i in range(n)]


@torch.no_grad()
def sample(model, sched: DiffusionSchedule, source, source_modality, label, edges=None, spec=None, seed=0,
           clamp=True, guidance_sign=-1.0, callback=None, first_index=0):
    """Run the full reverse chain t = T..1 for a batch of source images.

    ``source``: N x H x W x 3 on [-1, 1]. ``label`` is the direction id fed to
    the label embedding; it is normally the direction implied by
    ``source_modality`` but can be set independently. Trajectory ``i`` draws
    all of its noise from its own stream keyed by ``first_index + i``, so
    results do not depend on how a dataset is split into batches. Returns the final N x H x W x 3 float array.
    """
    source = np.asarray(source, dtype=np.float64)
    if source.ndim == 3:
        source = source[None]
    n = source.shape[0]
    modality = Modality(source_modality)
    use_edges = model.cfg.use_cfc
    if use_edges and edges is None:
        edges = np.stack([detect_edges(s, "sobel") for s in source])
    src_t = to_nchw(source)
    edge_t = to_nchw(edges) if use_edges else None
    mod_id = MODALITY_IR if modality is Modality.IR else MODALITY_VIS
    rngs = _trajectory_rngs(seed, n, first_index)
    x = np.stack([r.standard_normal(source.shape[1:]) for r in rngs])
    model.eval()
    for t in range(sched.T, 0, -1):
        z = condition(to_nchw(x), src_t, edge_t, use_edges)
        eps = to_nhwc(model(z, torch.full((n,), t), torch.full((n,), int(label)), torch.full((n,), mod_id)))
        noise = np.stack([r.standard_normal(source.shape[1:]) for r in rngs]) if t > 1 else None
        x, info = guided_reverse_step(x, t, eps, sched, spec, noise, clamp, guidance_sign)
        if callback is not None:
            callback(t, x, info)
    return np.clip(x, -1.0, 1.0)


def translate(model, sched: DiffusionSchedule, source, direction, spec=None, seed=0, edges=None,
              source_modality=None, **kwargs):
    """Translate source image(s) along ``direction``; returns 8-bit N x H x W x 3.

    Raises ``ValueError`` when ``source_modality`` is given and is not the
    source side of ``direction``.
    """
    direction = Direction.parse(direction)
    if source_modality is not None and Modality(source_modality) is not direction.source:
        raise ValueError(
            f"direction {direction.name} expects a {direction.source.value} source, got {Modality(source_modality).value}"
        )
    size = np.shape(source)[-2]
    if size != model.cfg.image_size:
        raise ValueError(f"source is {size}px but the checkpoint was trained at {model.cfg.image_size}px")
    out = sample(model, sched, source, direction.source, direction.id, edges=edges, spec=spec, seed=seed, **kwargs)
    return to_uint8(out)
