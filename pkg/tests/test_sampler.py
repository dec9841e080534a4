import logging

import numpy as np
import pytest

from cmdiff import sampler as sampler_mod
from cmdiff.conditioning import IR_TO_VIS, VIS_TO_IR, Modality
from cmdiff.constraints import fit_constraints
from cmdiff.denoiser import SMOKE, build_denoiser
from cmdiff.sampler import guided_reverse_step, sample, translate
from cmdiff.schedule import posterior_params, predict_x0, scaled_linear_schedule

SCHED = scaled_linear_schedule(8)


@pytest.fixture(scope="module")
def model():
    return build_denoiser(SMOKE, seed=1)


@pytest.fixture(scope="module")
def sources():
    rng = np.random.default_rng(0)
    return rng.uniform(-1, 1, (3, 16, 16, 3))


@pytest.fixture(scope="module")
def spec(sources):
    return fit_constraints(np.random.default_rng(1).uniform(-1, 0, (4, 16, 16, 3)), "vis", bins=16)


def test_unguided_step_is_posterior_sample():
    rng = np.random.default_rng(2)
    x, eps, noise = rng.standard_normal((3, 4, 4, 3))
    out, info = guided_reverse_step(x, 5, eps, SCHED, None, noise)
    mean, var = posterior_params(x, predict_x0(x, eps, 5, SCHED, clamp=True), 5, SCHED)
    np.testing.assert_allclose(out, mean + np.sqrt(var) * noise)
    assert not info["guided"]
    a, _ = guided_reverse_step(x, 1, eps, SCHED, None, noise)
    b, _ = guided_reverse_step(x, 1, eps, SCHED, None, -noise)
    np.testing.assert_array_equal(a, b)


def test_zero_weights_reduce_to_unguided(spec):
    rng = np.random.default_rng(3)
    x, eps, noise = rng.standard_normal((3, 4, 4, 3))
    base, _ = guided_reverse_step(x, 4, eps, SCHED, None, noise)
    for s in (spec.with_(lambda_ccl=0.0, lambda_scl=0.0), spec.with_(guidance_scale=0.0)):
        out, info = guided_reverse_step(x, 4, eps, SCHED, s, noise)
        np.testing.assert_array_equal(out, base)
        assert not info["guided"]


def test_guidance_moves_against_gradient(spec):
    rng = np.random.default_rng(4)
    x, eps = rng.standard_normal((2, 16, 16, 3))
    base, _ = guided_reverse_step(x, 1, eps, SCHED, None)
    out, info = guided_reverse_step(x, 1, eps, SCHED, spec.with_(lambda_ccl=0.0))
    assert info["guided"]
    # t = 1 has zero variance; use t = 5 instead
    base, _ = guided_reverse_step(x, 5, eps, SCHED, None, np.zeros_like(x))
    out, _ = guided_reverse_step(x, 5, eps, SCHED, spec, np.zeros_like(x))
    _, grad = sampler_mod.constraint_gradient(predict_x0(x, eps, 5, SCHED, clamp=True), spec)
    _, var = posterior_params(x, x, 5, SCHED)
    np.testing.assert_allclose(out - base, -var * grad, atol=1e-14)


def test_non_finite_gradient_skips(spec, monkeypatch, caplog):
    rng = np.random.default_rng(5)
    x, eps, noise = rng.standard_normal((3, 4, 4, 3))
    monkeypatch.setattr(sampler_mod, "constraint_loss", lambda y, s: (0.0, np.full(y.shape, np.nan)))
    with caplog.at_level(logging.WARNING):
        out, info = guided_reverse_step(x, 3, eps, SCHED, spec, noise)
    base, _ = guided_reverse_step(x, 3, eps, SCHED, None, noise)
    np.testing.assert_array_equal(out, base)
    assert not info["guided"] and "skipped" in caplog.text


def test_lambda_zero_translate_bit_identical(model, sources, spec):
    a = translate(model, SCHED, sources, IR_TO_VIS, spec=None, seed=3)
    b = translate(model, SCHED, sources, IR_TO_VIS, spec=spec.with_(lambda_ccl=0.0, lambda_scl=0.0), seed=3)
    assert a.dtype == np.uint8 and a.shape == (3, 16, 16, 3)
    np.testing.assert_array_equal(a, b)


def test_guided_divergence_starts_at_first_guided_step(model, sources, spec):
    trajs = []
    for s in (None, spec):
        xs = []
        sample(model, SCHED, sources[:1], Modality.IR, 0, spec=s, seed=0, callback=lambda t, x, i: xs.append(x.copy()))
        trajs.append(xs)
    # same noise draws, and the first reverse step (t = T) is already guided
    assert len(trajs[0]) == len(trajs[1]) == SCHED.T
    assert not np.array_equal(trajs[0][0], trajs[1][0])
    diffs = [np.abs(a - b).max() for a, b in zip(*trajs)]
    assert all(d > 0 for d in diffs)


def test_trajectories_independent_of_batch(model, sources):
    batch = sample(model, SCHED, sources, Modality.VIS, 1, seed=9)
    alone = sample(model, SCHED, sources[2:], Modality.VIS, 1, seed=9)
    first = sample(model, SCHED, sources[:1], Modality.VIS, 1, seed=9)
    np.testing.assert_allclose(batch[0], first[0], atol=1e-5)
    assert not np.allclose(batch[2], alone[0], atol=1e-3)  # index 0 stream, not index 2
    offset = sample(model, SCHED, sources[2:], Modality.VIS, 1, seed=9, first_index=2)
    np.testing.assert_allclose(batch[2], offset[0], atol=1e-5)


def test_translate_errors(model, sources):
    with pytest.raises(ValueError, match="expects a ir source"):
        translate(model, SCHED, sources, IR_TO_VIS, source_modality=Modality.VIS)
    with pytest.raises(ValueError):
        translate(model, SCHED, sources[:, :8, :8], VIS_TO_IR)
