import os
import subprocess
import sys

import numpy as np
import pytest

from cmdiff.constraints import (
    ConstraintSpec,
    channel_constraint_loss,
    constraint_loss,
    fit_constraints,
    histogram_loss,
    soft_histogram,
    soft_histogram_grad,
    statistical_constraint_loss,
)
from cmdiff.errors import ConfigError


def spec_from(hist, mean=(0.5, 0.5, 0.5), std=(0.1, 0.1, 0.1), **kw):
    hist = np.asarray(hist, dtype=float)
    if hist.ndim == 1:
        hist = np.tile(hist, (3, 1))
    return ConstraintSpec(prior_hist=hist, prior_mean=mean, prior_std=std, **kw)


def two_point_image(lo, hi, shape=(4, 4)):
    """Half the pixels at lo, half at hi, identical on all 3 channels."""
    y = np.full(shape, lo, dtype=float)
    y.reshape(-1)[::2] = hi
    return np.repeat(y[..., None], 3, axis=-1)


def test_soft_histogram_kernel_cases():
    B = 8
    c = (np.arange(B) + 0.5) / B
    h = soft_histogram(np.full(10, c[3]), B)
    np.testing.assert_allclose(h, np.eye(B)[3], atol=1e-15)
    h = soft_histogram(np.array([(c[3] + c[4]) / 2]), B)
    np.testing.assert_allclose(h[[3, 4]], [0.5, 0.5], atol=1e-15)
    x = np.random.default_rng(0).random(64)
    assert soft_histogram(x, B).sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ConfigError):
        soft_histogram(x, 1)


def test_soft_histogram_gradient_fd():
    rng = np.random.default_rng(1)
    B, h = 8, 1e-4
    x = rng.uniform(0.08, 0.92, 64)
    g = rng.standard_normal(B)
    analytic = soft_histogram_grad(x, g)
    c = (np.arange(B) + 0.5) / B
    for i in range(x.size):
        if np.min(np.abs(x[i] - c)) < 2 * h:
            continue  # kink
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (g @ soft_histogram(xp, B) - g @ soft_histogram(xm, B)) / (2 * h)
        assert abs(fd - analytic[i]) <= 1e-4 * max(abs(fd), 1e-8) + 1e-10


def test_ccl_hand_example():
    # pixels at the two bin centers, one each -> histogram (0.5, 0.5)
    y = two_point_image(0.25, 0.75)
    spec = spec_from([0.25, 0.75])
    one_channel = 0.0625 / 0.75 + 0.0625 / 1.25
    assert one_channel == pytest.approx(0.133333, abs=1e-6)
    assert channel_constraint_loss(y, spec) == pytest.approx(3 * one_channel, abs=1e-6)
    assert channel_constraint_loss(y, spec) == pytest.approx(0.4, abs=1e-6)
    assert channel_constraint_loss(y, spec_from([0.5, 0.5])) == 0.0


def test_scl_hand_example():
    y = two_point_image(0.4, 0.6)  # mean 0.5, std 0.1 per channel
    spec = spec_from([0.5, 0.5], mean=(0.4,) * 3, std=(0.0,) * 3)
    assert statistical_constraint_loss(y, spec) == pytest.approx(0.6, abs=1e-12)
    spec = spec_from([0.5, 0.5], mean=(0.5,) * 3, std=(0.1,) * 3)
    assert statistical_constraint_loss(y, spec) == pytest.approx(0.0, abs=1e-12)


def test_combined_loss_and_zero_weights():
    y = two_point_image(0.25, 0.75)
    # ccl example: 0.4; moments (0.5, 0.25) vs (0.4, 0.15) -> 3 * 0.2 = 0.6
    spec = spec_from([0.25, 0.75], mean=(0.4,) * 3, std=(0.15,) * 3)
    value, _ = constraint_loss(y, spec)
    assert value == pytest.approx(20 * 0.4 + 20 * 0.6, abs=1e-4)
    value, grad = constraint_loss(y, spec.with_(lambda_ccl=0.0, lambda_scl=0.0))
    assert value == 0.0 and np.all(grad == 0)


@pytest.mark.parametrize("metric", ["chi2", "euclidean", "bhattacharyya"])
def test_histogram_loss_gradient(metric):
    rng = np.random.default_rng(2)
    p = rng.dirichlet(np.ones(6), size=2)
    q = rng.dirichlet(np.ones(6), size=2)
    _, dp = histogram_loss(p, q, metric)
    h = 1e-6
    for j in range(6):
        pp, pm = p.copy(), p.copy()
        pp[:, j] += h
        pm[:, j] -= h
        fd = (histogram_loss(pp, q, metric)[0] - histogram_loss(pm, q, metric)[0]) / (2 * h)
        np.testing.assert_allclose(dp[:, j], fd, rtol=1e-5, atol=1e-9)


@pytest.mark.parametrize("metric", ["chi2", "euclidean", "bhattacharyya"])
def test_constraint_gradient_fd(metric):
    rng = np.random.default_rng(3)
    B = 8
    prior = rng.dirichlet(np.ones(B), size=3)
    spec = ConstraintSpec(prior, rng.uniform(0.3, 0.7, 3), rng.uniform(0.1, 0.3, 3), metric=metric)
    c = (np.arange(B) + 0.5) / B
    y = rng.uniform(0.1, 0.9, (8, 8, 3))
    _, grad = constraint_loss(y, spec)
    h = 1e-5
    idx = [tuple(rng.integers(0, s) for s in y.shape) for _ in range(20)]
    for i in idx:
        if np.min(np.abs(y[i] - c)) < 2 * h:
            continue
        yp, ym = y.copy(), y.copy()
        yp[i] += h
        ym[i] -= h
        fd = (constraint_loss(yp, spec)[0] - constraint_loss(ym, spec)[0]) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-4 * abs(fd) + 1e-9


def test_batched_matches_single():
    rng = np.random.default_rng(4)
    spec = spec_from(rng.dirichlet(np.ones(8)))
    ys = rng.random((3, 6, 6, 3))
    vb, gb = constraint_loss(ys, spec)
    for k in range(3):
        v, g = constraint_loss(ys[k], spec)
        assert vb[k] == pytest.approx(v, abs=1e-12)
        np.testing.assert_allclose(gb[k], g, atol=1e-14)


def test_bin_count_mismatch_via_spec():
    with pytest.raises(ConfigError):
        ConstraintSpec.from_dict({**spec_from([0.5, 0.5]).to_dict(), "bins": 4})
    with pytest.raises(ConfigError):
        spec_from([0.5, 0.6])
    with pytest.raises(ConfigError):
        spec_from([0.5, 0.5], metric="kl")


def test_fit_constraints_cases(tmp_path):
    # stored on [-1, 1]; 0.5 on [0, 1] is 0.0
    spec = fit_constraints([np.zeros((4, 4, 3))] * 3, "vis", bins=8)
    np.testing.assert_allclose(spec.prior_mean, 0.5)
    np.testing.assert_allclose(spec.prior_std, 0.0)
    np.testing.assert_array_equal(spec.prior_hist, np.tile(np.eye(8)[4], (3, 1)))
    spec = fit_constraints([-np.ones((4, 4, 3)), np.ones((4, 4, 3))], "ir", bins=8)
    np.testing.assert_allclose(spec.prior_mean, 0.5)
    np.testing.assert_allclose(spec.prior_std, 0.5)
    with pytest.raises(ConfigError):
        fit_constraints([], "ir")
    spec.save(tmp_path / "s.json")
    back = ConstraintSpec.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.prior_hist, spec.prior_hist)
    assert back.modality == "ir" and back.bins == 8


def test_fit_constraints_pooled_oracle():
    rng = np.random.default_rng(5)
    imgs = [rng.uniform(-1, 1, (int(rng.integers(3, 9)), 5, 3)) for _ in range(100)]
    spec = fit_constraints(imgs, "vis", bins=16)
    pool = np.concatenate([((x + 1) / 2).reshape(-1, 3) for x in imgs])
    np.testing.assert_allclose(spec.prior_mean, pool.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(spec.prior_std, pool.std(axis=0), atol=1e-9)
    for ch in range(3):
        ref = np.histogram(pool[:, ch], bins=16, range=(0, 1))[0] / len(pool)
        np.testing.assert_allclose(spec.prior_hist[ch], ref, atol=1e-12)


def test_numpy_fallback_matches():
    code = (
        "import numpy as np; from cmdiff import _accel; from cmdiff.constraints import constraint_loss, ConstraintSpec;"
        "assert _accel.backend() == 'numpy';"
        "r = np.random.default_rng(0); s = ConstraintSpec(r.dirichlet(np.ones(8), 3), [.5]*3, [.2]*3);"
        "v, g = constraint_loss(r.random((6, 6, 3)), s); print(repr(v), repr(float(g.sum())))"
    )
    env = {**os.environ, "CMDIFF_NO_NUMBA": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout.split()
    r = np.random.default_rng(0)
    s = ConstraintSpec(r.dirichlet(np.ones(8), 3), [0.5] * 3, [0.2] * 3)
    v, g = constraint_loss(r.random((6, 6, 3)), s)
    assert float(out[0]) == pytest.approx(v, abs=1e-12)
    assert float(out[1]) == pytest.approx(float(g.sum()), abs=1e-10)
