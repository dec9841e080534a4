import time

import numpy as np
import pytest

from cmdiff.errors import ConfigError
from cmdiff.schedule import (
    build_linear_schedule,
    posterior_params,
    predict_x0,
    q_sample,
    scaled_linear_schedule,
)


def cumprod_oracle(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return np.array(out)


def bayes_posterior_oracle(x_t, x0, t, betas):
    """Condition the jointly Gaussian (x_{t-1}, x_t) given x0 on x_t."""
    ab = cumprod_oracle(betas)
    ab_prev = 1.0 if t == 1 else ab[t - 2]
    a_t = 1.0 - betas[t - 1]
    mu = np.array([np.sqrt(ab_prev) * x0, np.sqrt(ab[t - 1]) * x0])
    v_prev = 1.0 - ab_prev
    cov = np.array([[v_prev, np.sqrt(a_t) * v_prev], [np.sqrt(a_t) * v_prev, 1.0 - ab[t - 1]]])
    mean = mu[0] + cov[0, 1] / cov[1, 1] * (x_t - mu[1])
    var = cov[0, 0] - cov[0, 1] ** 2 / cov[1, 1]
    return mean, var


def test_reference_endpoints_and_cumprod():
    t0 = time.perf_counter()
    s = build_linear_schedule(1000, 1e-4, 0.01)
    assert time.perf_counter() - t0 < 1.0
    assert s.betas[0] == 1e-4 and s.betas[-1] == 0.01
    np.testing.assert_allclose(s.alpha_bars, cumprod_oracle(s.betas), rtol=0, atol=1e-12)
    assert s.alpha_bars_prev[0] == 1.0


def test_small_schedules():
    s = build_linear_schedule(4, 0.1, 0.4)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72, 0.504, 0.3024], atol=1e-15)
    one = build_linear_schedule(1, 0.3, 0.3)
    assert one.alpha_bars[0] == pytest.approx(0.7, abs=1e-15)


def test_schedule_validation():
    for args in [(0, 1e-4, 0.01), (10, 0.02, 0.01), (10, 0.0, 0.01), (10, 1e-4, 1.0), (2.5, 1e-4, 0.01)]:
        with pytest.raises(ConfigError):
            build_linear_schedule(*args)


def test_arrays_read_only():
    s = build_linear_schedule(10, 1e-4, 0.01)
    with pytest.raises(ValueError):
        s.betas[0] = 1.0


def test_q_sample_closed_form():
    s = build_linear_schedule(4, 0.1, 0.4)
    assert q_sample(1.0, 2, 1.0, s) == pytest.approx(np.sqrt(0.72) + np.sqrt(0.28), abs=1e-12)
    assert q_sample(1.0, 2, 1.0, s) == pytest.approx(1.377678, abs=1e-6)
    eps = np.random.default_rng(0).standard_normal((4, 4, 3))
    np.testing.assert_allclose(q_sample(np.zeros_like(eps), 3, eps, s), np.sqrt(1 - 0.504) * eps)
    tiny = build_linear_schedule(1, 1e-12, 1e-12)
    x0 = np.random.default_rng(1).uniform(-1, 1, (8, 8, 3))
    np.testing.assert_allclose(q_sample(x0, 1, np.ones_like(x0), tiny), x0, atol=1e-6)


def test_q_sample_errors():
    s = build_linear_schedule(4, 0.1, 0.4)
    with pytest.raises(ValueError):
        q_sample(np.zeros((2, 2)), 1, np.zeros((3, 3)), s)
    with pytest.raises(ValueError):
        q_sample(0.0, 5, 0.0, s)


def test_predict_x0_round_trip():
    s = build_linear_schedule(4, 0.1, 0.4)
    rng = np.random.default_rng(2)
    for _ in range(50):
        t = int(rng.integers(1, 5))
        x0 = rng.uniform(-1, 1, (3, 5))
        eps = rng.standard_normal((3, 5))
        np.testing.assert_allclose(predict_x0(q_sample(x0, t, eps, s), eps, t, s), x0, atol=1e-12)
    xt = rng.standard_normal(6)
    np.testing.assert_allclose(predict_x0(xt, np.zeros(6), 3, s), xt / np.sqrt(0.504))


def test_predict_x0_batched_t_and_clamp():
    s = build_linear_schedule(10, 1e-3, 0.2)
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-1, 1, (4, 2, 2, 3))
    eps = rng.standard_normal(x0.shape)
    t = np.array([1, 4, 7, 10])
    xt = q_sample(x0, t, eps, s)
    np.testing.assert_allclose(predict_x0(xt, eps, t, s), x0, atol=1e-12)
    assert predict_x0(xt, -10 * eps, t, s, clamp=True).max() <= 1.0


def test_posterior_matches_bayes_oracle():
    s = build_linear_schedule(4, 0.1, 0.4)
    mean, var = posterior_params(0.7, -0.2, 3, s)
    m_ref, v_ref = bayes_posterior_oracle(0.7, -0.2, 3, s.betas)
    assert mean == pytest.approx(m_ref, abs=1e-10) and var == pytest.approx(v_ref, abs=1e-12)
    s10 = build_linear_schedule(10, 1e-4, 0.2)
    for t in range(1, 11):
        m, v = posterior_params(0.3, 0.9, t, s10)
        m_ref, v_ref = bayes_posterior_oracle(0.3, 0.9, t, s10.betas)
        assert abs(m - m_ref) < 1e-8 and abs(v - v_ref) < 1e-8


def test_posterior_boundaries():
    s = build_linear_schedule(10, 1e-4, 0.2)
    x0 = np.array([0.25, -0.5])
    mean, var = posterior_params(np.array([3.0, 3.0]), x0, 1, s)
    np.testing.assert_allclose(mean, x0, atol=1e-15)
    assert var == 0.0
    mean, var = posterior_params(np.zeros(3), np.zeros(3), 5, s)
    assert np.all(mean == 0) and var == pytest.approx(s.betas[4] * (1 - s.alpha_bars[3]) / (1 - s.alpha_bars[4]))
    with pytest.raises(ValueError):
        posterior_params(0.0, 0.0, 0, s)
    with pytest.raises(ValueError):
        posterior_params(0.0, 0.0, 11, s)


def test_printed_form_differs():
    s = build_linear_schedule(10, 1e-4, 0.2)
    a, _ = posterior_params(1.0, 0.0, 5, s)
    b, _ = posterior_params(1.0, 0.0, 5, s, printed_form=True)
    assert a != pytest.approx(b)


def test_scaled_schedule_terminal_noise():
    ref = build_linear_schedule(1000, 1e-4, 0.01)
    s = scaled_linear_schedule(200)
    assert s.betas[0] == pytest.approx(5e-4) and s.betas[-1] == pytest.approx(0.05)
    assert s.alpha_bars[-1] < 0.01 and ref.alpha_bars[-1] < 0.01
    assert build_linear_schedule(200, 1e-4, 0.01).alpha_bars[-1] > 0.3


def test_schedule_round_trip_dict():
    s = scaled_linear_schedule(50)
    s2 = type(s).from_dict(s.to_dict())
    np.testing.assert_array_equal(s.alpha_bars, s2.alpha_bars)
