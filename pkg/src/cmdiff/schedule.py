"""Linear-beta diffusion schedule, forward noising, clean-image prediction and
the Gaussian reverse posterior."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

# Full-scale default and the desk-scale chain length used for toy runs.
DEFAULT_T = 1000
DESK_T = 200
BETA_START = 1e-4
BETA_END = 0.01


@dataclass(frozen=True)
class DiffusionSchedule:
    """Precomputed per-step coefficients, stored 1-indexed via ``[t - 1]``.

    ``alpha_bars_prev[t - 1]`` is the cumulative product up to ``t - 1`` with
    the convention that it equals 1 at ``t = 1``.
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    alpha_bars_prev: np.ndarray
    posterior_vars: np.ndarray

    @property
    def beta_start(self) -> float:
        return float(self.betas[0])

    @property
    def beta_end(self) -> float:
        return float(self.betas[-1])

    def to_dict(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d):
        return build_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))

    def check_t(self, t):
        ts = np.asarray(t)
        if ts.size and (ts.min() < 1 or ts.max() > self.T):
            raise ValueError(f"step index out of range 1..{self.T}: {t}")


def build_linear_schedule(T: int = DEFAULT_T, beta_start: float = BETA_START, beta_end: float = BETA_END):
    if int(T) != T or T < 1:
        raise ConfigError(f"T must be an integer >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        betas[-1] = beta_end
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_vars = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
    for arr in (betas, alphas, alpha_bars, alpha_bars_prev, posterior_vars):
        arr.setflags(write=False)
    return DiffusionSchedule(T, betas, alphas, alpha_bars, alpha_bars_prev, posterior_vars)


def _coef(values, t, ndim):
    # Per-sample coefficient broadcast over trailing image axes when t is a batch.
    c = values[np.asarray(t) - 1]
    if np.ndim(c) == 0:
        return float(c)
    return c.reshape(c.shape + (1,) * (ndim - c.ndim))


def q_sample(x0, t, eps, sched: DiffusionSchedule):
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    sched.check_t(t)
    ab = _coef(sched.alpha_bars, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_pred, t, sched: DiffusionSchedule, clamp: bool = False):
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps_pred.shape:
        raise ValueError(f"eps_pred shape {eps_pred.shape} does not match x_t shape {x_t.shape}")
    sched.check_t(t)
    ab = _coef(sched.alpha_bars, t, x_t.ndim)
    x0 = (x_t - np.sqrt(1.0 - ab) * eps_pred) / np.sqrt(ab)
    if clamp:
        x0 = np.clip(x0, -1.0, 1.0)
    return x0


def posterior_params(x_t, x0_hat, t, sched: DiffusionSchedule, printed_form: bool = False):
    """Mean and variance of q(x_{t-1} | x_t, x0_hat) for a scalar step ``t``.

    ``printed_form=True`` swaps the x_t coefficient sqrt(alpha_t) for
    (1 - alpha_t), which is not a valid Gaussian posterior and exists only for
    side-by-side comparison.
    """
    if not (1 <= int(t) <= sched.T):
        raise ValueError(f"step index out of range 1..{sched.T}: {t}")
    i = int(t) - 1
    a, ab, ab_prev, beta = sched.alphas[i], sched.alpha_bars[i], sched.alpha_bars_prev[i], sched.betas[i]
    xt_coef = (1.0 - a) if printed_form else np.sqrt(a)
    c_xt = xt_coef * (1.0 - ab_prev) / (1.0 - ab)
    c_x0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    mean = c_xt * np.asarray(x_t, dtype=np.float64) + c_x0 * np.asarray(x0_hat, dtype=np.float64)
    return mean, float(sched.posterior_vars[i])


def scaled_linear_schedule(T: int = DESK_T, beta_start: float = BETA_START, beta_end: float = BETA_END,
                           reference_T: int = DEFAULT_T):
    """Linear schedule for a shorter chain with endpoints scaled by reference_T / T.

    Keeps the terminal abar_T close to the reference chain's, so x_T is still
    almost pure noise when T is small.
    """
    k = reference_T / T
    return build_linear_schedule(T, beta_start * k, min(beta_end * k, 0.999))
