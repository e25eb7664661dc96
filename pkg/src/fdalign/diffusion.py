"""Toy denoising diffusion on 2-D points.

The reverse-step mean mu_theta(x_t, t, c) is a small tanh MLP written out in
numpy with a hand-rolled backward pass, so the trainers can differentiate
step log-probabilities without an autodiff framework. Points are carried as
``(n, 2)`` float arrays; timesteps run 1..T.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

POLICY_FORMAT = "fdalign.gaussian-step-policy"
POLICY_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


class ConfigError(ValueError):
    pass


class Sample2D(NamedTuple):
    x: float
    y: float


def as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected points of shape (n, 2), got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigError("betas must be a non-empty 1-D vector")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ConfigError("every beta_t must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)

    @classmethod
    def linear(cls, T: int, beta_start: float, beta_end: float) -> "NoiseSchedule":
        return cls(np.linspace(beta_start, beta_end, T))

    @classmethod
    def desk(cls, T: int = 50) -> "NoiseSchedule":
        """Linear 1e-4..0.02 at T=1000, endpoints rescaled by 1000/T for shorter chains."""
        scale = 1000.0 / T
        return cls.linear(T, 1e-4 * scale, 0.02 * scale)

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """Cumulative products, index 0 holds alpha_bar_0 = 1 and index t holds alpha_bar_t."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def _check(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise IndexError(f"timestep must lie in 1..{self.T}, got {t!r}")
        return t

    def posterior_variance(self) -> np.ndarray:
        """beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t for t = 1..T.

        beta_tilde_1 is exactly 0, so t=1 reuses beta_tilde_2 (keeps sigma_1 > 0).
        """
        ab = self.alpha_bars
        var = (1.0 - ab[:-1]) / (1.0 - ab[1:]) * self.betas
        if self.T > 1:
            var[0] = var[1]
        else:
            var[0] = self.betas[0]
        return var

    def posterior_coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """(x0 coefficient, x_t coefficient) of the forward posterior mean, t = 1..T."""
        ab = self.alpha_bars
        c0 = np.sqrt(ab[:-1]) * self.betas / (1.0 - ab[1:])
        ct = np.sqrt(self.alphas) * (1.0 - ab[:-1]) / (1.0 - ab[1:])
        return c0, ct

    def posterior_mean(self, x0, x_t, t) -> np.ndarray:
        t = self._check(t)
        c0, ct = self.posterior_coefficients()
        return c0[t - 1][..., None] * as_points(x0) + ct[t - 1][..., None] * as_points(x_t)

    def to_dict(self) -> dict:
        return {"betas": [float(b) for b in self.betas]}


def forward_sample(schedule: NoiseSchedule, x0, t, noise) -> np.ndarray:
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    t = schedule._check(t)
    ab = schedule.alpha_bars[t][..., None]
    return np.sqrt(ab) * as_points(x0) + np.sqrt(1.0 - ab) * as_points(noise)


# ---------------------------------------------------------------------------
# Mean network


def time_features(t, T: int) -> np.ndarray:
    """t/T plus a 4-dim sinusoidal embedding."""
    s = np.asarray(t, dtype=float).reshape(-1) / T
    return np.stack(
        [s, np.sin(math.pi * s), np.cos(math.pi * s), np.sin(2 * math.pi * s), np.cos(2 * math.pi * s)],
        axis=1,
    )


@dataclass
class GaussianStepPolicy:
    """p_theta(x_{t-1} | x_t, c) = N(mu_theta(x_t, t, c), sigma_t^2 I).

    mu_theta = x_t + MLP([x_t, time features, one-hot c]).
    """

    schedule: NoiseSchedule
    n_conditions: int
    params: dict[str, np.ndarray]
    sigmas: np.ndarray = field(default=None)

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __post_init__(self):
        if self.sigmas is None:
            self.sigmas = np.sqrt(self.schedule.posterior_variance())
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        if self.sigmas.shape != (self.schedule.T,) or np.any(self.sigmas < 0):
            raise ConfigError("need one non-negative sigma per timestep")

    @classmethod
    def init(cls, schedule: NoiseSchedule, n_conditions: int, hidden: int = 64, seed: int = 0,
             zero_output: bool = True) -> "GaussianStepPolicy":
        rng = np.random.default_rng(seed)
        d_in = 2 + 5 + n_conditions
        params = {
            "W1": rng.normal(0.0, 1.0 / math.sqrt(d_in), (d_in, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, hidden)),
            "b2": np.zeros(hidden),
            "W3": (np.zeros((hidden, 2)) if zero_output
                   else rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, 2))),
            "b3": np.zeros(2),
        }
        return cls(schedule, n_conditions, params)

    def copy(self) -> "GaussianStepPolicy":
        return copy.deepcopy(self)

    # -- flat parameter view ------------------------------------------------

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.PARAM_NAMES])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k in self.PARAM_NAMES:
            size = self.params[k].size
            self.params[k] = np.asarray(vec[i:i + size], dtype=float).reshape(self.params[k].shape).copy()
            i += size

    @staticmethod
    def flatten_grads(grads: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([grads[k].ravel() for k in GaussianStepPolicy.PARAM_NAMES])

    # -- forward / backward -------------------------------------------------

    def _inputs(self, x_t, t, c) -> np.ndarray:
        x_t = as_points(x_t)
        n = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        c = np.broadcast_to(np.asarray(c), (n,))
        self.schedule._check(t)
        if np.any(c < 0) or np.any(c >= self.n_conditions):
            raise IndexError(f"condition must lie in 0..{self.n_conditions - 1}")
        onehot = np.zeros((n, self.n_conditions))
        onehot[np.arange(n), c] = 1.0
        return np.concatenate([x_t, time_features(t, self.schedule.T), onehot], axis=1)

    def mean(self, x_t, t, c, with_cache: bool = False):
        p = self.params
        h0 = self._inputs(x_t, t, c)
        h1 = np.tanh(h0 @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        mu = h0[:, :2] + h2 @ p["W3"] + p["b3"]
        if with_cache:
            return mu, (h0, h1, h2)
        return mu

    def backward(self, cache, grad_mu: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients of sum_i <grad_mu_i, mu_i>."""
        h0, h1, h2 = cache
        p = self.params
        d2 = (grad_mu @ p["W3"].T) * (1.0 - h2 * h2)
        d1 = (d2 @ p["W2"].T) * (1.0 - h1 * h1)
        return {
            "W3": h2.T @ grad_mu,
            "b3": grad_mu.sum(axis=0),
            "W2": h1.T @ d2,
            "b2": d2.sum(axis=0),
            "W1": h0.T @ d1,
            "b1": d1.sum(axis=0),
        }

    def sigma(self, t) -> np.ndarray:
        t = self.schedule._check(t)
        return self.sigmas[np.asarray(t) - 1]

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": POLICY_FORMAT,
            "version": POLICY_VERSION,
            "n_conditions": self.n_conditions,
            "schedule": self.schedule.to_dict(),
            "sigmas": self.sigmas.tolist(),
            "params": {k: self.params[k].tolist() for k in self.PARAM_NAMES},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianStepPolicy":
        if data.get("format") != POLICY_FORMAT or data.get("version") != POLICY_VERSION:
            raise ConfigError(f"not a version-{POLICY_VERSION} {POLICY_FORMAT} file")
        params = {k: np.asarray(v, dtype=float) for k, v in data["params"].items()}
        return cls(NoiseSchedule(np.asarray(data["schedule"]["betas"])), int(data["n_conditions"]),
                   params, np.asarray(data["sigmas"], dtype=float))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "GaussianStepPolicy":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Densities and ratios


def step_log_prob(policy: GaussianStepPolicy, x_prev, x_t, t, c) -> np.ndarray:
    """log N(x_prev; mu_theta(x_t, t, c), sigma_t^2 I) for each row."""
    mu = policy.mean(x_t, t, c)
    sigma = np.broadcast_to(policy.sigma(t), (mu.shape[0],))
    sq = np.sum((as_points(x_prev) - mu) ** 2, axis=1)
    return -sq / (2.0 * sigma ** 2) - 2.0 * np.log(sigma) - _LOG_2PI


def step_log_prob_grad(policy: GaussianStepPolicy, x_prev, x_t, t, c, weights=None):
    """(log-probs, parameter gradients of sum_i w_i log p_i)."""
    mu, cache = policy.mean(x_t, t, c, with_cache=True)
    sigma = np.broadcast_to(policy.sigma(t), (mu.shape[0],))
    resid = as_points(x_prev) - mu
    logp = -np.sum(resid ** 2, axis=1) / (2.0 * sigma ** 2) - 2.0 * np.log(sigma) - _LOG_2PI
    w = np.ones(mu.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    grad_mu = (w / sigma ** 2)[:, None] * resid
    return logp, policy.backward(cache, grad_mu)


def _check_shared_sigma(theta: GaussianStepPolicy, ref: GaussianStepPolicy) -> None:
    if theta.sigmas.shape != ref.sigmas.shape or not np.array_equal(theta.sigmas, ref.sigmas):
        raise ConfigError("step ratio needs both policies to share sigma_t")


def step_log_ratio(theta: GaussianStepPolicy, ref: GaussianStepPolicy, x_prev, x_t, t, c) -> np.ndarray:
    """(|x_prev - mu_ref|^2 - |x_prev - mu_theta|^2) / (2 sigma_t^2)."""
    _check_shared_sigma(theta, ref)
    x_prev = as_points(x_prev)
    mu_t = theta.mean(x_t, t, c)
    mu_r = ref.mean(x_t, t, c)
    sigma = np.broadcast_to(theta.sigma(t), (mu_t.shape[0],))
    return (np.sum((x_prev - mu_r) ** 2, axis=1) - np.sum((x_prev - mu_t) ** 2, axis=1)) / (2.0 * sigma ** 2)


def step_ratio(theta: GaussianStepPolicy, ref: GaussianStepPolicy, x_prev, x_t, t, c) -> np.ndarray:
    return np.exp(step_log_ratio(theta, ref, x_prev, x_t, t, c))


def predict_x0(policy: GaussianStepPolicy, x, t, c) -> np.ndarray:
    """One-step projection of a state at time t to x0-space.

    Inverts the posterior-mean relation mu = c0_t x0 + ct_t x_t; a state at
    t = 0 is already in data space.
    """
    x = as_points(x)
    if t == 0:
        return x.copy()
    c0, ct = policy.schedule.posterior_coefficients()
    return (policy.mean(x, t, c) - ct[t - 1] * x) / c0[t - 1]


def ancestral_sample(policy: GaussianStepPolicy, c, rng_seed: int, n: int = 1) -> np.ndarray:
    """Run the reverse chain from x_T ~ N(0, I).

    Returns an array of shape (T + 1, n, 2): index 0 is x_T, index T is x_0.
    """
    rng = np.random.default_rng(rng_seed)
    T = policy.schedule.T
    traj = np.empty((T + 1, n, 2))
    x = rng.standard_normal((n, 2))
    traj[0] = x
    for i, t in enumerate(range(T, 0, -1), start=1):
        x = policy.mean(x, t, c) + policy.sigma(t) * rng.standard_normal((n, 2))
        traj[i] = x
    return traj


# ---------------------------------------------------------------------------
# Ring mixture data


def ring_centers(n_modes: int = 8, radius: float = 2.0) -> np.ndarray:
    angles = 2.0 * math.pi * np.arange(n_modes) / n_modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def sample_ring(n: int, rng: np.random.Generator, n_modes: int = 8, radius: float = 2.0,
                sigma: float = 0.1) -> np.ndarray:
    centers = ring_centers(n_modes, radius)
    idx = rng.integers(0, n_modes, n)
    return centers[idx] + sigma * rng.standard_normal((n, 2))
