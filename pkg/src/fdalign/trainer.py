"""Preference-alignment trainers driven by the generalized f-divergence loss.

Two settings:

* a categorical policy over a finite outcome set, trained by full-batch
  gradient descent, where every ratio is exact;
* a step-wise trainer on the toy diffusion model: per-timestep winner/loser
  pairs are drawn from the current policy, scored by a preference oracle and
  trained with plain mini-batch SGD.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .diffusion import (
    ConfigError,
    GaussianStepPolicy,
    NoiseSchedule,
    ancestral_sample,
    as_points,
    forward_sample,
    predict_x0,
    ring_centers,
    step_log_ratio,
)
from .loss import LossConfig, log_ratio_loss_and_grads, log_sigmoid, loss_values
from .metrics import SampleSet, sample_diversity


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Shared records


@dataclass(frozen=True)
class PreferenceRecord:
    condition: int
    winner: object  # outcome index or (2,) point
    loser: object
    timestep: int | None = None
    x_t: np.ndarray | None = None

    def __post_init__(self):
        if (self.timestep is None) != (self.x_t is None):
            raise ValueError("step-wise records carry both timestep and x_t")
        if np.array_equal(np.asarray(self.winner), np.asarray(self.loser)):
            raise ValueError("winner and loser must differ")


@dataclass
class TrainTrace:
    """Per-epoch statistics, measured at the parameters each epoch starts from."""

    mean_loss: list[float] = field(default_factory=list)
    mean_x1: list[float] = field(default_factory=list)
    mean_x2: list[float] = field(default_factory=list)
    mean_gradient_ratio: list[float] = field(default_factory=list)
    mean_score: list[float] = field(default_factory=list)
    mode_coverage: list[float] = field(default_factory=list)
    mean_pairwise_distance: list[float] = field(default_factory=list)

    COLUMNS = ("epoch", "mean_loss", "mean_x1", "mean_x2", "mean_gradient_ratio",
               "mean_score", "mode_coverage", "mean_pairwise_distance")

    def append(self, **values: float) -> None:
        for f in fields(self):
            getattr(self, f.name).append(float(values[f.name]))

    def __len__(self) -> int:
        return len(self.mean_loss)

    def rows(self) -> list[list[float]]:
        series = [getattr(self, name) for name in self.COLUMNS[1:]]
        return [[epoch, *vals] for epoch, vals in enumerate(zip(*series))]


def _ratio_stats(cfg: LossConfig, u1: np.ndarray, u2: np.ndarray) -> dict[str, float]:
    loss, _, _ = log_ratio_loss_and_grads(cfg, u1, u2)
    div = cfg.divergence
    # f''(X1)/f''(X2) = exp(log(X1 f''(X1)) - log(X2 f''(X2)) - u1 + u2)
    g_ratio = np.exp(div.log_x_f_double_prime(u1) - div.log_x_f_double_prime(u2) - u1 + u2)
    return {
        "mean_loss": float(np.mean(loss)),
        "mean_x1": float(np.mean(np.exp(u1))),
        "mean_x2": float(np.mean(np.exp(u2))),
        "mean_gradient_ratio": float(np.mean(g_ratio)),
    }


# ---------------------------------------------------------------------------
# Categorical trainer


@dataclass
class CategoricalPolicy:
    logits: np.ndarray  # (n_conditions, n_outcomes)

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=float, ndmin=2)
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def random(cls, n_conditions: int, n_outcomes: int, seed: int = 0, scale: float = 1.0):
        return cls(np.random.default_rng(seed).normal(0.0, scale, (n_conditions, n_outcomes)))

    def log_probs(self) -> np.ndarray:
        return log_softmax(self.logits, axis=1)

    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)

    def copy(self) -> "CategoricalPolicy":
        return CategoricalPolicy(self.logits.copy())


def _categorical_arrays(data: Sequence[PreferenceRecord]):
    c = np.array([r.condition for r in data], dtype=int)
    w = np.array([r.winner for r in data], dtype=int)
    l = np.array([r.loser for r in data], dtype=int)
    return c, w, l


def categorical_log_ratios(policy: CategoricalPolicy, ref: CategoricalPolicy, data):
    c, w, l = _categorical_arrays(data)
    delta = policy.log_probs() - ref.log_probs()
    return delta[c, w], delta[c, l]


def categorical_gradient(policy: CategoricalPolicy, ref: CategoricalPolicy, data, cfg: LossConfig):
    """(per-record losses, u1, u2, d mean-loss / d logits)."""
    c, w, l = _categorical_arrays(data)
    delta = policy.log_probs() - ref.log_probs()
    u1, u2 = delta[c, w], delta[c, l]
    loss, g1, g2 = log_ratio_loss_and_grads(cfg, u1, u2)
    probs = policy.probs()
    n = len(data)
    grad = np.zeros_like(policy.logits)
    # d u(x|c) / d logits[c] = onehot(x) - softmax(logits[c])
    np.add.at(grad, (c, w), g1 / n)
    np.add.at(grad, (c, l), g2 / n)
    np.add.at(grad, c, -((g1 + g2) / n)[:, None] * probs[c])
    return loss, u1, u2, grad


def _categorical_extras(policy: CategoricalPolicy, data) -> dict[str, float]:
    """Expected net-win score and outcome-spread summaries.

    The score of outcome x under condition c is (#wins - #losses) among the
    records; coverage counts outcomes holding at least 1/(10 n) of the mass;
    the distance analogue is 1 - sum p^2, the chance two draws differ.
    """
    c, w, l = _categorical_arrays(data)
    probs = policy.probs()
    net = np.zeros_like(probs)
    np.add.at(net, (c, w), 1.0)
    np.add.at(net, (c, l), -1.0)
    used = np.unique(c)
    n_out = probs.shape[1]
    p = probs[used]
    return {
        "mean_score": float(np.mean(np.sum(p * net[used], axis=1))),
        "mode_coverage": float(np.mean(np.sum(p >= 1.0 / (10 * n_out), axis=1))),
        "mean_pairwise_distance": float(np.mean(1.0 - np.sum(p * p, axis=1))),
    }


def train_categorical(policy: CategoricalPolicy, ref: CategoricalPolicy, data: Sequence[PreferenceRecord],
                      cfg: LossConfig, epochs: int, lr: float):
    """Full-batch gradient descent on the mean generalized loss."""
    if not data:
        raise ValueError("need at least one preference record")
    policy = policy.copy()
    ref = ref.copy()
    trace = TrainTrace()
    for _ in range(epochs):
        loss, u1, u2, grad = categorical_gradient(policy, ref, data, cfg)
        bad = np.flatnonzero(~np.isfinite(loss))
        if bad.size:
            raise TrainingDivergedError(f"non-finite loss on record {data[bad[0]]!r}")
        trace.append(**_ratio_stats(cfg, u1, u2), **_categorical_extras(policy, data))
        policy.logits -= lr * grad
        if not np.all(np.isfinite(policy.logits)):
            raise TrainingDivergedError("logits became non-finite")
        assert np.allclose(policy.probs().sum(axis=1), 1.0)
    return policy, trace


# ---------------------------------------------------------------------------
# Preference oracle on the ring mixture


@dataclass(frozen=True)
class PreferenceOracle:
    """Scores a point by its log-density under the condition's preferred modes."""

    centers: np.ndarray
    preferred: tuple[tuple[int, ...], ...]  # per condition
    sigma: float = 0.1

    @classmethod
    def ring(cls, n_conditions: int = 4, n_modes: int = 8, radius: float = 2.0, sigma: float = 0.1):
        per = n_modes // n_conditions
        preferred = tuple(tuple(range(c * per, (c + 1) * per)) for c in range(n_conditions))
        return cls(ring_centers(n_modes, radius), preferred, sigma)

    @property
    def n_conditions(self) -> int:
        return len(self.preferred)

    def score(self, points, condition) -> np.ndarray:
        pts = as_points(points)
        cond = np.broadcast_to(np.asarray(condition), (pts.shape[0],))
        out = np.empty(pts.shape[0])
        for c in np.unique(cond):
            if not 0 <= c < self.n_conditions:
                raise ConfigError(f"oracle has no condition {c}")
            mask = cond == c
            centers = self.centers[list(self.preferred[c])]
            sq = np.sum((pts[mask, None, :] - centers[None]) ** 2, axis=2)
            log_comp = -sq / (2 * self.sigma ** 2) - math.log(2 * math.pi * self.sigma ** 2)
            out[mask] = np.logaddexp.reduce(log_comp, axis=1) - math.log(len(centers))
        return out


# ---------------------------------------------------------------------------
# Step-wise pairs


@dataclass
class StepPairs:
    condition: np.ndarray  # (n,)
    t: np.ndarray          # (n,)
    x_t: np.ndarray        # (n, 2)
    winner: np.ndarray     # (n, 2)
    loser: np.ndarray      # (n, 2)

    def __len__(self) -> int:
        return self.t.size

    def subset(self, idx) -> "StepPairs":
        return StepPairs(self.condition[idx], self.t[idx], self.x_t[idx], self.winner[idx], self.loser[idx])

    def records(self) -> list[PreferenceRecord]:
        return [
            PreferenceRecord(int(c), w.copy(), l.copy(), int(t), x.copy())
            for c, t, x, w, l in zip(self.condition, self.t, self.x_t, self.winner, self.loser)
        ]

    @staticmethod
    def concat(parts: Sequence["StepPairs"]) -> "StepPairs":
        return StepPairs(*(np.concatenate([getattr(p, name) for p in parts])
                           for name in ("condition", "t", "x_t", "winner", "loser")))


def _pick_winner_loser(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Winner: highest score, lowest index on ties. Loser: lowest score, highest index on ties."""
    k = scores.shape[1]
    win = np.argmax(scores, axis=1)
    lose = k - 1 - np.argmin(scores[:, ::-1], axis=1)
    return win, lose


def step_pairs(policy: GaussianStepPolicy, oracle: PreferenceOracle, conditions, k: int,
               rng: np.random.Generator) -> StepPairs:
    """One pair per timestep for each chain in ``conditions``.

    At each t, k candidates x_{t-1} are drawn from p_theta(. | x_t, c) and
    scored by the oracle after projecting them to x0-space; the chain then
    continues from the winner.
    """
    if k < 2:
        raise ConfigError(f"need k >= 2 candidates per step, got {k}")
    cond = np.asarray(conditions, dtype=int).reshape(-1)
    n = cond.size
    T = policy.schedule.T
    x = rng.standard_normal((n, 2))
    parts = []
    for t in range(T, 0, -1):
        mu = policy.mean(x, t, cond)
        cand = mu[:, None, :] + policy.sigma(t) * rng.standard_normal((n, k, 2))
        flat = cand.reshape(n * k, 2)
        rep = np.repeat(cond, k)
        scores = oracle.score(predict_x0(policy, flat, t - 1, rep), rep).reshape(n, k)
        win, lose = _pick_winner_loser(scores)
        rows = np.arange(n)
        parts.append(StepPairs(cond.copy(), np.full(n, t), x.copy(), cand[rows, win], cand[rows, lose]))
        x = cand[rows, win]
    return StepPairs.concat(parts)


def build_step_pairs(policy: GaussianStepPolicy, oracle: PreferenceOracle, c: int, k: int,
                     rng_seed: int) -> list[PreferenceRecord]:
    return step_pairs(policy, oracle, [c], k, np.random.default_rng(rng_seed)).records()


# ---------------------------------------------------------------------------
# Step-wise losses


def per_timestep_bound_loss(cfg: LossConfig, winner_step_ratio, loser_step_ratio, T: int):
    """-log sigma(beta T f'(X1) - beta T f'(X2)) on single-step ratios."""
    return loss_values(LossConfig(cfg.divergence, cfg.beta * T), winner_step_ratio, loser_step_ratio)


def spo_loss_and_grads(beta: float, u1, u2):
    """The reverse-KL step-wise objective written directly on log-ratios."""
    margin = beta * (np.asarray(u1) - np.asarray(u2))
    w = beta * expit(-margin)
    return -log_sigmoid(margin), -w, w


OBJECTIVES = ("generalized", "bound", "spo")


def _objective_grads(objective: str, cfg: LossConfig, T: int, u1, u2):
    if objective == "generalized":
        return log_ratio_loss_and_grads(cfg, u1, u2)
    if objective == "bound":
        return log_ratio_loss_and_grads(LossConfig(cfg.divergence, cfg.beta * T), u1, u2)
    if objective == "spo":
        return spo_loss_and_grads(cfg.beta, u1, u2)
    raise ConfigError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")


def stepwise_log_ratios(policy: GaussianStepPolicy, ref: GaussianStepPolicy, pairs: StepPairs):
    u1 = step_log_ratio(policy, ref, pairs.winner, pairs.x_t, pairs.t, pairs.condition)
    u2 = step_log_ratio(policy, ref, pairs.loser, pairs.x_t, pairs.t, pairs.condition)
    return u1, u2


def stepwise_gradient(policy: GaussianStepPolicy, ref: GaussianStepPolicy, pairs: StepPairs,
                      cfg: LossConfig, objective: str = "generalized"):
    """(per-pair losses, u1, u2, gradient of the mean loss w.r.t. parameters)."""
    u1, u2 = stepwise_log_ratios(policy, ref, pairs)
    loss, g1, g2 = _objective_grads(objective, cfg, policy.schedule.T, u1, u2)
    n = len(pairs)
    mu, cache = policy.mean(pairs.x_t, pairs.t, pairs.condition, with_cache=True)
    inv_var = 1.0 / policy.sigma(pairs.t) ** 2
    # d log p(x | x_t) / d mu = (x - mu) / sigma^2; the reference term is constant
    grad_mu = ((g1 * inv_var / n)[:, None] * (pairs.winner - mu)
               + (g2 * inv_var / n)[:, None] * (pairs.loser - mu))
    return loss, u1, u2, policy.backward(cache, grad_mu)


def finite_difference_check(policy: GaussianStepPolicy, ref: GaussianStepPolicy, pairs: StepPairs,
                            cfg: LossConfig, objective: str = "generalized", n_params: int = 20,
                            seed: int = 0, rel_tol: float = 1e-4) -> float:
    """Compare analytic parameter gradients with central differences.

    Returns the worst relative error over ``n_params`` random coordinates and
    raises if it exceeds ``rel_tol``. Coordinates far below the gradient's
    overall scale are compared against 1e-6 of that scale instead of themselves.
    """
    _, _, _, grads = stepwise_gradient(policy, ref, pairs, cfg, objective)
    analytic = GaussianStepPolicy.flatten_grads(grads)
    theta = policy.flat()
    probe = policy.copy()
    rng = np.random.default_rng(seed)
    idx = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    floor = max(1e-6 * float(np.max(np.abs(analytic))), 1e-12)
    worst = 0.0
    for i in idx:
        h = 1e-6 * max(1.0, abs(theta[i]))
        vals = []
        for sign in (1.0, -1.0):
            pert = theta.copy()
            pert[i] += sign * h
            probe.set_flat(pert)
            u1, u2 = stepwise_log_ratios(probe, ref, pairs)
            vals.append(float(np.mean(_objective_grads(objective, cfg, policy.schedule.T, u1, u2)[0])))
        numeric = (vals[0] - vals[1]) / (2 * h)
        scale = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / scale)
    if worst > rel_tol:
        raise AssertionError(f"parameter gradient check failed: relative error {worst:.3g} > {rel_tol:g}")
    return worst


def evaluate_samples(policy: GaussianStepPolicy, oracle: PreferenceOracle, conditions: Sequence[int],
                     n_per_condition: int, seed: int, coverage_radius: float = 0.3):
    """Fresh ancestral samples: (points, conditions, mean score, coverage, mean distance).

    Coverage and distance are averaged over conditions.
    """
    pts, conds, cover, dist = [], [], [], []
    for j, c in enumerate(conditions):
        x0 = ancestral_sample(policy, c, seed + 7919 * j, n=n_per_condition)[-1]
        div = sample_diversity(SampleSet(x0, c), oracle.centers, coverage_radius)
        pts.append(x0)
        conds.append(np.full(n_per_condition, c))
        cover.append(div.mode_coverage)
        dist.append(div.mean_pairwise_distance)
    pts = np.concatenate(pts)
    conds = np.concatenate(conds)
    score = float(np.mean(oracle.score(pts, conds)))
    return pts, conds, score, float(np.mean(cover)), float(np.mean(dist))


def train_stepwise(policy: GaussianStepPolicy, ref: GaussianStepPolicy, oracle: PreferenceOracle,
                   cfg: LossConfig, epochs: int, lr: float, k: int = 4, pairs_per_epoch: int = 400,
                   seed: int = 0, objective: str = "generalized", batch_size: int = 100,
                   conditions: Sequence[int] | None = None, eval_samples: int = 0,
                   self_check: bool = False, on_epoch=None):
    """Step-wise preference SGD; X1, X2 are single-step policy/reference ratios.

    Each epoch draws ceil(pairs_per_epoch / T) fresh chains from the current
    policy (cycling through ``conditions``), shuffles the resulting pairs and
    takes one SGD step per mini-batch. ``on_epoch(epoch, policy)`` is called
    after every epoch's updates.
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    if conditions is None:
        conditions = list(range(oracle.n_conditions))
    policy = policy.copy()
    ref = ref.copy()
    T = policy.schedule.T
    n_chains = max(1, math.ceil(pairs_per_epoch / T))
    trace = TrainTrace()
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        chain_conds = np.resize(np.asarray(conditions, dtype=int), n_chains)
        pairs = step_pairs(policy, oracle, chain_conds, k, rng)
        if self_check and epoch == 0:
            finite_difference_check(policy, ref, pairs.subset(rng.choice(len(pairs), 16, replace=False)),
                                    cfg, objective)
        u1, u2 = stepwise_log_ratios(policy, ref, pairs)
        stats = _ratio_stats(cfg, u1, u2)
        if objective != "generalized":
            stats["mean_loss"] = float(np.mean(_objective_grads(objective, cfg, T, u1, u2)[0]))
        if eval_samples:
            _, _, score, cover, dist = evaluate_samples(policy, oracle, conditions, eval_samples, seed + 104729)
        else:
            score = cover = dist = math.nan
        trace.append(**stats, mean_score=score, mode_coverage=cover, mean_pairwise_distance=dist)

        order = rng.permutation(len(pairs))
        for start in range(0, len(order), batch_size):
            batch = pairs.subset(order[start:start + batch_size])
            loss, _, _, grads = stepwise_gradient(policy, ref, batch, cfg, objective)
            if not np.all(np.isfinite(loss)):
                bad = int(np.flatnonzero(~np.isfinite(loss))[0])
                raise TrainingDivergedError(f"non-finite loss on record {batch.subset([bad]).records()[0]!r}")
            for name in policy.PARAM_NAMES:
                policy.params[name] -= lr * grads[name]
        if on_epoch is not None:
            on_epoch(epoch, policy)
    return policy, trace


# ---------------------------------------------------------------------------
# Reference pre-training


def pretrain_reference(schedule: NoiseSchedule, data, conditions, epochs: int, lr: float = 2e-3,
                       n_conditions: int | None = None, hidden: int = 128, batch_size: int = 512,
                       seed: int = 0) -> GaussianStepPolicy:
    """Regress mu_theta(x_t, t, c) onto the forward-process posterior mean.

    Squared errors are weighted by 1/sigma_t (normalized to mean 1) so the
    low-noise steps that set sample sharpness are not drowned out. Adam with a
    cosine learning-rate decay.
    """
    data = as_points(data) if len(data) else np.empty((0, 2))
    conditions = np.asarray(conditions, dtype=int).reshape(-1)
    if data.shape[0] == 0:
        raise ConfigError("pre-training dataset is empty")
    if conditions.shape[0] != data.shape[0]:
        raise ConfigError("need one condition per data point")
    if n_conditions is None:
        n_conditions = int(conditions.max()) + 1
    policy = GaussianStepPolicy.init(schedule, n_conditions, hidden=hidden, seed=seed)
    rng = np.random.default_rng(seed + 1)
    weight = 1.0 / policy.sigmas
    weight /= weight.mean()
    m = {k: np.zeros_like(v) for k, v in policy.params.items()}
    v = {k: np.zeros_like(p) for k, p in policy.params.items()}
    b1, b2, step = 0.9, 0.999, 0
    n = data.shape[0]
    for epoch in range(epochs):
        lr_t = lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            x0, c = data[idx], conditions[idx]
            t = rng.integers(1, schedule.T + 1, idx.size)
            x_t = forward_sample(schedule, x0, t, rng.standard_normal((idx.size, 2)))
            target = schedule.posterior_mean(x0, x_t, t)
            mu, cache = policy.mean(x_t, t, c, with_cache=True)
            grads = policy.backward(cache, 2.0 * weight[t - 1][:, None] * (mu - target) / idx.size)
            step += 1
            for name in policy.PARAM_NAMES:
                g = grads[name]
                m[name] = b1 * m[name] + (1 - b1) * g
                v[name] = b2 * v[name] + (1 - b2) * g * g
                m_hat = m[name] / (1 - b1 ** step)
                v_hat = v[name] / (1 - b2 ** step)
                policy.params[name] -= lr_t * m_hat / (np.sqrt(v_hat) + 1e-8)
    return policy


def ring_dataset(n: int, n_conditions: int, seed: int = 0, n_modes: int = 8, radius: float = 2.0,
                 sigma: float = 0.1):
    """Full ring mixture for every condition: the reference knows no preferences."""
    from .diffusion import sample_ring

    rng = np.random.default_rng(seed)
    points = sample_ring(n, rng, n_modes, radius, sigma)
    return points, np.arange(n) % n_conditions
