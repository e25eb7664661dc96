"""Optimal policy under an f-divergence penalty, via the KKT conditions.

Stationarity gives pi(a) = pi_ref(a) (f')^-1((Q(a) - lam) / beta); the
multiplier lam is the unique root of the normalization mass, found by
bisection because (f')^-1 has one-sided domains for every kernel except
reverse KL.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .divergence import (
    Divergence,
    DomainError,
    ShapeError,
    as_distribution,
    divergence_value,
    parse_divergence,
)
from .loss import LossConfig

MAX_ITER = 200
TOL = 1e-10


class InfeasibleError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AlignmentProblem:
    q_values: np.ndarray
    pi_ref: np.ndarray
    beta: float
    divergence: Divergence

    def __post_init__(self):
        q = np.asarray(self.q_values, dtype=float)
        ref = as_distribution(self.pi_ref)
        if q.shape != ref.shape:
            raise ShapeError(f"{q.size} Q values for {ref.size} actions")
        if np.any(~np.isfinite(q)):
            raise ValueError("Q values must be finite")
        if np.any(ref <= 0):
            raise ValueError("reference policy must be strictly positive on every action")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta!r}")
        object.__setattr__(self, "q_values", q)
        object.__setattr__(self, "pi_ref", ref)
        object.__setattr__(self, "divergence", parse_divergence(self.divergence))

    @classmethod
    def from_dict(cls, data: dict) -> "AlignmentProblem":
        unknown = set(data) - {"q", "pi_ref", "beta", "divergence"}
        if unknown:
            raise ValueError(f"unknown problem keys: {sorted(unknown)}")
        return cls(
            np.asarray(data["q"], dtype=float),
            np.asarray(data["pi_ref"], dtype=float),
            float(data["beta"]),
            parse_divergence(data["divergence"]),
        )

    def mass(self, lam: float) -> float:
        """sum_a pi_ref(a) (f')^-1((Q(a) - lam) / beta); strictly decreasing in lam."""
        y = (self.q_values - lam) / self.beta
        return float(np.dot(self.pi_ref, self.divergence.f_prime_inverse(y)))

    def objective(self, policy) -> float:
        """E_pi[Q] - beta D_f(pi || pi_ref)."""
        return float(np.dot(policy, self.q_values)) - self.beta * divergence_value(
            self.divergence, policy, self.pi_ref
        )


@dataclass(frozen=True)
class PolicySolution:
    policy: np.ndarray
    lam: float
    residual: float
    iterations: int = 0

    def to_dict(self) -> dict:
        return {
            "policy": [float(p) for p in self.policy],
            "lambda": float(self.lam),
            "residual": float(self.residual),
        }


def _lower_bound(problem: AlignmentProblem) -> float:
    """Smallest lam for which every (Q - lam)/beta stays inside range(f')."""
    sup = problem.divergence.f_prime_sup
    if math.isinf(sup):
        return -math.inf
    return float(problem.q_values.max() - problem.beta * sup)


def solve_optimal_policy(problem: AlignmentProblem) -> PolicySolution:
    div, beta, q = problem.divergence, problem.beta, problem.q_values
    f1 = float(div.f_prime(1.0))
    if q.size == 1:
        return PolicySolution(np.ones(1), float(q[0] - beta * f1), 0.0)

    # lam = Q_max - beta f'(1) puts every ratio <= 1, so mass <= 1 there.
    hi = float(q.max() - beta * f1)
    lo = float(q.min() - beta * f1)
    bound = _lower_bound(problem)
    if lo <= bound:
        # Walk toward the open boundary until the mass exceeds 1.
        gap = hi - bound
        for _ in range(1100):
            gap *= 0.5
            lo = bound + gap
            if lo <= bound:
                break
            if problem.mass(lo) > 1.0:
                break
        else:
            lo = bound
        if lo <= bound or problem.mass(lo) <= 1.0:
            raise InfeasibleError(
                f"cannot bracket the multiplier: mass stays <= 1 down to the "
                f"domain boundary lam={bound!r} (Q spread {np.ptp(q)!r}, beta={beta!r})"
            )
    m_lo, m_hi = problem.mass(lo), problem.mass(hi)
    if not (m_lo >= 1.0 >= m_hi):
        raise InfeasibleError(f"bracket [{lo!r}, {hi!r}] has masses [{m_lo!r}, {m_hi!r}]")

    iteration = 0
    for iteration in range(1, MAX_ITER + 1):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        m = problem.mass(mid)
        if m > 1.0:
            lo, m_lo = mid, m
        else:
            hi, m_hi = mid, m
        if abs(m - 1.0) <= 1e-14:
            break
    lam, mass = (lo, m_lo) if abs(m_lo - 1.0) < abs(m_hi - 1.0) else (hi, m_hi)
    residual = abs(mass - 1.0)
    if residual > TOL:
        raise ConvergenceError(
            f"bisection stopped after {iteration} iterations with residual {residual!r}"
        )
    policy = problem.pi_ref * div.f_prime_inverse((q - lam) / beta)
    return PolicySolution(policy, lam, residual, iteration)


def exponential_tilt(q_values, pi_ref, beta: float) -> np.ndarray:
    """Reverse-KL optimum pi_ref e^{Q/beta} / Z."""
    logits = np.log(pi_ref) + np.asarray(q_values, dtype=float) / beta
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def reward_reparameterize(cfg: LossConfig, p_theta: float, p_ref: float) -> float:
    """beta f'(p_theta / p_ref); the additive constant is pinned to 0."""
    if not (p_theta > 0 and p_ref > 0):
        raise DomainError(f"probabilities must be positive, got {p_theta!r}, {p_ref!r}")
    return float(cfg.beta * cfg.divergence.f_prime(p_theta / p_ref))


def recover_q_from_policy(policy, pi_ref, beta: float, divergence: Divergence, lam: float) -> np.ndarray:
    """Q(a) = beta f'(pi(a)/pi_ref(a)) + lam."""
    policy = np.asarray(policy, dtype=float)
    pi_ref = np.asarray(pi_ref, dtype=float)
    if policy.shape != pi_ref.shape:
        raise ShapeError(f"length mismatch: {policy.size} vs {pi_ref.size}")
    if np.any(policy <= 0) or np.any(pi_ref <= 0):
        raise DomainError("policy and reference must be strictly positive")
    return beta * divergence.f_prime(policy / pi_ref) + lam


def load_problem(path: str | Path) -> AlignmentProblem:
    return AlignmentProblem.from_dict(json.loads(Path(path).read_text()))
