"""Generalized pairwise preference loss -log sigma(beta f'(X1) - beta f'(X2)).

X1 and X2 are the policy/reference probability ratios of the preferred and
dispreferred sample. Every routine here is vectorized over numpy arrays of
ratios; the dataclass wrappers exist for the scalar API.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .divergence import (
    FORWARD_KL,
    JS,
    REVERSE_KL,
    Divergence,
    DomainError,
    Kind,
    alpha_divergence,
)

_LOG_MAX = math.log(np.finfo(float).max)


@dataclass(frozen=True)
class RatioPair:
    x1: float
    x2: float

    def __post_init__(self):
        if not (self.x1 > 0 and self.x2 > 0):
            raise DomainError(f"ratios must be positive, got X1={self.x1!r}, X2={self.x2!r}")


@dataclass(frozen=True)
class LossConfig:
    divergence: Divergence
    beta: float = 10.0

    def __post_init__(self):
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive, got {self.beta!r}")


@dataclass(frozen=True)
class GradientPair:
    d_x1: float
    d_x2: float


def log_sigmoid(z):
    """log sigma(z) without overflow for large |z|."""
    return -np.logaddexp(0.0, -np.asarray(z, dtype=float))


def _margin(cfg: LossConfig, x1, x2):
    div = cfg.divergence
    return cfg.beta * (div.f_prime(x1) - div.f_prime(x2))


def loss_values(cfg: LossConfig, x1, x2):
    return -log_sigmoid(_margin(cfg, x1, x2))


def gradient_values(cfg: LossConfig, x1, x2):
    """Analytic (dL/dX1, dL/dX2) arrays."""
    div = cfg.divergence
    weight = cfg.beta * expit(-_margin(cfg, x1, x2))  # beta (1 - sigma(z))
    return -weight * div.f_double_prime(x1), weight * div.f_double_prime(x2)


def generalized_loss(cfg: LossConfig, pair: RatioPair) -> float:
    return float(loss_values(cfg, pair.x1, pair.x2))


def loss_gradients(cfg: LossConfig, pair: RatioPair) -> GradientPair:
    d1, d2 = gradient_values(cfg, pair.x1, pair.x2)
    return GradientPair(float(d1), float(d2))


def gradient_ratio(cfg: LossConfig, pair: RatioPair) -> float:
    """|dL/dX1 / dL/dX2| = f''(X1) / f''(X2); beta drops out."""
    div = cfg.divergence
    return float(div.f_double_prime(pair.x1) / div.f_double_prime(pair.x2))


def log_ratio_loss_and_grads(cfg: LossConfig, u1, u2):
    """Loss and its derivatives w.r.t. the log-ratios u = log X.

    dL/du = X dL/dX, assembled in log space so tiny or huge ratios do not
    overflow before they cancel.
    """
    div = cfg.divergence
    z = cfg.beta * (div.f_prime_log(u1) - div.f_prime_log(u2))
    loss = -log_sigmoid(z)
    log_w = math.log(cfg.beta) + log_sigmoid(-z)
    d_u1 = -np.exp(log_w + div.log_x_f_double_prime(u1))
    d_u2 = np.exp(log_w + div.log_x_f_double_prime(u2))
    return loss, d_u1, d_u2


# ---------------------------------------------------------------------------
# Per-divergence simplified gradients. These are the hand-simplified forms,
# written independently of gradient_values; the two typos in the published
# forward-KL and JS expressions are corrected.


def _safe_exp(log_value):
    log_value = np.asarray(log_value, dtype=float)
    if np.any(log_value > _LOG_MAX):
        raise OverflowError("closed-form gradient is not representable in double precision")
    return np.exp(log_value)


def closed_form_values(cfg: LossConfig, x1, x2):
    div, beta = cfg.divergence, cfg.beta
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    l1, l2 = np.log(x1), np.log(x2)
    if div.kind is Kind.REVERSE_KL:
        # -b X2^b / (X1 (X1^b + X2^b)),  b X2^(b-1) / (X1^b + X2^b)
        log_den = np.logaddexp(beta * l1, beta * l2)
        d1 = -beta * _safe_exp(beta * l2 - l1 - log_den)
        d2 = beta * _safe_exp((beta - 1.0) * l2 - log_den)
    elif div.kind is Kind.JS:
        m1, m2 = np.log1p(x1), np.log1p(x2)
        a = beta * l2 + beta * m1
        b = beta * l1 + beta * m2
        log_den = np.logaddexp(a, b)
        d1 = -beta * _safe_exp(beta * l2 + (beta - 1.0) * m1 - l1 - log_den)
        d2 = beta * _safe_exp((beta - 1.0) * l2 + beta * m1 - m2 - log_den)
    elif div.kind is Kind.ALPHA:
        alpha = div.alpha
        e1 = beta / alpha * np.exp(-alpha * l1)
        e2 = beta / alpha * np.exp(-alpha * l2)
        log_w = e1 - np.logaddexp(e1, e2)
        d1 = -beta * _safe_exp(log_w - (1.0 + alpha) * l1)
        d2 = beta * _safe_exp(log_w - (1.0 + alpha) * l2)
    else:
        e1 = beta / x1
        e2 = beta / x2
        log_w = e1 - np.logaddexp(e1, e2)
        d1 = -beta * _safe_exp(log_w - 2.0 * l1)
        d2 = beta * _safe_exp(log_w - 2.0 * l2)
    return d1, d2


def closed_form_gradients(cfg: LossConfig, pair: RatioPair) -> GradientPair:
    d1, d2 = closed_form_values(cfg, pair.x1, pair.x2)
    return GradientPair(float(d1), float(d2))


# ---------------------------------------------------------------------------
# Gradient-ratio ordering once the win ratio exceeds the loss ratio.

ORDERING_DIVERGENCES: tuple[Divergence, ...] = (
    FORWARD_KL,
    alpha_divergence(0.8),
    alpha_divergence(0.6),
    alpha_divergence(0.4),
    alpha_divergence(0.2),
    JS,
    REVERSE_KL,
)

# Each chain lists divergence names whose gradient ratios must strictly increase.
ORDERING_CHAINS: tuple[tuple[str, ...], ...] = (
    ("forward-kl", "js", "reverse-kl"),
    ("forward-kl", "alpha:0.8", "alpha:0.6", "alpha:0.4", "alpha:0.2", "reverse-kl"),
)


class OrderingError(AssertionError):
    pass


def verify_ratio_ordering(x1: float, x2: float) -> list[tuple[str, float]]:
    """Check 0 < FKL < JS < RKL < 1 and 0 < FKL < a0.8 < ... < a0.2 < RKL < 1.

    Requires 0 < x2 < x1. Returns (name, f''(x1)/f''(x2)) sorted ascending.
    """
    if not (0 < x2 < x1):
        raise ValueError(f"ordering needs 0 < X2 < X1, got X1={x1!r}, X2={x2!r}")
    ratios = {
        div.name: float(div.f_double_prime(x1) / div.f_double_prime(x2))
        for div in ORDERING_DIVERGENCES
    }
    for chain in ORDERING_CHAINS:
        values = [0.0] + [ratios[name] for name in chain] + [1.0]
        if not all(a < b for a, b in zip(values, values[1:])):
            raise OrderingError(
                f"ordering {' < '.join(chain)} violated at X1={x1!r}, X2={x2!r}: {values}"
            )
    return sorted(ratios.items(), key=lambda item: item[1])


def sigma_bt_preference(r_w: float, r_l: float) -> float:
    """Bradley-Terry probability that the first item is preferred."""
    return float(expit(r_w - r_l))
