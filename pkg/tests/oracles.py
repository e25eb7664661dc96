"""Independent reference computations used by the tests.

Nothing here imports the package's kernels: formulas are restated from scratch
so a shared bug cannot make a check pass.
"""
from __future__ import annotations

import math

import numpy as np


def kernel_f(kind: str, alpha: float | None, x: np.ndarray) -> np.ndarray:
    """f(x) with the x -> 0 limits; +inf where f diverges."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x > 0
    xp = x[pos]
    if kind == "reverse-kl":
        out[pos], limit = xp * np.log(xp), 0.0
    elif kind == "forward-kl":
        out[pos], limit = -np.log(xp), math.inf
    elif kind == "alpha":
        a = alpha
        out[pos] = (xp ** (1 - a) - (1 - a) * xp - a) / (a * (a - 1))
        limit = 1.0 / (1.0 - a)
    else:
        out[pos] = xp * np.log(2 * xp / (xp + 1)) + np.log(2 / (xp + 1))
        limit = math.log(2)
    out[~pos] = limit
    return out


def rl_objective(policies: np.ndarray, q, pi_ref, beta, kind, alpha) -> np.ndarray:
    """E_pi[Q] - beta sum_a pi_ref f(pi / pi_ref) for each row of ``policies``."""
    policies = np.atleast_2d(policies)
    ratio = policies / pi_ref
    penalty = np.sum(pi_ref * kernel_f(kind, alpha, ratio), axis=1)
    return policies @ q - beta * penalty


def simplex_grid(n: int, step: float) -> np.ndarray:
    m = int(round(1 / step))
    if n == 1:
        return np.ones((1, 1))
    if n == 2:
        a = np.arange(m + 1) / m
        return np.stack([a, 1 - a], axis=1)
    i, j = np.meshgrid(np.arange(m + 1), np.arange(m + 1), indexing="ij")
    keep = i + j <= m
    a, b = i[keep] / m, j[keep] / m
    return np.stack([a, b, np.clip(1 - a - b, 0, None)], axis=1)


def brute_force_optimum(q, pi_ref, beta, kind, alpha=None, step=1e-2, levels=60, points=41):
    """Simplex grid search, then repeated zoomed grids around the incumbent.

    The objective is concave in the policy, so shrinking a feasible grid about
    the best point converges to the global maximum, including optima with mass
    far below the base grid step.
    """
    q, pi_ref = np.asarray(q, float), np.asarray(pi_ref, float)
    n = q.size
    grid = simplex_grid(n, step)
    vals = rl_objective(grid, q, pi_ref, beta, kind, alpha)
    best, best_val = grid[np.argmax(vals)], float(vals.max())
    if n == 1:
        return best, best_val
    span = step
    offsets = np.linspace(-1, 1, points)
    for _ in range(levels):
        axes = [np.clip(best[i] + span * offsets, 0, 1) for i in range(n - 1)]
        free = np.stack([a.ravel() for a in np.meshgrid(*axes, indexing="ij")], axis=1)
        cand = np.concatenate([free, 1 - free.sum(axis=1, keepdims=True)], axis=1)
        cand = cand[cand[:, -1] >= 0]
        vals = rl_objective(cand, q, pi_ref, beta, kind, alpha)
        k = int(np.argmax(vals))
        if vals[k] >= best_val:
            best, best_val = cand[k], float(vals[k])
        span *= 0.5
    return best, best_val


def exponential_tilt(q, pi_ref, beta):
    w = np.asarray(pi_ref, float) * np.exp((np.asarray(q, float) - np.max(q)) / beta)
    return w / w.sum()
