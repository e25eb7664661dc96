"""f-divergence kernels: f, f', f'', (f')^-1 and finite-distribution divergences.

Natural log throughout. Every kernel accepts scalars or numpy arrays and
returns the same shape it was given.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

LN2 = math.log(2.0)
_TINY = 1e-300


class DomainError(ValueError):
    """Argument outside the domain x > 0 of f and its derivatives."""


class RangeError(ValueError):
    """Argument outside the range of f', so (f')^-1 is undefined."""


class SupportError(ValueError):
    """p1 is not dominated by p2."""


class ShapeError(ValueError):
    """Mismatched lengths or image dimensions."""


class Kind(enum.Enum):
    REVERSE_KL = "reverse-kl"
    FORWARD_KL = "forward-kl"
    ALPHA = "alpha"
    JS = "js"


def _out(value, scalar: bool):
    return float(value) if scalar else value


def _positive(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"f-divergence kernels need x > 0, got {x!r}")
    return arr, arr.ndim == 0


@dataclass(frozen=True)
class Divergence:
    """One member of the f-divergence family.

    ``alpha`` is only meaningful for ``Kind.ALPHA`` and must lie in (0, 1);
    the endpoints are the two KL kinds.
    """

    kind: Kind
    alpha: float | None = None

    def __post_init__(self):
        if self.kind is Kind.ALPHA:
            if self.alpha is None or not (0.0 < self.alpha < 1.0):
                raise ValueError(f"alpha must lie in (0, 1), got {self.alpha!r}")
            object.__setattr__(self, "alpha", float(self.alpha))
        elif self.alpha is not None:
            raise ValueError(f"{self.kind.value} takes no alpha parameter")

    # -- construction / naming ------------------------------------------------

    @classmethod
    def parse(cls, name: str) -> "Divergence":
        """Parse ``reverse-kl``, ``forward-kl``, ``js`` or ``alpha:<value>``."""
        name = name.strip().lower()
        if name.startswith("alpha:"):
            try:
                alpha = float(name.split(":", 1)[1])
            except ValueError as exc:
                raise ValueError(f"bad alpha value in {name!r}") from exc
            return cls(Kind.ALPHA, alpha)
        for kind in (Kind.REVERSE_KL, Kind.FORWARD_KL, Kind.JS):
            if name == kind.value:
                return cls(kind)
        raise ValueError(
            f"unknown divergence {name!r}; expected reverse-kl, forward-kl, js or alpha:<a>"
        )

    @property
    def name(self) -> str:
        if self.kind is Kind.ALPHA:
            return f"alpha:{self.alpha:g}"
        return self.kind.value

    def __str__(self) -> str:
        return self.name

    # -- kernels ----------------------------------------------------------------

    def f(self, x):
        x, scalar = _positive(x)
        tiny = x < _TINY
        if self.kind is Kind.FORWARD_KL and np.any(tiny):
            raise OverflowError("forward-kl f(x) diverges to +inf as x -> 0+")
        xs = np.where(tiny, 1.0, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.kind is Kind.REVERSE_KL:
                val = xs * np.log(xs)
                limit = 0.0
            elif self.kind is Kind.FORWARD_KL:
                val = -np.log(xs)
                limit = math.inf
            elif self.kind is Kind.ALPHA:
                a = self.alpha
                val = (xs ** (1.0 - a) - (1.0 - a) * xs - a) / (a * (a - 1.0))
                limit = 1.0 / (1.0 - a)
            else:
                val = xs * np.log(2.0 * xs / (xs + 1.0)) + np.log(2.0 / (xs + 1.0))
                limit = LN2
        return _out(np.where(tiny, limit, val), scalar)

    def f_prime(self, x):
        x, scalar = _positive(x)
        if self.kind is Kind.REVERSE_KL:
            val = np.log(x) + 1.0
        elif self.kind is Kind.FORWARD_KL:
            val = -1.0 / x
        elif self.kind is Kind.ALPHA:
            val = (1.0 - x ** (-self.alpha)) / self.alpha
        else:
            val = np.log(2.0 * x / (1.0 + x))
        return _out(val, scalar)

    def f_double_prime(self, x):
        x, scalar = _positive(x)
        if self.kind is Kind.REVERSE_KL:
            val = 1.0 / x
        elif self.kind is Kind.FORWARD_KL:
            val = 1.0 / (x * x)
        elif self.kind is Kind.ALPHA:
            val = x ** (-(self.alpha + 1.0))
        else:
            val = 1.0 / (x * (1.0 + x))
        return _out(val, scalar)

    @property
    def f_prime_sup(self) -> float:
        """Supremum of the range of f' (exclusive); +inf for reverse KL."""
        if self.kind is Kind.REVERSE_KL:
            return math.inf
        if self.kind is Kind.FORWARD_KL:
            return 0.0
        if self.kind is Kind.ALPHA:
            return 1.0 / self.alpha
        return LN2

    def f_prime_inverse(self, y):
        y = np.asarray(y, dtype=float)
        scalar = y.ndim == 0
        sup = self.f_prime_sup
        if np.any(~np.isfinite(y)) or np.any(y >= sup):
            raise RangeError(
                f"(f')^-1 for {self.name}: y={y.tolist()!r} is outside the admissible interval (-inf, {sup!r})"
            )
        if self.kind is Kind.REVERSE_KL:
            val = np.exp(y - 1.0)
        elif self.kind is Kind.FORWARD_KL:
            val = -1.0 / y
        elif self.kind is Kind.ALPHA:
            val = (1.0 - self.alpha * y) ** (-1.0 / self.alpha)
        else:
            # e^y / (2 - e^y); 2 - e^y = -2 expm1(y - ln 2) keeps precision near ln 2
            ey = np.exp(y)
            val = ey / -np.expm1(y - LN2) / 2.0
        return _out(val, scalar)

    # -- log-ratio forms used by the trainers ----------------------------------

    def f_prime_log(self, u):
        """f'(e^u), evaluated without forming e^u where possible."""
        u = np.asarray(u, dtype=float)
        if self.kind is Kind.REVERSE_KL:
            val = u + 1.0
        elif self.kind is Kind.FORWARD_KL:
            with np.errstate(over="ignore"):  # -inf is the exact limit as x -> 0
                val = -np.exp(-u)
        elif self.kind is Kind.ALPHA:
            with np.errstate(over="ignore"):
                val = -np.expm1(-self.alpha * u) / self.alpha
        else:
            val = LN2 - np.logaddexp(0.0, -u)
        return _out(val, u.ndim == 0)

    def log_x_f_double_prime(self, u):
        """log(x f''(x)) at x = e^u; d f'(e^u)/du = x f''(x)."""
        u = np.asarray(u, dtype=float)
        if self.kind is Kind.REVERSE_KL:
            val = np.zeros_like(u)
        elif self.kind is Kind.FORWARD_KL:
            val = -u
        elif self.kind is Kind.ALPHA:
            val = -self.alpha * u
        else:
            val = -np.logaddexp(0.0, u)
        return _out(val, u.ndim == 0)


REVERSE_KL = Divergence(Kind.REVERSE_KL)
FORWARD_KL = Divergence(Kind.FORWARD_KL)
JS = Divergence(Kind.JS)


def alpha_divergence(alpha: float) -> Divergence:
    return Divergence(Kind.ALPHA, alpha)


def parse_divergence(value: str | Divergence) -> Divergence:
    if isinstance(value, Divergence):
        return value
    return Divergence.parse(value)


def as_distribution(p, atol: float = 1e-9) -> np.ndarray:
    """Validate a finite distribution: non-negative entries summing to 1."""
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ShapeError("a distribution must be a non-empty 1-D vector")
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise ValueError("distribution entries must be finite and non-negative")
    if abs(arr.sum() - 1.0) > atol:
        raise ValueError(f"distribution sums to {arr.sum()!r}, not 1")
    return arr


def divergence_value(div: Divergence, p1, p2) -> float:
    """D_f(p1 || p2) = sum_i p2_i f(p1_i / p2_i) over a shared finite support."""
    p1 = as_distribution(p1)
    p2 = as_distribution(p2)
    if p1.shape != p2.shape:
        raise ShapeError(f"length mismatch: {p1.size} vs {p2.size}")
    off = p2 == 0
    if np.any(p1[off] > 0):
        raise SupportError("p1 puts mass where p2 has none")
    keep = ~off
    ratio = p1[keep] / p2[keep]
    zero = ratio == 0
    terms = np.empty_like(ratio)
    if np.any(zero):
        # analytic limit f(0+): 0 (reverse KL), ln 2 (JS), 1/(1-a) (alpha)
        terms[zero] = div.f(np.full(zero.sum(), _TINY / 10))
    if np.any(~zero):
        terms[~zero] = div.f(ratio[~zero])
    return float(max(np.dot(p2[keep], terms), 0.0))
