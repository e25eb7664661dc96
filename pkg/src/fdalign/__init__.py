"""f-divergence preference optimization: kernels, losses, solvers, toy trainers and metrics."""
from .divergence import (
    FORWARD_KL,
    JS,
    REVERSE_KL,
    Divergence,
    DomainError,
    Kind,
    RangeError,
    ShapeError,
    SupportError,
    alpha_divergence,
    divergence_value,
    parse_divergence,
)
from .loss import LossConfig, RatioPair, closed_form_gradients, generalized_loss, gradient_ratio, loss_gradients
from .policy import AlignmentProblem, recover_q_from_policy, solve_optimal_policy

__version__ = "0.1.0"

__all__ = [
    "FORWARD_KL",
    "JS",
    "REVERSE_KL",
    "AlignmentProblem",
    "Divergence",
    "DomainError",
    "Kind",
    "LossConfig",
    "RangeError",
    "RatioPair",
    "ShapeError",
    "SupportError",
    "alpha_divergence",
    "closed_form_gradients",
    "divergence_value",
    "generalized_loss",
    "gradient_ratio",
    "loss_gradients",
    "parse_divergence",
    "recover_q_from_policy",
    "solve_optimal_policy",
]
