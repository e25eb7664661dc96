import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fdalign.divergence import FORWARD_KL, JS, REVERSE_KL, DomainError, ShapeError, alpha_divergence
from fdalign.loss import LossConfig
from fdalign.policy import (
    AlignmentProblem,
    InfeasibleError,
    load_problem,
    recover_q_from_policy,
    reward_reparameterize,
    solve_optimal_policy,
)

from conftest import ALL_KINDS, FOUR
from oracles import brute_force_optimum, exponential_tilt, rl_objective


def _problem(rng, div, max_actions=16):
    n = int(rng.integers(2, max_actions + 1))
    return AlignmentProblem(rng.uniform(-3, 3, n), rng.dirichlet(np.ones(n)), float(rng.choice([0.5, 1.0, 10.0])), div)


@pytest.mark.parametrize("d", ALL_KINDS, ids=lambda d: d.name)
def test_constant_q_returns_reference(d):
    ref = np.array([0.2, 0.5, 0.3])
    sol = solve_optimal_policy(AlignmentProblem(np.full(3, 0.7), ref, 2.0, d))
    np.testing.assert_allclose(sol.policy, ref, atol=1e-12)
    assert sol.lam == pytest.approx(0.7 - 2.0 * float(d.f_prime(1.0)), abs=1e-9)


def test_reverse_kl_example():
    sol = solve_optimal_policy(AlignmentProblem([1.0, 0.0], [0.5, 0.5], 1.0, REVERSE_KL))
    np.testing.assert_allclose(sol.policy, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)
    q = recover_q_from_policy(sol.policy, [0.5, 0.5], 1.0, REVERSE_KL, sol.lam)
    np.testing.assert_allclose(q, [1.0, 0.0], atol=1e-8)


def test_js_example_against_fine_grid():
    sol = solve_optimal_policy(AlignmentProblem([1.0, 0.0], [0.5, 0.5], 1.0, JS))
    grid = np.linspace(0, 1, 100001)
    vals = rl_objective(np.stack([grid, 1 - grid], 1), np.array([1.0, 0.0]), np.array([0.5, 0.5]), 1.0, "js", None)
    assert sol.policy[0] == pytest.approx(grid[np.argmax(vals)], abs=1e-4)


def test_round_trip_reverse_kl_fixed_policy():
    pol = np.array([0.7311, 0.2689])
    lam = 1.0 - 1.0 * float(REVERSE_KL.f_prime(pol[0] / 0.5))
    q = recover_q_from_policy(pol, [0.5, 0.5], 1.0, REVERSE_KL, lam)
    # four printed digits carry ~2e-4 of log-ratio error
    np.testing.assert_allclose(q, [1.0, 0.0], atol=5e-4)


@pytest.mark.parametrize("d", FOUR, ids=lambda d: d.name)
def test_solver_matches_brute_force_oracle(d):
    rng = np.random.default_rng(7)
    for _ in range(10):
        prob = _problem(rng, d, max_actions=3)
        sol = solve_optimal_policy(prob)
        _, best = brute_force_optimum(prob.q_values, prob.pi_ref, prob.beta, d.kind.value, d.alpha)
        assert prob.objective(sol.policy) == pytest.approx(best, abs=1e-6)
        assert prob.objective(sol.policy) >= best - 1e-6


def test_reverse_kl_matches_tilt():
    rng = np.random.default_rng(3)
    for _ in range(50):
        prob = _problem(rng, REVERSE_KL)
        np.testing.assert_allclose(solve_optimal_policy(prob).policy,
                                   exponential_tilt(prob.q_values, prob.pi_ref, prob.beta), atol=1e-10)


@pytest.mark.parametrize("d", ALL_KINDS, ids=lambda d: d.name)
def test_round_trip_recovers_q(d):
    rng = np.random.default_rng(11)
    for _ in range(40):
        prob = _problem(rng, d)
        sol = solve_optimal_policy(prob)
        assert sol.residual <= 1e-10 and np.all(sol.policy > 0)
        assert abs(sol.policy.sum() - 1) <= 1e-10
        q = recover_q_from_policy(sol.policy, prob.pi_ref, prob.beta, d, sol.lam)
        np.testing.assert_allclose(q, prob.q_values, atol=1e-8)


@given(st.integers(0, 2**32 - 1), st.sampled_from(FOUR))
def test_mass_strictly_decreasing_along_bracket(seed, d):
    prob = _problem(np.random.default_rng(seed), d, 6)
    sol = solve_optimal_policy(prob)
    lams = sol.lam + np.array([-1e-3, -1e-4, 0.0, 1e-4, 1e-3]) * prob.beta
    sup = d.f_prime_sup
    lams = lams[(prob.q_values.max() - lams) / prob.beta < sup]
    masses = [prob.mass(lam) for lam in lams]
    assert all(a > b for a, b in zip(masses, masses[1:]))


def test_single_action():
    sol = solve_optimal_policy(AlignmentProblem([2.0], [1.0], 3.0, FORWARD_KL))
    assert sol.policy.tolist() == [1.0]
    assert sol.lam == pytest.approx(2.0 + 3.0)


def test_extreme_spread_still_solves_or_reports():
    # Q gaps far beyond beta push the JS optimum against its range boundary.
    prob = AlignmentProblem([200.0, 0.0, -200.0], [1 / 3] * 3, 0.01, JS)
    try:
        sol = solve_optimal_policy(prob)
    except InfeasibleError as exc:
        assert "bracket" in str(exc)
    else:
        assert abs(sol.policy.sum() - 1) < 1e-10


@pytest.mark.parametrize("cfg, ratio, expected", [
    (LossConfig(REVERSE_KL, 10.0), 1.0, 10.0),
    (LossConfig(JS, 10.0), 1.0, 0.0),
    (LossConfig(REVERSE_KL, 1.0), math.e, 2.0),
    (LossConfig(FORWARD_KL, 4.0), 2.0, -2.0),
])
def test_reward_reparameterize(cfg, ratio, expected):
    assert reward_reparameterize(cfg, 0.2 * ratio, 0.2) == pytest.approx(expected, abs=1e-14)


def test_reward_reparameterize_domain():
    with pytest.raises(DomainError):
        reward_reparameterize(LossConfig(JS), 0.0, 0.5)


def test_recover_q_cases():
    np.testing.assert_allclose(recover_q_from_policy([0.3, 0.7], [0.3, 0.7], 1.0, JS, 0.0), [0.0, 0.0], atol=1e-15)
    with pytest.raises(ShapeError):
        recover_q_from_policy([0.5, 0.5], [1.0], 1.0, JS, 0.0)


def test_problem_validation(tmp_path):
    with pytest.raises(ValueError):
        AlignmentProblem([1.0, 0.0], [1.0, 0.0], 1.0, JS)
    with pytest.raises(ShapeError):
        AlignmentProblem([1.0], [0.5, 0.5], 1.0, JS)
    with pytest.raises(ValueError):
        AlignmentProblem.from_dict({"q": [1], "pi_ref": [1], "beta": 1, "divergence": "js", "extra": 1})
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"q": [1, 0], "pi_ref": [0.5, 0.5], "beta": 1, "divergence": "alpha:0.5"}))
    assert load_problem(path).divergence == alpha_divergence(0.5)
