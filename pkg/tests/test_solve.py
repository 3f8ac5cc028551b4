from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threshold_crl.mdp import HIGH, LOW, ClientModel, ClientState, reference_model, tiny_model
from threshold_crl.solve import (ConvergenceError, NotThreshold, ThresholdFunction, advantage_table,
                                 bellman_backup, decentralize, dual_function, dual_grid,
                                 evaluate_policy, extract_threshold, lambda_max, monotone_violation,
                                 occupancy_measure, q_values, threshold_condition,
                                 uniform_rho, value_iteration, value_iteration_grid)

from oracle import brute_force_optimal, model_kernel

TINY = tiny_model()
ZERO_COST = TINY.with_cost(delta=0.0, c_stall=0.0, c_term=0.0, normalize=False)

# One backup from J = 0 at lambda = 0.5 on TINY; cost scale is 1/2.05 and
# LOW wins everywhere since both actions share the expected stage cost.
FIRST_BACKUP = np.array([1.0, 1.0475, 0.05, 0.0975, 0.05, 0.0975]) / 2.05


def test_first_backup_matches_hand_values():
    J1, pol = bellman_backup(np.zeros(6), 0.5, TINY)
    assert np.allclose(J1, FIRST_BACKUP, atol=1e-15)
    assert (pol == LOW).all()


def test_first_backup_lambda_zero_is_min_one_step_cost():
    J1, _ = bellman_backup(np.zeros(6), 0.0, TINY)
    assert np.allclose(J1, TINY.kernel.cbar.min(axis=1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 5))
def test_bellman_contraction(seed, lam):
    rng = np.random.default_rng(seed)
    m = reference_model()
    J, Jt = rng.normal(size=(2, m.n_states)) * 10
    a, _ = bellman_backup(J, lam, m)
    b, _ = bellman_backup(Jt, lam, m)
    assert np.abs(a - b).max() <= m.gamma * np.abs(J - Jt).max() + 1e-12


def test_vi_zero_cost_returns_zero_and_low():
    vi = value_iteration(ZERO_COST, 0.0, tol=1e-9)
    assert np.all(vi.J == 0.0) and (vi.policy == LOW).all()


def test_vi_fixed_point_residual():
    vi = value_iteration(TINY, 0.5, tol=1e-9)
    TJ, _ = bellman_backup(vi.J, 0.5, TINY)
    assert np.abs(TJ - vi.J).max() <= 1e-8


def test_vi_raises_with_residual():
    with pytest.raises(ConvergenceError) as err:
        value_iteration(TINY, 0.5, tol=1e-12, max_iter=3)
    assert err.value.residual > 0


@pytest.mark.parametrize("lam", [0.0, 0.1, 0.25, 0.3, 0.5, 1.0, 2.0])
@pytest.mark.parametrize("cost", [(0.05, 1.0, 1.0), (1.0, 0.5, 0.2), (0.3, 3.0, 0.0)])
def test_vi_matches_policy_enumeration(lam, cost):
    m = TINY.with_cost(delta=cost[0], c_stall=cost[1], c_term=cost[2])
    P, c = model_kernel(m)
    J_bf, pi_bf = brute_force_optimal(P, c, m.gamma, lam)
    vi = value_iteration(m, lam, tol=1e-11)
    assert np.abs(vi.J - J_bf).max() < 1e-9
    Q = q_values(J_bf, lam, m)
    # Where the two actions are not tied the optimal action is unique.
    clear = np.abs(Q[:, 0] - Q[:, 1]) > 1e-9
    assert (vi.policy[clear] == pi_bf[clear]).all()


def test_grid_vi_agrees_with_scalar_vi():
    m = reference_model()
    lams = np.array([0.0, 0.3, 1.7])
    J, pol = value_iteration_grid(m, lams, tol=1e-10)
    for lam, j, p in zip(lams, J, pol):
        vi = value_iteration(m, lam, tol=1e-10)
        assert np.abs(j - vi.J).max() < 1e-9
        assert (p == vi.policy).all()


def test_extract_threshold_trivial_policies():
    m = reference_model()
    assert extract_threshold(np.full(m.n_states, HIGH), m) == ThresholdFunction((m.L,) * (m.M + 1))
    assert extract_threshold(np.full(m.n_states, LOW), m) == ThresholdFunction((-1,) * (m.M + 1))


def test_extract_threshold_witness():
    m = TINY
    pol = np.full(m.n_states, LOW)
    pol[m.index(ClientState(1, 1))] = HIGH
    assert extract_threshold(pol, m) == NotThreshold(y=1, x_low=0, x_high=1)


def test_threshold_roundtrip():
    m = reference_model()
    f = ThresholdFunction((3, 2, 0, -1))
    assert extract_threshold(f.policy(m), m) == f


def test_tiny_lambda_sweep_is_threshold():
    for lam in np.arange(0, 2.0001, 0.25):
        vi = value_iteration(TINY, lam)
        assert isinstance(extract_threshold(vi.policy, TINY), ThresholdFunction)


def test_switching_condition_agrees_with_greedy_on_tiny():
    for lam in [0.0, 0.5, 1.0]:
        vi = value_iteration(TINY, lam, tol=1e-11)
        for s in TINY.states():
            lhs, r, a = threshold_condition(vi.J, s, lam, TINY)
            if abs(lhs - r) > 1e-9:
                assert a == vi.policy[TINY.index(s)]


def test_switching_condition_zero_cost():
    for s in ZERO_COST.states():
        lhs, r, a = threshold_condition(np.zeros(6), s, 0.0, ZERO_COST)
        assert lhs == 0 and r == 0 and a == LOW


def test_switching_constant_is_exactly_zero():
    from threshold_crl.solve import switching_constant
    for m in (TINY, reference_model()):
        assert all(switching_constant(s, m) == 0.0 for s in m.states())


def test_q_gap_factorization():
    # Q(HIGH) - Q(LOW) = gamma (1 - alpha) (mu1 - mu2) (lhs - r)
    m = reference_model()
    lam = 0.4
    vi = value_iteration(m, lam, tol=1e-11)
    Q = q_values(vi.J, lam, m)
    k = m.gamma * (1 - m.alpha) * (m.mu_high - m.mu_low)
    for s in m.states():
        lhs, r, _ = threshold_condition(vi.J, s, lam, m)
        i = m.index(s)
        assert Q[i, 0] - Q[i, 1] == pytest.approx(k * (lhs - r), abs=1e-12)


def test_monotone_differences_tiny():
    for lam in np.linspace(0, 8, 21):
        J = value_iteration(TINY, lam, tol=1e-11).J
        assert monotone_violation(J, TINY) <= 1e-9
        assert monotone_violation(J, TINY, "drain") <= 1e-9


def test_evaluate_trivial_policies():
    low = evaluate_policy(np.full(6, LOW), TINY)
    assert np.all(low.J_g == 0)
    high = evaluate_policy(np.full(6, HIGH), TINY)
    assert np.allclose(high.J_g, 1 / (1 - TINY.gamma), atol=1e-12)


def test_eval_of_optimal_matches_vi():
    lam = 0.3
    vi = value_iteration(TINY, lam, tol=1e-10)
    ev = evaluate_policy(vi.policy, TINY, lam)
    assert np.abs(ev.J_c + lam * ev.J_g - vi.J).max() <= 2e-10


def test_lagrangian_combination():
    rho = uniform_rho(TINY)
    ev = evaluate_policy(np.full((6, 2), 0.5), TINY, 0.7, budget_share=2.5)
    assert ev.J_lagrangian(rho) == pytest.approx(rho @ ev.J_c + 0.7 * (rho @ ev.J_g) - 0.7 * 2.5,
                                                 abs=1e-10)


@pytest.mark.slow
def test_uniform_policy_value_matches_monte_carlo():
    m = TINY
    P, c = model_kernel(m)
    S = m.n_states
    rng = np.random.default_rng(2024)
    runs, H = 5500, 300  # 6 * 5500 * 300 ~ 1e7 transitions
    starts = np.repeat(np.arange(S), runs)
    s = starts.copy()
    total = np.zeros(s.size)
    disc = 1.0
    cdf = np.cumsum(P, axis=2)
    for _ in range(H):
        a = (rng.random(s.size) < 0.5).astype(int)
        total += disc * c[s, a]
        u = rng.random(s.size)[:, None]
        s = (u >= cdf[s, a]).sum(axis=1).clip(max=S - 1)
        disc *= m.gamma
    ev = evaluate_policy(np.full((S, 2), 0.5), m)
    for i in range(S):
        x = total[starts == i]
        assert abs(x.mean() - ev.J_c[i]) <= 3 * x.std(ddof=1) / np.sqrt(x.size)


def test_advantage_properties():
    rng = np.random.default_rng(3)
    m = reference_model()
    pi = rng.dirichlet([1, 1], size=m.n_states)
    adv = advantage_table(pi, m, 0.8)
    assert np.abs((pi * adv.A_lambda).sum(axis=1)).max() <= 1e-10
    assert np.array_equal(adv.A_lambda, adv.A_c + 0.8 * adv.A_g)


def test_optimal_policy_has_minimal_advantage():
    lam = 0.2
    vi = value_iteration(TINY, lam, tol=1e-11)
    A = advantage_table(vi.policy, TINY, lam).A_lambda
    own = A[np.arange(6), vi.policy]
    other = A[np.arange(6), 1 - vi.policy]
    assert (own <= other + 1e-9).all()
    assert (own >= -1e-9).all()


def test_occupancy_properties():
    rng = np.random.default_rng(5)
    pi = rng.dirichlet([1, 1], size=6)
    rho = rng.dirichlet(np.ones(6))
    occ = occupancy_measure(pi, TINY, rho)
    assert abs(occ.d.sum() - 1) <= 1e-10
    assert (occ.d >= (1 - TINY.gamma) * rho - 1e-15).all()
    small = ClientModel(0.9, 0.3, 0.5, 0.05, 2, 1, 0.01)
    d = occupancy_measure(pi, small, rho).d
    assert 0.5 * np.abs(d - rho).sum() <= 0.01


def test_performance_difference_identity():
    rng = np.random.default_rng(11)
    lam = 0.6
    rho = uniform_rho(TINY)
    pi = rng.dirichlet([1, 1], size=6)
    pi2 = np.clip(pi + rng.normal(scale=0.2, size=(6, 1)) * np.array([1, -1]), 0.01, 0.99)
    pi2 /= pi2.sum(axis=1, keepdims=True)
    A = advantage_table(pi, TINY, lam).A_lambda
    d2 = occupancy_measure(pi2, TINY, rho).d
    e1, e2 = evaluate_policy(pi, TINY, lam), evaluate_policy(pi2, TINY, lam)
    lhs = e2.J_lagrangian(rho) - e1.J_lagrangian(rho)
    rhs = (d2 * (pi2 * A).sum(axis=1)).sum() / (1 - TINY.gamma)
    assert lhs == pytest.approx(rhs, abs=1e-8)


CLIENTS2 = [(TINY, uniform_rho(TINY))] * 2
K_BAR = 0.5 / (1 - TINY.gamma)


def test_dual_at_zero_is_unconstrained_optimum():
    dv = dual_function(0.0, CLIENTS2, K_BAR)
    opt = sum(rho @ value_iteration(m, 0.0).J for m, rho in CLIENTS2)
    assert dv.D == pytest.approx(opt, abs=1e-9)


def test_dual_grid_matches_pointwise_and_is_concave():
    lams, D = dual_grid(CLIENTS2, K_BAR, 2.0, step=0.05)
    for i in (0, 7, 23, 40):
        assert D[i] == pytest.approx(dual_function(lams[i], CLIENTS2, K_BAR).D, abs=1e-8)
    assert (D[1:-1] >= 0.5 * (D[:-2] + D[2:]) - 1e-9).all()


def test_lambda_interval():
    assert lambda_max(2, TINY.gamma, K_BAR) == pytest.approx(8.0)
    m = reference_model()
    assert lambda_max(6, m.gamma, 2 / (1 - m.gamma)) == pytest.approx(6.0)


def test_decentralization_tiny_pair():
    dc = decentralize(CLIENTS2, K_BAR)
    assert abs(dc.slackness) <= 1e-2
    assert abs(dc.duality_gap) <= dc.step * len(CLIENTS2) / (1 - TINY.gamma)
    assert dc.J_g.sum() <= K_BAR + 1e-9


def test_decentralization_non_binding_budget():
    dc = decentralize(CLIENTS2, 2 / (1 - TINY.gamma))
    assert dc.lam_star == 0.0 and dc.slackness == 0.0


def test_reference_monotone_differences():
    m = reference_model()
    J, _ = value_iteration_grid(m, np.linspace(0, 6, 21), tol=1e-11)
    for j in J:
        assert monotone_violation(j, m, "drain") <= 1e-9
