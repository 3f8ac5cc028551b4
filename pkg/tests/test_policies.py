from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threshold_crl.mdp import HIGH, LOW, ClientState, reference_model, tiny_model
from threshold_crl.npg import SoftThresholdPolicy
from threshold_crl.policies import (PolicyConfigError, greedy_buffer_assign, hard_threshold_action,
                                    index_assign, index_scores, vanilla_assign)
from threshold_crl.solve import ThresholdFunction, extract_threshold, value_iteration

TINY = tiny_model()
REF = reference_model()


def _states(xs, ys=None):
    ys = ys or [0] * len(xs)
    return [ClientState(x, y) for x, y in zip(xs, ys)]


def test_hard_threshold_rule():
    f = ThresholdFunction((1, -1))
    assert hard_threshold_action(f, ClientState(1, 0)) == HIGH
    assert hard_threshold_action(f, ClientState(2, 0)) == LOW
    assert hard_threshold_action(f, ClientState(0, 1)) == LOW


def test_vanilla_is_all_low():
    assert vanilla_assign(_states([0, 1, 2])) == [LOW, LOW, LOW]


def test_greedy_example():
    assert greedy_buffer_assign(_states([0, 3, 1]), 2) == [HIGH, LOW, HIGH]


def test_greedy_ties_prefer_more_stalls_then_lower_index():
    assert greedy_buffer_assign(_states([1, 1, 1], [0, 2, 0]), 1) == [LOW, HIGH, LOW]
    assert greedy_buffer_assign(_states([1, 1, 1]), 2) == [HIGH, HIGH, LOW]


def test_greedy_zero_budget_and_overfull_budget():
    assert greedy_buffer_assign(_states([0, 1]), 0) == [LOW, LOW]
    with pytest.raises(PolicyConfigError):
        greedy_buffer_assign(_states([0, 1]), 3)


def test_index_example():
    models = [REF] * 3
    pols = [SoftThresholdPolicy(np.full(REF.n_states, v)) for v in (2.0, -1.0, 0.5)]
    assert index_assign(pols, _states([3, 3, 3]), 2, models) == [HIGH, LOW, HIGH]


def test_index_handles_fewer_clients_than_slots():
    models = [REF] * 6
    pols = [SoftThresholdPolicy(np.random.default_rng(n).normal(size=REF.n_states))
            for n in range(6)]
    states = _states([0, 1, 2, 3])
    out = index_assign(pols[:4], states, 6, models[:4])
    assert out == [HIGH] * 4


def test_index_missing_parameters_and_bad_score():
    pols = [SoftThresholdPolicy(np.zeros(TINY.n_states))]
    with pytest.raises(PolicyConfigError):
        index_assign(pols, _states([0, 0]), 1, [TINY, TINY])
    with pytest.raises(PolicyConfigError):
        index_assign(pols, _states([0]), 1, [TINY], score="bogus")
    with pytest.raises(PolicyConfigError):
        index_scores(pols, [ClientState(9, 0)], [TINY])


def test_index_value_score_ranks_larger_cost_to_go_first():
    tables = [np.arange(TINY.n_states, dtype=float), np.zeros(TINY.n_states)]
    out = index_assign(tables, _states([2, 2]), 1, [TINY, TINY], score="value")
    assert out == [HIGH, LOW]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=8, unique=True),
       st.integers(0, 8), st.floats(0.1, 5), st.floats(-3, 3))
def test_index_invariant_to_monotone_transforms(scores, K, scale, shift):
    n = len(scores)
    models = [TINY] * n
    states = _states([0] * n)
    raw = [SoftThresholdPolicy(np.full(TINY.n_states, v)) for v in scores]
    moved = [SoftThresholdPolicy(np.full(TINY.n_states, scale * v + shift)) for v in scores]
    assert index_assign(raw, states, K, models) == index_assign(moved, states, K, models)


@pytest.mark.parametrize("N", range(1, 9))
def test_budget_respected_exhaustively(N):
    rng = np.random.default_rng(N)
    models = [TINY] * N
    pols = [SoftThresholdPolicy(rng.normal(size=TINY.n_states)) for _ in range(N)]
    for K in range(N + 1):
        for xs in itertools.product(range(TINY.L + 1), repeat=min(N, 4)):
            states = _states(list(xs) + [0] * (N - len(xs)))
            assert sum(a == HIGH for a in index_assign(pols, states, K, models)) == K
            assert sum(a == HIGH for a in greedy_buffer_assign(states, K)) == K


def test_single_client_index_follows_threshold_at_zero_crossing():
    lam = 0.1
    vi = value_iteration(TINY, lam)
    thr = extract_threshold(vi.policy, TINY)
    assert isinstance(thr, ThresholdFunction)
    # Logits crossing zero half a level past the threshold, as a trained policy's would.
    pol = SoftThresholdPolicy(SoftThresholdPolicy.from_threshold(thr.f, TINY).theta + 0.5)
    for s in TINY.states():
        got = index_assign([pol], [s], 1, [TINY], positive_only=True)
        assert got == [hard_threshold_action(thr, s)] == [vi.policy[TINY.index(s)]]
        # Without the sign gate a lone client always takes the free slot.
        assert index_assign([pol], [s], 1, [TINY]) == [HIGH]
    with pytest.raises(PolicyConfigError):
        index_assign([np.zeros(6)], [ClientState(0, 0)], 1, [TINY], score="value",
                     positive_only=True)
