from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threshold_crl.mdp import (HIGH, LOW, ORIGIN, ActionClass, ClientModel, ClientState,
                               CostParams, ModelError, TransitionEntry, reference_model,
                               sample_transition, stage_costs, tiny_model,
                               transition_distribution, validate_model)

from oracle import model_kernel


def as_dict(entries):
    return {(e.next.x, e.next.y): e.prob for e in entries}


def test_tiny_kernel_from_1_0_high():
    got = as_dict(transition_distribution(ClientState(1, 0), HIGH, tiny_model()))
    want = {(1, 0): 0.475, (2, 0): 0.4275, (0, 1): 0.0475, (0, 0): 0.05}
    assert got.keys() == want.keys()
    for k in want:
        assert got[k] == pytest.approx(want[k], abs=1e-15)


@pytest.mark.parametrize("a", list(ActionClass))
@pytest.mark.parametrize("y", [0, 1])
def test_empty_buffer_drain_merges_with_stay(a, y):
    m = tiny_model()
    ents = transition_distribution(ClientState(0, y), a, m)
    # (0,y) stays, gains, or drains back to itself; only the reset is extra.
    nexts = {e.next for e in ents}
    assert ClientState(0, y) in nexts and ClientState(1, y) in nexts
    assert len(nexts) == (2 if y == 0 else 3)
    p1, p2, p3 = m.branch_probs(a)
    got = as_dict(ents)[(0, y)]
    expect = (1 - m.alpha) * (p1 + p3) + (m.alpha if y == 0 else 0.0)
    assert got == pytest.approx(expect, abs=1e-15)


def test_full_buffer_gain_merges_with_stay():
    m = tiny_model()
    ents = as_dict(transition_distribution(ClientState(2, 1), HIGH, m))
    p1, p2, _ = m.branch_probs(HIGH)
    assert ents[(2, 1)] == pytest.approx((1 - m.alpha) * (p1 + p2), abs=1e-15)
    assert (3, 1) not in ents


def test_reset_collision_keeps_weighted_cost():
    m = tiny_model().with_cost(c_stall=0.2, c_term=0.7, normalize=False)
    ents = {e.next: e for e in transition_distribution(ORIGIN, LOW, m)}
    e = ents[ORIGIN]
    assert e.is_reset
    stay = e.prob - m.alpha
    assert e.cost == pytest.approx((stay * 0.2 + m.alpha * 0.7) / e.prob)


def test_stage_cost_examples():
    cp = CostParams(delta=0.5, c_stall=2.0, c_term=0.3, normalize=False)
    plain = TransitionEntry(ClientState(2, 1), 1.0, 0.0, False)
    assert stage_costs(ClientState(2, 1), plain, LOW, cp, 3) == (0.5, 0)
    assert stage_costs(ClientState(0, 1), plain, HIGH, cp, 3) == (2.5, 1)
    reset = TransitionEntry(ORIGIN, 1.0, 0.0, True)
    for s in [ClientState(0, 0), ClientState(3, 2)]:
        assert stage_costs(s, reset, HIGH, cp, 3)[0] == 0.3


def test_normalized_costs_in_unit_interval():
    m = reference_model()
    cp = m.cost
    vals = [cp.stage(s, m.M) for s in m.states()] + [cp.termination(m.M)]
    assert min(vals) >= 0 and max(vals) <= 1
    assert cp.delta * m.M * cp.scale(m.M) + cp.c_stall * cp.scale(m.M) <= 1 + 1e-15


def test_validate_examples():
    assert validate_model(tiny_model()) == []
    assert "mu_high must exceed mu_low" in validate_model(
        ClientModel(0.3, 0.9, 0.2, 0.05, 2, 1, 0.9))
    assert "beta < mu_high required" in validate_model(
        ClientModel(0.9, 0.3, 0.95, 0.05, 2, 1, 0.9))


def test_validate_lists_every_violation():
    bad = ClientModel(0.3, 0.9, 0.95, 0.0, 2, 1, 1.5)
    assert len(validate_model(bad)) >= 4
    with pytest.raises(ModelError):
        transition_distribution(ORIGIN, HIGH, bad)


def test_config_roundtrip_keys():
    m = reference_model()
    d = m.to_dict()
    assert set(d) == {"mu_high", "mu_low", "beta", "alpha", "L", "M", "gamma",
                      "delta", "c_stall", "c_term", "normalize"}
    assert ClientModel.from_dict(d) == m
    with pytest.raises(ModelError):
        ClientModel.from_dict({**d, "typo": 1})


def test_kernel_matches_independent_oracle():
    for m in (tiny_model(), reference_model()):
        P, c = model_kernel(m)
        assert np.abs(m.kernel.P - P).max() < 1e-15
        assert np.abs(m.kernel.cbar - c).max() < 1e-15


models = st.builds(
    lambda mu1, frac, beta_frac, alpha, L, M, delta, C, ct, norm: ClientModel(
        mu1, mu1 * frac, mu1 * beta_frac, alpha, L, M, 0.9, CostParams(delta, C, ct, norm)),
    st.floats(0.05, 1.0), st.floats(0.0, 0.99), st.floats(0.01, 0.99), st.floats(0.001, 1.0),
    st.integers(0, 20), st.integers(0, 20), st.floats(0.001, 5), st.floats(0, 5),
    st.floats(0, 5), st.booleans())


@settings(max_examples=60, deadline=None)
@given(models)
def test_distribution_sums_to_one_and_stays_in_range(m):
    assert validate_model(m) == []
    for s in m.states():
        for a in ActionClass:
            ents = transition_distribution(s, a, m)
            assert abs(sum(e.prob for e in ents) - 1.0) <= 1e-12
            assert len({e.next for e in ents}) == len(ents)
            for e in ents:
                assert 0 <= e.next.x <= m.L and 0 <= e.next.y <= m.M
                assert 0 <= e.prob <= 1


@settings(max_examples=40, deadline=None)
@given(models)
def test_cost_assumptions(m):
    cp = m.cost
    for x in range(m.L + 1):
        for y in range(m.M):
            # strictly increasing in stall count
            assert cp.stage(ClientState(x, y + 1), m.M) > cp.stage(ClientState(x, y), m.M)
        if x > 1:
            for y in range(m.M + 1):
                assert cp.stage(ClientState(x, y), m.M) == cp.stage(ClientState(1, y), m.M)
    ents = [e for s in m.states() for a in ActionClass
            for e in transition_distribution(s, a, m) if e.is_reset and e.next != ORIGIN]
    assert ents == []


@settings(max_examples=200)
@given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(0, 20))
def test_state_algebra(x, y, L, M):
    x, y = min(x, L), min(y, M)
    s = ClientState(x, y)
    down = s.minus(1, M)
    assert down.y <= M and s.plus(1, L).x <= L
    if x >= 1:
        back = down.plus(1, L)
        assert back.x == x and back.y >= y


def test_sampling_is_seed_deterministic():
    m = tiny_model()

    def run(seed):
        rng = np.random.default_rng(seed)
        s, out = ClientState(1, 0), []
        for _ in range(200):
            s, c, g = sample_transition(s, HIGH if s.x < 2 else LOW, m, rng)
            out.append((s, c, g))
        return out

    assert run(7) == run(7)


def test_alpha_one_always_resets():
    m = ClientModel(0.9, 0.3, 0.5, 1.0, 2, 1, 0.9)
    rng = np.random.default_rng(0)
    for s in m.states():
        nxt, c, _ = sample_transition(s, HIGH, m, rng)
        assert nxt == ORIGIN and c == m.cost.termination(m.M)


@pytest.mark.slow
def test_sampling_frequencies_within_binomial_bands():
    m = tiny_model()
    rng = np.random.default_rng(123)
    exact = as_dict(transition_distribution(ClientState(1, 0), HIGH, m))
    n = 10**6
    got: dict = {}
    for _ in range(n):
        nxt, _, _ = sample_transition(ClientState(1, 0), HIGH, m, rng)
        got[nxt] = got.get(nxt, 0) + 1
    assert set(got) <= {ClientState(*k) for k in exact}
    for k, p in exact.items():
        assert abs(got.get(ClientState(*k), 0) - n * p) <= 3 * np.sqrt(n * p * (1 - p))
