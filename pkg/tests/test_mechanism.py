import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aflbench import mechanism as mech
from aflbench.mechanism import RateProfile

rates_st = st.lists(st.floats(min_value=0.05, max_value=20.0, allow_nan=False), min_size=1, max_size=20)
buffer_st = st.sampled_from([1, 2, 5])


class TestInfluence:
    def test_symmetric(self):
        assert mech.influence([1, 1, 1], 0) == pytest.approx(1 / 3, abs=1e-15)

    def test_double_rate(self):
        assert mech.influence([2, 1, 1], 0) == 0.5

    def test_single_agent(self):
        assert mech.influence([5], 0) == 1.0

    def test_bad_index(self):
        with pytest.raises(IndexError):
            mech.influence([1, 2], 2)

    @pytest.mark.parametrize("rates", [[1, 0], [1, -2], [np.nan], []])
    def test_bad_rates(self, rates):
        with pytest.raises(ValueError):
            RateProfile(rates)


class TestExpectedStaleness:
    def test_symmetric_three(self):
        assert mech.expected_staleness([1, 1, 1], 0, 1) == 2.0

    def test_lone_agent(self):
        assert mech.expected_staleness([1], 0, 1) == 0.0

    def test_two_speeds(self):
        assert mech.expected_staleness([2, 1], 1, 1) == 2.0
        assert mech.expected_staleness([2, 1], 0, 1) == 0.5

    def test_equal_rates_closed_form(self):
        for n in range(1, 16):
            for b in (1, 2, 5):
                assert mech.expected_staleness([3.0] * n, 0, b) == pytest.approx((n - 1) / b, abs=1e-12)

    def test_zero_buffer(self):
        with pytest.raises(ValueError):
            mech.expected_staleness([1, 1], 0, 0)


class TestWeights:
    def test_influence_from_staleness_examples(self):
        assert mech.influence_from_staleness(2.0, 1) == pytest.approx(1 / 3)
        assert mech.influence_from_staleness(0.0, 5) == 1.0
        assert mech.influence_from_staleness(2.8, 5) == pytest.approx(1 / 15, abs=1e-15)

    def test_negative_staleness(self):
        with pytest.raises(ValueError):
            mech.influence_from_staleness(-0.1, 1)
        with pytest.raises(ValueError):
            mech.fair_weight(-1.0, 1, 3)

    def test_fair_weight_examples(self):
        assert mech.fair_weight(0.0, 5, 15) == pytest.approx(1 / 15)
        assert mech.fair_weight(2.0, 1, 3) == pytest.approx(1.0)
        assert mech.fair_weight(2.8, 5, 15) == pytest.approx(1.0, abs=1e-12)

    def test_fair_weight_alg1_form(self):
        assert mech.fair_weight(2.0, 5, 3, weight_form="alg1") == pytest.approx(1.0)
        with pytest.raises(ValueError):
            mech.fair_weight(1.0, 1, 1, weight_form="bogus")

    def test_zero_agents(self):
        with pytest.raises(ValueError):
            mech.fair_weight(1.0, 1, 0)

    def test_normalized_examples(self):
        np.testing.assert_allclose(mech.normalized_weights([0, 2], 2, 3), [1 / 6, 5 / 6], atol=1e-15)
        np.testing.assert_allclose(mech.normalized_weights([0] * 5, 5, 15), [0.2] * 5, atol=1e-15)
        np.testing.assert_allclose(mech.normalized_weights([2.8] * 5, 5, 15), [0.2] * 5, atol=1e-15)

    def test_normalized_empty(self):
        with pytest.raises(ValueError):
            mech.normalized_weights([], 1, 1)

    def test_alpha_norm_bounds_are_attained(self):
        # one stale update among fresh ones hits the upper bound exactly, and vice versa
        b, tau = 4, 3.0
        lo, hi = mech.alpha_norm_bounds(b, tau)
        assert mech.normalized_weights([tau, 0, 0, 0], b, 10)[0] == pytest.approx(hi, rel=1e-14)
        assert mech.normalized_weights([0, tau, tau, tau], b, 10)[0] == pytest.approx(lo, rel=1e-14)


class TestUtility:
    def test_examples(self):
        assert mech.agent_utility([1, 1], [0, 1], 0) == pytest.approx(0.25)
        assert mech.agent_utility([1], [0], 0) == pytest.approx(1.0)
        assert mech.agent_utility([1, 1, 1], [0, 1, 2], 0) == pytest.approx(1 / 9)

    def test_absent_agent(self):
        with pytest.raises(ValueError):
            mech.agent_utility([1, 1, 1], [1, 2], 0)

    def test_repeated_deviator_rejected(self):
        with pytest.raises(ValueError):
            mech.agent_utility([1, 1], [0, 0], 0)

    def test_closed_form_matches_direct(self):
        # u = r / (C r^2 + (b + D) r + A) after cancelling the frequency term
        rates = np.array([0.7, 2.0, 3.5, 1.1])
        comp = [2, 0, 3]
        A, C, D = mech._derivative_terms(RateProfile(rates), np.array(comp), 2)
        r = rates[2]
        assert mech.agent_utility(rates, comp, 2) == pytest.approx(r / (C * r * r + (3 + D) * r + A), rel=1e-13)

    def test_sign_examples(self):
        assert mech.utility_derivative_sign([1, 1], [0, 1], 0) == 0
        assert mech.utility_derivative_sign([1] + [10] * 14, [0, 1, 2, 3, 4], 0) == 1
        assert mech.utility_derivative_sign([100, 1], [0, 1], 0) == -1

    def test_derivative_matches_finite_difference_value(self):
        rates = np.array([0.4, 3.0, 1.5, 2.2, 0.9])
        comp = [0, 3, 1]
        h = 1e-6 * rates[0]
        p = RateProfile(rates)
        fd = (mech.agent_utility(p.with_rate(0, rates[0] + h), comp, 0)
              - mech.agent_utility(p.with_rate(0, rates[0] - h), comp, 0)) / (2 * h)
        assert mech.utility_derivative(p, comp, 0) == pytest.approx(fd, rel=1e-6)


class TestThrottle:
    def test_symmetric_isolated_utility_is_flat(self):
        grid = np.linspace(0.05, 1.0, 20)
        rep = mech.check_no_profitable_throttle([1, 1, 1], [0, 1, 2], 0, grid, utility="isolated")
        assert np.all(np.abs(rep.utilities - 1 / 3) <= 1e-12)
        assert rep.max_utility_gain <= 1e-12
        assert rep.strategy_proof and rep.best_rate == 1.0

    def test_large_pool_truthful(self):
        rates = [1.0] + [10.0] * 14
        grid = np.round(np.arange(1, 11) * 0.1, 10)
        rep = mech.check_no_profitable_throttle(rates, [0, 1, 2, 3, 4], 0, grid)
        assert rep.best_rate == 1.0
        assert rep.max_utility_gain <= 1e-9

    def test_small_pool_profitable_throttle(self):
        rep = mech.check_no_profitable_throttle([100, 1], [0, 1], 0, np.arange(1, 101, dtype=float))
        assert rep.best_rate < 100
        assert rep.max_utility_gain > 1e-9
        assert not rep.strategy_proof
        # u(r) = r / (r + 1)^2 here, maximized at r = 1
        assert rep.best_rate == 1.0

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            mech.check_no_profitable_throttle([1, 1], [0, 1], 0, [])
        with pytest.raises(ValueError):
            mech.check_no_profitable_throttle([1, 1], [0, 1], 0, [0.5, 1.5])


@settings(max_examples=200, deadline=None)
@given(rates=rates_st, b=buffer_st, data=st.data())
def test_influence_identities(rates, b, data):
    p = RateProfile(rates)
    n = p.n
    assert abs(sum(mech.influence(p, i) for i in range(n)) - 1.0) <= 1e-12
    i = data.draw(st.integers(0, n - 1))
    e = mech.expected_staleness(p, i, b)
    assert e >= 0
    assert abs(mech.influence_from_staleness(e, b) - mech.influence(p, i)) <= 1e-12
    assert abs(mech.fair_weight(e, b, n) * mech.influence_from_staleness(e, b) - 1.0 / n) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(rates=rates_st, b=buffer_st, scale=st.floats(0.01, 100.0), data=st.data())
def test_rescaling_invariance(rates, b, scale, data):
    p = RateProfile(rates)
    q = RateProfile(np.asarray(rates) * scale)
    comp = data.draw(st.lists(st.integers(0, p.n - 1), min_size=b, max_size=b))
    s_p = [mech.expected_staleness(p, a, b) for a in comp]
    s_q = [mech.expected_staleness(q, a, b) for a in comp]
    np.testing.assert_allclose(s_p, s_q, rtol=0, atol=1e-12 * max(1.0, max(s_p)))
    np.testing.assert_allclose(mech.normalized_weights(s_p, b, p.n), mech.normalized_weights(s_q, b, p.n), atol=1e-12)


@settings(max_examples=300, deadline=None)
@given(stale=st.lists(st.floats(0, 50, allow_nan=False), min_size=1, max_size=8), n=st.integers(1, 30))
def test_normalized_weights_probability_and_bounds(stale, n):
    b = len(stale)
    w = mech.normalized_weights(stale, b, n)
    assert abs(w.sum() - 1.0) <= 1e-9
    lo, hi = mech.alpha_norm_bounds(b, max(stale))
    assert np.all(w >= lo - 1e-12) and np.all(w <= hi + 1e-12)
    order = np.argsort(stale, kind="stable")
    assert np.all(np.diff(w[order]) >= -1e-15)


def test_derivative_sign_agrees_with_finite_differences():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(1000):
        n = int(rng.integers(2, 21))
        rates = np.exp(rng.uniform(np.log(0.1), np.log(10), n))
        b = int(rng.choice([1, 2, 5]))
        i = int(rng.integers(n))
        others = [a for a in range(n) if a != i]
        comp = [i] + [int(v) for v in rng.choice(others, b - 1)]
        p = RateProfile(rates)
        h = 1e-6 * rates[i]
        fd = (mech.agent_utility(p.with_rate(i, rates[i] + h), comp, i)
              - mech.agent_utility(p.with_rate(i, rates[i] - h), comp, i)) / (2 * h)
        if abs(fd) > 1e-9:
            checked += 1
            assert np.sign(fd) == mech.utility_derivative_sign(p, comp, i)
    assert checked > 500
