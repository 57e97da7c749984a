import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aflbench.aggregation import (
    ClientUpdate,
    StalenessTracker,
    UpdateBuffer,
    aggregate,
    aggregate_fedavg_buffered,
    aggregate_fedstaleweight,
    observe_staleness,
)


def upd(delta, base=0, agent=0):
    return ClientUpdate(delta=np.asarray(delta, dtype=float), base_version=base, agent_id=agent)


class TestBuffer:
    def test_push_and_fill(self):
        buf = UpdateBuffer(5)
        assert buf.push(upd([0.0])) == 1
        for k in range(4):
            buf.push(upd([0.0], agent=k + 1))
        assert buf.full

    def test_fifo(self):
        buf = UpdateBuffer(3)
        for a in (7, 2, 9):
            buf.push(upd([0.0], agent=a))
        assert [u.agent_id for u in buf.drain()] == [7, 2, 9]
        assert len(buf) == 0

    def test_overfill_is_a_sequencing_bug(self):
        buf = UpdateBuffer(1)
        buf.push(upd([0.0]))
        with pytest.raises(RuntimeError):
            buf.push(upd([0.0]))


class TestStaleness:
    def test_fresh(self):
        assert observe_staleness(upd([0], base=3), 3) == 0

    def test_arithmetic(self):
        assert observe_staleness(upd([0], base=1), 4) == 3

    def test_running_mean(self):
        tr = StalenessTracker("mean")
        observe_staleness(upd([0], base=0, agent=5), 2, tr)
        observe_staleness(upd([0], base=1, agent=5), 5, tr)
        assert tr.estimate(5) == 3.0
        assert tr.counts[5] == 2

    def test_ema_cold_start_then_blend(self):
        tr = StalenessTracker("ema", beta=0.25)
        tr.observe(1, 4)
        assert tr.estimate(1) == 4.0
        tr.observe(1, 0)
        assert tr.estimate(1) == 3.0

    def test_negative_staleness(self):
        with pytest.raises(ValueError):
            observe_staleness(upd([0], base=5), 4)

    def test_unknown_agent(self):
        with pytest.raises(KeyError):
            StalenessTracker().estimate(3)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=1, max_size=40))
    def test_mean_mode_matches_numpy_mean(self, obs):
        tr = StalenessTracker("mean")
        for t in obs:
            tr.observe(0, t)
        assert tr.estimate(0) == pytest.approx(np.mean(obs), rel=1e-12, abs=1e-12)


class TestFedStaleWeight:
    def test_example_two_slot(self):
        tr = StalenessTracker()
        u, v = np.array([1.0, -2.0]), np.array([0.5, 4.0])
        # agent 0 fresh (tau 0), agent 1 trained two versions ago (tau 2)
        buf = [upd(u, base=4, agent=0), upd(v, base=2, agent=1)]
        cur = np.array([10.0, 10.0])
        out = aggregate_fedstaleweight(buf, tr, cur, eta_g=1.0, n=3, server_version=4, b=2)
        np.testing.assert_allclose(out.weights_applied, [1 / 6, 5 / 6], atol=1e-15)
        np.testing.assert_allclose(out.new_params, cur + u / 6 + 5 * v / 6, atol=1e-14)
        assert out.version == 5
        assert out.observed_stalenesses.tolist() == [0, 2]

    def test_first_observation_weights_itself(self):
        tr = StalenessTracker()
        out = aggregate_fedstaleweight([upd([1.0], 0, 0), upd([1.0], 3, 1)], tr, np.zeros(1), 1.0, 2, 3)
        # estimates are 3 and 0 after folding in this buffer's observations
        np.testing.assert_allclose(out.weights_applied, [7 / 8, 1 / 8])

    def test_frozen_learning(self):
        tr = StalenessTracker()
        cur = np.array([1.0, 2.0])
        out = aggregate_fedstaleweight([upd([5.0, 5.0], 0, 0)], tr, cur, 0.0, 1, 0)
        assert np.array_equal(out.new_params, cur)
        assert out.version == 1

    def test_buffer_not_full(self):
        with pytest.raises(ValueError):
            aggregate_fedstaleweight([upd([0.0])], StalenessTracker(), np.zeros(1), 1.0, 2, 0, b=2)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            aggregate_fedstaleweight([upd([0.0, 1.0])], StalenessTracker(), np.zeros(3), 1.0, 1, 0)

    def test_alg1_weight_form(self):
        tr = StalenessTracker()
        out = aggregate_fedstaleweight([upd([1.0], 2, 0), upd([1.0], 0, 1)], tr, np.zeros(1), 1.0, 2, 2,
                                       weight_form="alg1")
        np.testing.assert_allclose(out.weights_applied, [1 / 4, 3 / 4])


class TestFedAvg:
    def test_single(self):
        out = aggregate_fedavg_buffered([upd([2.0, -1.0])], np.array([1.0, 1.0]), 0.5)
        np.testing.assert_allclose(out.new_params, [2.0, 0.5])

    def test_cancellation(self):
        u = np.array([3.0, -7.0])
        out = aggregate_fedavg_buffered([upd(u), upd(-u, agent=1)], np.array([1.0, 2.0]), 1.0)
        np.testing.assert_allclose(out.new_params, [1.0, 2.0], atol=0)

    def test_equal_deltas(self):
        u = np.array([0.3, 0.1])
        out = aggregate_fedavg_buffered([upd(u, agent=k) for k in range(5)], np.zeros(2), 2.0)
        np.testing.assert_allclose(out.new_params, 2.0 * u, rtol=1e-15)
        assert np.all(out.weights_applied == 0.2)

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            aggregate("fedasync", [upd([0.0])], StalenessTracker(), np.zeros(1), 1.0, 1, 0)


@settings(max_examples=100, deadline=None)
@given(
    b=st.integers(1, 6),
    n=st.integers(1, 20),
    tau=st.integers(0, 10),
    seed=st.integers(0, 10_000),
)
def test_equal_estimates_match_fedavg(b, n, tau, seed):
    rng = np.random.default_rng(seed)
    deltas = rng.normal(size=(b, 4))
    buf = [upd(d, base=0, agent=k) for k, d in enumerate(deltas)]
    cur = rng.normal(size=4)
    fsw = aggregate_fedstaleweight(buf, StalenessTracker(), cur, 0.7, n, tau)
    avg = aggregate_fedavg_buffered(buf, cur, 0.7, tau)
    np.testing.assert_allclose(fsw.new_params, avg.new_params, atol=1e-12, rtol=0)


@settings(max_examples=100, deadline=None)
@given(bases=st.lists(st.integers(0, 30), min_size=1, max_size=8), seed=st.integers(0, 1000))
def test_weights_sum_to_one_and_monotone(bases, seed):
    version = 30
    buf = [upd(np.ones(2), base=bv, agent=k) for k, bv in enumerate(bases)]
    out = aggregate_fedstaleweight(buf, StalenessTracker(), np.zeros(2), 1.0, 10, version)
    assert abs(out.weights_applied.sum() - 1.0) <= 1e-9
    taus = out.observed_stalenesses
    for i in range(len(bases)):
        for j in range(len(bases)):
            if taus[i] > taus[j]:
                assert out.weights_applied[i] >= out.weights_applied[j]
