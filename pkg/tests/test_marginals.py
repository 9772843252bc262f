import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_problem
from marginal_ope.environments import model_fail, model_win
from marginal_ope.exact import exact_marginals
from marginal_ope.marginals import (
    DegenerateBatchError,
    MarginalEstimate,
    behavior_marginals,
    estimate_marginals,
    marginal_l1_diagnostic,
    marginal_weights,
    marginals_by_transition_chain,
    reward_is,
    reward_table,
    simplex_project,
    state_counts,
    target_marginals_raw,
    target_marginals_selfnorm,
    transition_is,
)
from marginal_ope.mdp import EpisodeBatch, ObservationSchedule, sample_batch


def loop_recursion(batch, selfnorm):
    """Episode-by-episode reference for the forward recursion."""
    H, S, n = batch.horizon, batch.num_states, batch.n
    d_mu = np.zeros((H, S))
    for i in range(n):
        for t in range(H):
            d_mu[t, batch.states[i, t]] += 1.0 / n
    d = np.zeros((H, S))
    d[0] = d_mu[0]
    for t in range(H - 1):
        acc = np.zeros(S)
        for i in range(n):
            s = batch.states[i, t]
            w = d[t, s] / d_mu[t, s]
            acc[batch.states[i, t + 1]] += w * batch.ratios[i, t] / n
        d[t + 1] = acc / acc.sum() if selfnorm else acc
    return d


batch_params = dict(seed=st.integers(0, 2**31 - 1), S=st.integers(1, 5), A=st.integers(1, 3),
                    H=st.integers(1, 7), n=st.integers(1, 60))


class TestRecursion:
    @pytest.mark.parametrize("selfnorm", [False, True])
    def test_matches_loop_reference(self, problem, selfnorm):
        _, _, _, batch = problem
        est = estimate_marginals(batch, selfnorm=selfnorm)
        np.testing.assert_allclose(est.target, loop_recursion(batch, selfnorm), atol=1e-12)

    @given(**batch_params)
    def test_recursion_equals_transition_matrix_chain(self, seed, S, A, H, n):
        _, _, _, batch = make_problem(seed, S, A, H, n)
        np.testing.assert_allclose(target_marginals_raw(batch),
                                   marginals_by_transition_chain(batch), rtol=0, atol=1e-12)

    @given(**batch_params)
    def test_selfnorm_is_stepwise_projection_of_raw(self, seed, S, A, H, n):
        _, _, _, batch = make_problem(seed, S, A, H, n, floor=0.3)
        raw = target_marginals_raw(batch)
        sn = target_marginals_selfnorm(batch)
        np.testing.assert_allclose(sn.sum(axis=1), 1.0, atol=1e-12)
        for t in range(H):
            np.testing.assert_allclose(sn[t], simplex_project(raw[t]), atol=1e-12)

    def test_on_policy_recovers_empirical_marginals(self, rng):
        mdp, mu, _, _ = make_problem(3)
        batch = sample_batch(mdp, mu, mu, 300, 1)
        np.testing.assert_allclose(target_marginals_raw(batch), behavior_marginals(batch),
                                   atol=1e-12)

    def test_raw_recursion_is_unbiased(self):
        mdp, mu, pi, _ = make_problem(21, S=3, A=2, H=4, floor=0.5)
        runs = np.stack([target_marginals_raw(sample_batch(mdp, mu, pi, 200, s))
                         for s in range(400)])
        se = runs.std(axis=0) / np.sqrt(len(runs)) + 1e-12
        z = np.abs(runs.mean(axis=0) - exact_marginals(mdp, pi)) / se
        assert z.max() < 4.5

    def test_first_step_is_empirical(self, problem):
        _, _, _, batch = problem
        est = estimate_marginals(batch)
        np.testing.assert_array_equal(est.target[0], est.behavior[0])
        np.testing.assert_array_equal(est.counts, state_counts(batch))

    def test_weights_are_zero_on_unvisited_states(self, problem):
        _, _, _, batch = problem
        est = estimate_marginals(batch)
        assert np.all(est.weights[est.counts == 0] == 0)

    def test_model_win_converges_to_exact(self):
        bundle = model_win(horizon=10)
        batch = bundle.sample(20_000, 3)
        exact = exact_marginals(bundle.mdp, bundle.mdp_target)
        assert marginal_l1_diagnostic(estimate_marginals(batch), exact).max() < 0.03


class TestDegenerate:
    def degenerate_batch(self):
        # the only episode carries zero target density, so every later weight vanishes
        z = np.zeros((1, 3))
        states = np.zeros((1, 4), dtype=np.int64)
        return EpisodeBatch(states, np.zeros((1, 3), np.int64), z, np.ones((1, 3)), z, 2, 2)

    def test_zero_mode_warns_and_records(self):
        with pytest.warns(RuntimeWarning, match="degenerate"):
            est = estimate_marginals(self.degenerate_batch())
        assert est.degenerate_steps == (2, 3)
        np.testing.assert_array_equal(est.target[1:], 0.0)

    def test_raise_mode(self):
        with pytest.raises(DegenerateBatchError):
            target_marginals_selfnorm(self.degenerate_batch())

    def test_raw_recursion_never_degenerates(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            np.testing.assert_array_equal(target_marginals_raw(self.degenerate_batch())[1:], 0.0)


class TestSchedule:
    def test_full_schedule_equals_no_schedule(self, problem):
        _, _, _, batch = problem
        plain = estimate_marginals(batch)
        full = estimate_marginals(batch, schedule=ObservationSchedule.full(batch.horizon))
        np.testing.assert_array_equal(plain.target, full.target)
        np.testing.assert_array_equal(marginal_weights(batch, plain),
                                      marginal_weights(batch, full))

    def test_gap_recursion_matches_loop(self, problem):
        _, _, _, batch = problem
        sched = ObservationSchedule([True, False, True, False, False, True])
        est = estimate_marginals(batch, selfnorm=False, schedule=sched)
        d_mu = behavior_marginals(batch)
        for c, nxt in ((0, 2), (2, 5)):
            ref = np.zeros(batch.num_states)
            w = np.divide(est.target[c], d_mu[c], out=np.zeros(batch.num_states),
                          where=d_mu[c] > 0)
            for i in range(batch.n):
                coef = w[batch.states[i, c]] * np.prod(batch.ratios[i, c:nxt])
                ref[batch.states[i, nxt]] += coef / batch.n
            np.testing.assert_allclose(est.target[nxt], ref, atol=1e-12)
        np.testing.assert_array_equal(est.target[[1, 3, 4]], 0.0)

    def test_weights_bridge_hidden_steps(self, problem):
        _, _, _, batch = problem
        sched = ObservationSchedule.every(batch.horizon, 3)
        est = estimate_marginals(batch, schedule=sched)
        W = marginal_weights(batch, est)
        i = 5
        for t in range(batch.horizon):
            c = 3 * (t // 3)
            expect = est.weights[c, batch.states[i, c]] * np.prod(batch.ratios[i, c:t + 1])
            assert W[i, t] == pytest.approx(expect, rel=1e-12)

    def test_model_fail_checkpoints_are_exact(self):
        bundle = model_fail(horizon=10)
        batch = bundle.sample(500, 0)
        est = estimate_marginals(batch, schedule=bundle.schedule)
        # every observable step is s1 with probability one
        np.testing.assert_allclose(est.target[::2], np.tile([1.0, 0.0], (5, 1)), atol=1e-13)

    def test_schedule_horizon_mismatch(self, problem):
        _, _, _, batch = problem
        with pytest.raises(ValueError):
            estimate_marginals(batch, schedule=ObservationSchedule.full(batch.horizon + 1))


class TestComponents:
    def test_transition_is_reference(self, problem):
        _, _, _, batch = problem
        P, visited = transition_is(batch, 2)
        S = batch.num_states
        for s in range(S):
            mask = batch.states[:, 2] == s
            assert visited[s] == mask.any()
            if mask.any():
                for s2 in range(S):
                    hit = mask & (batch.states[:, 3] == s2)
                    assert P[s2, s] == pytest.approx(batch.ratios[hit, 2].sum() / mask.sum())
            else:
                np.testing.assert_array_equal(P[:, s], 0.0)

    def test_reward_is_reference(self, problem):
        _, _, _, batch = problem
        r, visited = reward_is(batch, 1)
        for s in range(batch.num_states):
            mask = batch.states[:, 1] == s
            if mask.any():
                assert r[s] == pytest.approx(np.mean(batch.ratios[mask, 1] * batch.rewards[mask, 1]))
            else:
                assert np.isnan(r[s]) and not visited[s]

    def test_reward_table_reference(self, problem):
        _, _, _, batch = problem
        table = reward_table(batch)
        t, s, a = 3, batch.states[0, 3], batch.actions[0, 3]
        mask = (batch.states[:, 3] == s) & (batch.actions[:, 3] == a)
        assert table.mean[t, s, a] == pytest.approx(batch.rewards[mask, 3].mean())
        assert table.counts.sum() == batch.n * batch.horizon
        assert np.all(np.isnan(table.mean[~table.defined]))
        np.testing.assert_array_equal(table.lookup(batch.states[:, :-1], batch.actions)[0, 3],
                                      table.mean[t, s, a])

    def test_simplex_project(self):
        np.testing.assert_allclose(simplex_project([1.0, 3.0]), [0.25, 0.75])
        with pytest.raises(ValueError):
            simplex_project([-1.0, 2.0])
        with pytest.raises(DegenerateBatchError):
            simplex_project([0.0, 0.0])

    def test_l1_diagnostic(self):
        est = MarginalEstimate.from_oracle(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(marginal_l1_diagnostic(est, [[1.0, 0.0]]), [1.0])
        with pytest.raises(ValueError):
            marginal_l1_diagnostic(est, [[1.0, 0.0, 0.0]])

    def test_from_oracle_weights(self):
        est = MarginalEstimate.from_oracle(np.array([[0.2, 0.8, 0.0]]), np.array([[0.5, 0.5, 0.0]]))
        np.testing.assert_allclose(est.weights, [[0.4, 1.6, 0.0]])
