import numpy as np
import pytest

from dtcorl.mdp import (ConvergenceError, TabularMdp, TabularPolicy, estimate_lipschitz_constants,
                        exact_policy_evaluation, exact_policy_iteration, lipschitz_violations, random_tabular_mdp,
                        two_state_chain, value_iteration)


def _single_state(r=1.0, gamma=0.9, n_actions=1):
    return TabularMdp(np.ones((1, n_actions, 1)), np.full((1, n_actions), r), gamma=gamma)


class TestPolicyEvaluation:
    def test_geometric_series(self):
        vt = exact_policy_evaluation(_single_state(), TabularPolicy.uniform(1, 1))
        assert vt.q[0, 0] == pytest.approx(10.0, abs=1e-10)

    def test_zero_reward(self):
        m = random_tabular_mdp(4, 3, np.random.default_rng(1))
        m = TabularMdp(m.transition, np.zeros((4, 3)), m.gamma)
        assert np.all(exact_policy_evaluation(m, TabularPolicy.uniform(4, 3)).q == 0)

    def test_chain_against_value_iteration(self):
        m = two_state_chain(gamma=0.9)
        pol = TabularPolicy.uniform(2, 2)
        vt = exact_policy_evaluation(m, pol)
        np.testing.assert_allclose(vt.q, value_iteration(m, pol, 10_000), atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_within_tol(self, seed):
        rng = np.random.default_rng(seed)
        m = random_tabular_mdp(5, 3, rng)
        vt = exact_policy_evaluation(m, TabularPolicy.random(5, 3, rng), tol=1e-10)
        assert vt.residual <= 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            exact_policy_evaluation(two_state_chain(), TabularPolicy.uniform(3, 2))

    def test_nonconvergence_signals(self):
        m = _single_state(gamma=0.999999)
        with pytest.raises((ConvergenceError, ValueError)):
            exact_policy_evaluation(m, TabularPolicy.uniform(1, 1), tol=-1.0)


class TestPolicyIteration:
    def test_chain_policy(self):
        pol, vt = exact_policy_iteration(two_state_chain(gamma=0.9))
        # flip out of s0, stay in s1
        assert list(pol.greedy_actions()) == [1, 0]
        np.testing.assert_allclose(vt.q, value_iteration(two_state_chain(gamma=0.9), pol, 10_000), atol=1e-9)

    def test_zero_reward_any_policy(self):
        m = TabularMdp(two_state_chain().transition, np.zeros((2, 2)), 0.9)
        _, vt = exact_policy_iteration(m)
        assert np.all(vt.q == 0)

    def test_single_state_greedy(self):
        m = TabularMdp(np.ones((1, 3, 1)), np.array([[0.1, 0.7, 0.3]]), 0.9)
        pol, _ = exact_policy_iteration(m)
        assert pol.greedy_actions()[0] == 1

    @pytest.mark.parametrize("seed", range(3))
    def test_dominates_random_policies(self, seed):
        rng = np.random.default_rng(seed)
        m = random_tabular_mdp(4, 3, rng)
        _, best = exact_policy_iteration(m)
        for _ in range(100):
            v = exact_policy_evaluation(m, TabularPolicy.random(4, 3, rng)).v
            assert np.all(best.v >= v - 1e-9)


class TestLipschitz:
    def test_constant_reward(self):
        m = random_tabular_mdp(3, 2, np.random.default_rng(0))
        m = TabularMdp(m.transition, np.ones((3, 2)), 0.9)
        est = estimate_lipschitz_constants(m, TabularPolicy.uniform(3, 2), np.zeros((3, 2)))
        assert est.L_R == 0.0

    def test_identical_rows(self):
        T = np.zeros((3, 2, 3))
        T[:, :, 1] = 1.0
        m = TabularMdp(T, np.zeros((3, 2)), 0.9)
        est = estimate_lipschitz_constants(m, TabularPolicy.uniform(3, 2), np.zeros((3, 2)))
        assert est.L_P == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_no_violated_pair(self, seed):
        rng = np.random.default_rng(seed)
        m = random_tabular_mdp(4, 3, rng)
        pol = TabularPolicy.random(4, 3, rng)
        vt = exact_policy_evaluation(m, pol)
        est = estimate_lipschitz_constants(m, pol, vt)
        assert not lipschitz_violations(m, pol, vt, est)

    def test_chain_exhaustive(self):
        m = two_state_chain()
        pol = TabularPolicy.uniform(2, 2)
        vt = exact_policy_evaluation(m, pol)
        est = estimate_lipschitz_constants(m, pol, vt)
        # brute force over the 4 (s, a) pairs
        best = 0.0
        for s1 in range(2):
            for a1 in range(2):
                for s2 in range(2):
                    for a2 in range(2):
                        den = abs(s1 - s2) + abs(a1 - a2)
                        if den:
                            best = max(best, abs(vt.q[s1, a1] - vt.q[s2, a2]) / den)
        assert est.L_Q_observed == pytest.approx(best)


class TestSerialization:
    def test_json_round_trip(self):
        m = random_tabular_mdp(3, 2, np.random.default_rng(4), metric="discrete")
        back = TabularMdp.from_json(m.to_json())
        np.testing.assert_array_equal(back.transition, m.transition)
        np.testing.assert_array_equal(back.reward, m.reward)
        np.testing.assert_array_equal(back.action_metric, m.action_metric)
        assert back.gamma == m.gamma

    def test_bad_rows_rejected(self):
        with pytest.raises(ValueError):
            TabularMdp(np.full((2, 1, 2), 0.7), np.zeros((2, 1)), 0.9)
