import numpy as np
import pytest

from dtcorl.delayed import augmented_state, belief_matrix, build_augmented_mdp, enumerate_augmented_states
from dtcorl.mdp import TabularMdp, TabularPolicy, exact_policy_evaluation, exact_policy_iteration, random_tabular_mdp, two_state_chain
from dtcorl.tabular import (BeliefContext, CoverageError, augmented_brac_iteration, bpe_sample_residual,
                            check_monotone_improvement, lift_policy, simplex_grid, tabular_bpe, tabular_bpi)


def _mdp(seed, S=4, A=3, **kw):
    return random_tabular_mdp(S, A, np.random.default_rng(seed), **kw)


class TestBpe:
    @pytest.mark.parametrize("seed", range(5))
    def test_delay_free_reduction(self, seed):
        m = _mdp(seed)
        pol = TabularPolicy.random(4, 3, np.random.default_rng(seed + 50))
        ctx = BeliefContext.enumerate(m, 0, TabularPolicy.uniform(4, 3))
        np.testing.assert_allclose(tabular_bpe(ctx, pol, 0.0).q, exact_policy_evaluation(m, pol).q, atol=1e-8)

    @pytest.mark.parametrize("delay", [1, 2, 3])
    def test_deterministic_matches_delay_free(self, delay):
        m = _mdp(3, deterministic=True)
        pol = TabularPolicy.random(4, 3, np.random.default_rng(9))
        ctx = BeliefContext.enumerate(m, delay, TabularPolicy.uniform(4, 3))
        np.testing.assert_allclose(tabular_bpe(ctx, pol, 0.0).q, exact_policy_evaluation(m, pol).q, atol=1e-8)

    def test_penalty_vanishes_at_behavior(self):
        # delay 0: mu_delta(.|x=s) is the behaviour row itself
        m = _mdp(1)
        mu = TabularPolicy.random(4, 3, np.random.default_rng(2))
        ctx = BeliefContext.enumerate(m, 0, mu)
        np.testing.assert_allclose(tabular_bpe(ctx, mu, 0.7).q, tabular_bpe(ctx, mu, 0.0).q, atol=1e-10)

    @pytest.mark.parametrize("seed,delay,lam1", [(0, 1, 0.5), (1, 2, 0.1), (2, 1, 2.0)])
    def test_sample_regression_stationary(self, seed, delay, lam1):
        m = _mdp(seed, S=3, A=2)
        ctx = BeliefContext.enumerate(m, delay, TabularPolicy.random(3, 2, np.random.default_rng(seed)))
        pol = TabularPolicy.random(3, 2, np.random.default_rng(seed + 1))
        q = tabular_bpe(ctx, pol, lam1).q
        assert bpe_sample_residual(ctx, pol, q, lam1) < 1e-8

    def test_uncovered_states_reported(self):
        m = two_state_chain()
        ctx = BeliefContext(m, 0, np.eye(2), np.array([1.0, 0.0]), np.full((2, 2), 0.5))
        with pytest.raises(CoverageError) as exc:
            tabular_bpe(ctx, TabularPolicy.uniform(2, 2), 0.1)
        assert exc.value.uncovered == [1]


class TestBpi:
    def test_zero_penalty_is_greedy(self):
        m = _mdp(4)
        q = np.random.default_rng(0).normal(size=(4, 3))
        ctx = BeliefContext.enumerate(m, 1, TabularPolicy.uniform(4, 3))
        pi = tabular_bpi(q, ctx, 0.0)
        np.testing.assert_array_equal(pi.probs, np.eye(3)[np.argmax(q, 1)])

    def test_tie_breaks_to_lower_action(self):
        m = _mdp(4)
        ctx = BeliefContext.enumerate(m, 0, TabularPolicy.uniform(4, 3))
        pi = tabular_bpi(np.ones((4, 3)), ctx, 0.0)
        assert np.all(pi.probs[:, 0] == 1.0)

    def test_large_penalty_returns_behavior(self):
        m = _mdp(5)
        mu = TabularPolicy(np.array([[0.25, 0.5, 0.25], [1.0, 0, 0], [0, 0.125, 0.875], [0.5, 0, 0.5]]))
        ctx = BeliefContext.enumerate(m, 0, mu)
        q = np.random.default_rng(1).uniform(size=(4, 3))
        lam2 = 10 * np.ptp(q) / 1.0
        np.testing.assert_allclose(tabular_bpi(q, ctx, lam2).probs, mu.probs, atol=1.0 / 64)

    @pytest.mark.parametrize("lam2", [0.05, 0.3, 1.0])
    def test_against_breakpoint_search(self, lam2):
        # two actions: the objective is concave piecewise linear in p0 with kinks at the mu rows,
        # so its maximiser is among {0, 1, mu_x(0)}
        m = two_state_chain(p_flip=0.7)
        mu = TabularPolicy(np.array([[0.8, 0.2], [0.3, 0.7]]))
        ctx = BeliefContext.enumerate(m, 1, mu)
        q = np.array([[0.2, 0.9], [1.1, 0.4]])
        pi = tabular_bpi(q, ctx, lam2)
        omega = ctx.omega()
        cands = np.concatenate([[0.0, 1.0], ctx.mu_delta[:, 0]])
        for s in range(2):
            vals = [q[s, 0] * p0 + q[s, 1] * (1 - p0) - lam2 * omega[s] @ np.abs(p0 - ctx.mu_delta[:, 0])
                    for p0 in cands]
            got = pi.probs[s] @ q[s] - lam2 * omega[s] @ np.abs(pi.probs[s, 0] - ctx.mu_delta[:, 0])
            assert got == pytest.approx(max(vals), abs=1e-9)

    def test_three_actions_against_grid(self):
        m = _mdp(8, S=2, A=3)
        ctx = BeliefContext.enumerate(m, 1, TabularPolicy.random(2, 3, np.random.default_rng(3)))
        q = np.array([[0.2, 0.9, 0.5], [1.1, 0.4, 0.0]])
        pi = tabular_bpi(q, ctx, 0.3)
        omega, grid = ctx.omega(), simplex_grid(3)
        for s in range(2):
            cdf = lambda p: np.cumsum(p, -1)[..., :-1]
            vals = grid @ q[s] - 0.3 * np.abs(cdf(grid)[:, None] - cdf(ctx.mu_delta)[None]).sum(-1) @ omega[s]
            np.testing.assert_array_equal(pi.probs[s], grid[np.flatnonzero(vals >= vals.max() - 1e-12)[0]])

    @pytest.mark.parametrize("seed", range(5))
    def test_constant_shift_invariance(self, seed):
        m = _mdp(seed)
        ctx = BeliefContext.enumerate(m, 1, TabularPolicy.random(4, 3, np.random.default_rng(seed)))
        q = np.random.default_rng(seed + 7).normal(size=(4, 3))
        a = tabular_bpi(q, ctx, 0.4).probs
        b = tabular_bpi(q + 3.25, ctx, 0.4).probs
        np.testing.assert_array_equal(a, b)

    def test_discrete_metric_uses_lp(self):
        m = _mdp(2, metric="discrete")
        mu = TabularPolicy.uniform(4, 3)
        ctx = BeliefContext.enumerate(m, 0, mu)
        q = np.array([[1.0, 0.0, 0.0]] * 4)
        # 0/1 metric: moving mass m from the other actions costs lam2 * m; gain is m
        np.testing.assert_allclose(tabular_bpi(q, ctx, 0.5).probs, np.tile([1.0, 0, 0], (4, 1)), atol=1e-9)
        np.testing.assert_allclose(tabular_bpi(q, ctx, 2.0).probs, mu.probs, atol=1e-9)

    def test_empty_support(self):
        m = two_state_chain()
        ctx = BeliefContext(m, 0, np.eye(2), np.zeros(2), np.full((2, 2), 0.5))
        with pytest.raises(ValueError, match="empty"):
            tabular_bpi(np.zeros((2, 2)), ctx, 0.1)

    def test_simplex_grid(self):
        g = simplex_grid(3, 4)
        assert len(g) == 15
        np.testing.assert_allclose(g.sum(1), 1.0)


class TestMonotone:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("delay", [1, 2])
    def test_no_violations(self, seed, delay):
        rng = np.random.default_rng(seed)
        m = random_tabular_mdp(4, 3, rng)
        rep = check_monotone_improvement(m, delay, 0.1, 0.1, 10, behavior=TabularPolicy.random(4, 3, rng))
        assert rep.ok, rep.violations

    @pytest.mark.parametrize("seed", range(20))
    def test_policy_iteration_reduction(self, seed):
        m = _mdp(seed)
        rep = check_monotone_improvement(m, 0, 0.0, 0.0, 30)
        pi_star, vt = exact_policy_iteration(m)
        np.testing.assert_array_equal(rep.policies[-1].greedy_actions(), pi_star.greedy_actions())
        np.testing.assert_allclose(rep.trace[-1], vt.v, atol=1e-8)

    def test_fixed_point_stationary(self):
        rep = check_monotone_improvement(_mdp(11), 1, 0.1, 0.1, 25)
        np.testing.assert_allclose(rep.trace[-1], rep.trace[-2], atol=1e-8)

    def test_augmented_brac_reduction(self):
        m = _mdp(6, S=3, A=2)
        pi, vt = augmented_brac_iteration(m, 0, TabularPolicy.uniform(3, 2), 0.0, 0.0, 20)
        pi_star, vt_star = exact_policy_iteration(m)
        np.testing.assert_allclose(vt.v, vt_star.v, atol=1e-8)


class TestDeterministicIdentities:
    @pytest.mark.parametrize("seed,delay", [(0, 1), (1, 2), (2, 3)])
    def test_deterministic_identities(self, seed, delay):
        m = _mdp(seed, S=3, A=2, deterministic=True)
        aug = build_augmented_mdp(m, delay)
        B = belief_matrix(m, delay)
        pol = TabularPolicy.random(3, 2, np.random.default_rng(seed))
        q = exact_policy_evaluation(m, pol).q
        q_aug = exact_policy_evaluation(aug, lift_policy(m, delay, pol)).q
        for i, x in enumerate(enumerate_augmented_states(3, 2, delay)):
            s_t = int(np.argmax(B[i]))
            assert B[i, s_t] == 1.0
            for a in range(2):
                assert B[i] @ m.reward[:, a] == pytest.approx(aug.reward[i, a], abs=1e-9)
                assert aug.reward[i, a] == pytest.approx(m.reward[s_t, a], abs=1e-9)
                assert B[i] @ q[:, a] == pytest.approx(q_aug[i, a], abs=1e-9)

    def test_lift_rows_are_distributions(self):
        m = _mdp(3, S=3, A=2)
        lifted = lift_policy(m, 2, TabularPolicy.random(3, 2, np.random.default_rng(0)))
        assert lifted.probs.shape == (12, 2)
        assert augmented_state(11, 3, 2, 2).base_state == 2
