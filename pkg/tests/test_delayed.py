import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtcorl.delayed import (AugmentedState, augment_arrays, augment_trajectory, augmented_index, augmented_state,
                            belief_matrix, build_augmented_mdp, delayed_reward, delayed_transition, exact_belief,
                            exact_belief_matrix_product, n_augmented_states, read_tuples, recover_trajectory,
                            sub_belief_matrix, truncate_windows, write_tuples_binary, write_tuples_jsonl)
from dtcorl.mdp import TabularMdp, TabularPolicy, exact_policy_iteration, random_tabular_mdp, two_state_chain


def monte_carlo_belief(mdp, x, n, rng):
    s = np.full(n, x.base_state)
    cdf = np.cumsum(mdp.transition, axis=-1)
    for a in x.action_window:
        u = rng.random(n)
        s = np.minimum((u[:, None] > cdf[s, a]).sum(1), mdp.n_states - 1)
    return np.bincount(s, minlength=mdp.n_states) / n


def stochastic_chain():
    return two_state_chain(p_flip=0.8, gamma=0.9)


def _random_traj(mdp, T, rng):
    s = int(rng.integers(mdp.n_states))
    out = []
    for _ in range(T):
        a = int(rng.integers(mdp.n_actions))
        s2 = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
        out.append((s, a, float(mdp.reward[s, a]), s2))
        s = s2
    return out


class TestExactBelief:
    def test_empty_window_point_mass(self):
        np.testing.assert_array_equal(exact_belief(stochastic_chain(), AugmentedState(0)), [1.0, 0.0])

    def test_deterministic_composition(self):
        b = exact_belief(two_state_chain(1.0), AugmentedState(0, (1, 0)))
        np.testing.assert_array_equal(b, [0.0, 1.0])

    def test_monte_carlo(self):
        m = stochastic_chain()
        x = AugmentedState(0, (1, 1))
        n = 10**6
        mc = monte_carlo_belief(m, x, n, np.random.default_rng(0))
        b = exact_belief(m, x)
        se = np.sqrt(np.maximum(b * (1 - b), 1e-12) / n)
        assert np.all(np.abs(mc - b) <= 3 * se)

    def test_matrix_product_agrees(self):
        m = random_tabular_mdp(4, 3, np.random.default_rng(2))
        for x in [AugmentedState(1, (0, 2, 1)), AugmentedState(3, ())]:
            np.testing.assert_allclose(exact_belief(m, x), exact_belief_matrix_product(m, x), atol=1e-14)

    @pytest.mark.parametrize("bad", [AugmentedState(5, ()), AugmentedState(0, (7,)), AugmentedState(-1, ())])
    def test_invalid_ids(self, bad):
        with pytest.raises(ValueError):
            exact_belief(stochastic_chain(), bad)

    def test_probabilities(self):
        m = random_tabular_mdp(5, 2, np.random.default_rng(3))
        B = belief_matrix(m, 3)
        assert np.all(B >= 0)
        np.testing.assert_allclose(B.sum(1), 1.0, atol=1e-12)


class TestRewardAndTransition:
    def test_no_delay_reward(self):
        m = random_tabular_mdp(3, 2, np.random.default_rng(0))
        assert delayed_reward(m, AugmentedState(2), 1) == m.reward[2, 1]

    def test_deterministic_reward(self):
        m = random_tabular_mdp(3, 2, np.random.default_rng(0), deterministic=True)
        x = AugmentedState(0, (1, 0))
        s_t = int(np.argmax(exact_belief(m, x)))
        assert delayed_reward(m, x, 1) == m.reward[s_t, 1]

    def test_stochastic_chain_reward(self):
        assert delayed_reward(stochastic_chain(), AugmentedState(0, (1,)), 0) == pytest.approx(0.8)

    def test_stochastic_chain_reward_monte_carlo(self):
        m = stochastic_chain()
        mc = monte_carlo_belief(m, AugmentedState(0, (1,)), 200_000, np.random.default_rng(5)) @ m.reward[:, 0]
        assert abs(mc - 0.8) < 3 * np.sqrt(0.16 / 200_000)

    def test_deterministic_single_successor(self):
        out = delayed_transition(two_state_chain(1.0), AugmentedState(0, (1, 1)), 0)
        assert out == {AugmentedState(1, (1, 0)): 1.0}

    def test_no_delay_is_plain_kernel(self):
        m = stochastic_chain()
        out = delayed_transition(m, AugmentedState(0), 1)
        assert out == {AugmentedState(0): pytest.approx(0.2), AugmentedState(1): pytest.approx(0.8)}

    def test_stochastic_successors_match_augmented_row(self):
        m = stochastic_chain()
        x = AugmentedState(0, (1,))
        out = delayed_transition(m, x, 0)
        assert out[AugmentedState(1, (0,))] == pytest.approx(0.8)
        assert out[AugmentedState(0, (0,))] == pytest.approx(0.2)
        aug = build_augmented_mdp(m, 1)
        row = aug.transition[augmented_index(x, 2), 0]
        for y, p in out.items():
            assert row[augmented_index(y, 2)] == pytest.approx(p)


class TestAugmentedMdp:
    def test_zero_delay_identity(self):
        m = random_tabular_mdp(3, 2, np.random.default_rng(0))
        aug = build_augmented_mdp(m, 0)
        np.testing.assert_array_equal(aug.transition, m.transition)
        np.testing.assert_array_equal(aug.reward, m.reward)
        np.testing.assert_array_equal(aug.rho0, m.rho0)

    def test_information_loss(self):
        m = random_tabular_mdp(2, 2, np.random.default_rng(1))
        aug = build_augmented_mdp(m, 2)
        assert aug.n_states == 8
        _, v0 = exact_policy_iteration(m)
        _, v2 = exact_policy_iteration(aug)
        assert aug.rho0 @ v2.v <= m.rho0 @ v0.v + 1e-9

    def test_deterministic_loses_nothing(self):
        m = two_state_chain(1.0)
        aug = build_augmented_mdp(m, 1)
        _, v0 = exact_policy_iteration(m)
        _, v1 = exact_policy_iteration(aug)
        assert aug.rho0 @ v1.v == pytest.approx(m.rho0 @ v0.v, abs=1e-9)

    def test_index_round_trip(self):
        for idx in range(n_augmented_states(3, 2, 3)):
            assert augmented_index(augmented_state(idx, 3, 2, 3), 2) == idx

    def test_budget(self):
        m = random_tabular_mdp(10, 10, np.random.default_rng(0))
        with pytest.raises(ValueError, match="budget"):
            build_augmented_mdp(m, 6)

    def test_sub_belief_rows(self):
        m = random_tabular_mdp(3, 2, np.random.default_rng(7))
        sub = sub_belief_matrix(m, 2, 0)
        np.testing.assert_allclose(sub, belief_matrix(m, 2), atol=1e-14)
        np.testing.assert_allclose(sub_belief_matrix(m, 2, 1).sum(1), 1.0)


class TestAugmentTrajectory:
    def test_count(self):
        traj = _random_traj(stochastic_chain(), 5, np.random.default_rng(0))
        assert len(augment_trajectory(traj, 2)) == 3

    def test_short_trajectory_is_empty(self):
        traj = _random_traj(stochastic_chain(), 2, np.random.default_rng(0))
        assert augment_trajectory(traj, 2) == []

    def test_zero_delay_is_raw(self):
        traj = _random_traj(stochastic_chain(), 6, np.random.default_rng(1))
        out = augment_trajectory(traj, 0)
        assert [(t.x.base_state, t.a, t.r, t.x_next.base_state) for t in out] == traj

    def test_window_shift_structure(self):
        m = random_tabular_mdp(3, 2, np.random.default_rng(2))
        traj = _random_traj(m, 100, np.random.default_rng(3))
        for t in augment_trajectory(traj, 3):
            assert t.x_next.action_window == t.x.action_window[1:] + (t.a,)
        # x_next base is the successor of x base under the oldest action
        states = [s for s, *_ in traj] + [traj[-1][3]]
        for i, t in enumerate(augment_trajectory(traj, 3)):
            assert t.x.base_state == states[i] and t.x_next.base_state == states[i + 1]
            assert t.true_state == states[i + 3]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 4), st.integers(1, 20), st.integers(0, 10**6))
    def test_recover_round_trip(self, delay, T, seed):
        traj = _random_traj(stochastic_chain(), T, np.random.default_rng(seed))
        assert recover_trajectory(augment_trajectory(traj, delay, include_boundary=True), delay) == traj

    def test_boundary_masks_trail(self):
        traj = _random_traj(stochastic_chain(), 6, np.random.default_rng(4))
        for t in augment_trajectory(traj, 3, include_boundary=True):
            m = t.x.mask
            assert list(m) == sorted(m)  # False (real) first, then True (masked)


class TestArrays:
    def test_arrays_match_tuples(self):
        rng = np.random.default_rng(0)
        traj = _random_traj(random_tabular_mdp(3, 2, rng), 12, rng)
        states = np.array([s for s, *_ in traj] + [traj[-1][3]], dtype=float)
        acts = np.array([a for _, a, *_ in traj], dtype=float)
        rews = np.array([r for *_, r, _ in traj])
        arr = augment_arrays(states, acts, rews, 3, include_boundary=True)
        tup = augment_trajectory(traj, 3, include_boundary=True)
        assert len(arr) == len(tup)
        for i, t in enumerate(tup):
            assert arr.base[i, 0] == t.x.base_state
            assert arr.boundary[i] == t.boundary
            real = [a for a in t.x.action_window if a is not None]
            np.testing.assert_array_equal(arr.window[i, :len(real), 0], real)
            np.testing.assert_array_equal(arr.mask[i], t.x.mask)
            np.testing.assert_array_equal(arr.labels[i, :len(real), 0], t.intermediate_states)
            assert arr.true_state[i, 0] == t.true_state

    def test_truncate_only_adds_masks(self):
        rng = np.random.default_rng(0)
        st_ = rng.normal(size=(30, 2))
        arr = augment_arrays(st_, rng.normal(size=(29, 1)), np.zeros(29), 5, include_boundary=True)
        cut = truncate_windows(arr, rng)
        assert np.all(cut.mask >= arr.mask)
        assert np.all(~cut.mask[~arr.mask[:, 0], 0])  # rows that had an action keep one
        assert np.all(cut.mask[:, :-1] <= cut.mask[:, 1:])


class TestSerialization:
    @pytest.mark.parametrize("writer", [write_tuples_jsonl, write_tuples_binary])
    def test_round_trip(self, tmp_path, writer):
        traj = _random_traj(stochastic_chain(), 10, np.random.default_rng(0))
        tuples = augment_trajectory(traj, 2, include_boundary=True)
        path = tmp_path / "t.dat"
        writer(path, tuples, 2)
        delay, back = read_tuples(path)
        assert delay == 2
        assert [(t.x, t.a, t.r, t.x_next, t.true_state, t.done, t.boundary) for t in back] == \
            [(t.x, t.a, t.r, t.x_next, t.true_state, t.done, t.boundary) for t in tuples]

    def test_continuous_round_trip(self, tmp_path):
        from dtcorl.delayed import AugmentedTuple
        x = AugmentedState(np.array([0.5, -1.0]), (np.array([0.1]), None))
        t = AugmentedTuple(x, np.array([0.3]), 1.5, x, np.array([0.2, 0.2]))
        write_tuples_jsonl(tmp_path / "c.jsonl", [t], 2)
        _, back = read_tuples(tmp_path / "c.jsonl")
        assert back[0].x == x and back[0].r == 1.5


def test_lifted_policy_reduces_without_delay():
    m = random_tabular_mdp(3, 2, np.random.default_rng(0))
    pol = TabularPolicy.random(3, 2, np.random.default_rng(1))
    np.testing.assert_allclose(belief_matrix(m, 0) @ pol.probs, pol.probs)
    assert isinstance(m, TabularMdp)
