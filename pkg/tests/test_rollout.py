import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtcorl.belief import AnalyticBelief
from dtcorl.envs import LinearRotation2D, PointMass1D, TabularEnv, make_env
from dtcorl.mdp import two_state_chain
from dtcorl.rollout import (ActionBuffer, DelayProcess, ExpertPolicy, RandomPolicy, ReferenceScores, TrajectorySet,
                            evaluate, file_checksum, generate_behavior_dataset, reference_scores,
                            run_delayed_episode, run_episode)


class TestDelayProcess:
    def test_deterministic_constant(self):
        d = DelayProcess("deterministic", 7)
        assert np.all(d.sample(np.random.default_rng(0), 1000) == 7)
        assert d.sample(np.random.default_rng(0)) == 7

    @pytest.mark.parametrize("k", [1, 4, 16])
    def test_uniform_covers_range(self, k):
        x = DelayProcess("uniform", k).sample(np.random.default_rng(k), 10_000)
        assert set(np.unique(x)) == set(range(1, k + 1))

    @pytest.mark.parametrize("kind", ["gaussian", "exponential", "binomial"])
    @pytest.mark.parametrize("mean", [3.0, 8.0])
    def test_mean_matched_within_2pct(self, kind, mean):
        d = DelayProcess(kind, 16, mean)
        x = d.sample(np.random.default_rng(1), 100_000)
        assert x.min() >= 1 and x.max() <= 16
        assert abs(x.mean() - mean) <= 0.02 * mean
        assert abs(d.expected_mean() - mean) <= 0.02 * mean

    def test_fitted_pmf_mean_exact(self):
        # bisection hits the target mean of the rounded, clamped law
        for kind in ("gaussian", "exponential"):
            assert DelayProcess(kind, 16, 8.0).expected_mean() == pytest.approx(8.0, abs=1e-9)

    @pytest.mark.parametrize("kind,mean", [("gaussian", None), ("exponential", 1.0), ("binomial", 16.0)])
    def test_bad_mean(self, kind, mean):
        with pytest.raises(ValueError):
            DelayProcess(kind, 16, mean)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            DelayProcess("poisson", 4)


class NaiveBuffer:
    def __init__(self, cap):
        self.cap, self.items = cap, []

    def push(self, a):
        self.items = (self.items + [a])[-self.cap:] if self.cap else []


class TestActionBuffer:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 8), st.lists(st.floats(-1, 1, allow_nan=False), max_size=40))
    def test_matches_naive(self, cap, pushes):
        buf, ref = ActionBuffer(cap), NaiveBuffer(cap)
        for a in pushes:
            buf.push(a)
            ref.push(a)
            win, mask = buf.read()
            n = len(ref.items)
            assert buf.fill == n
            np.testing.assert_array_equal(win[:n, 0], ref.items)
            np.testing.assert_array_equal(mask, np.arange(cap) >= n)

    def test_long_random_sequence(self):
        rng = np.random.default_rng(0)
        buf, ref = ActionBuffer(5), NaiveBuffer(5)
        for a in rng.normal(size=10_000):
            buf.push(a)
            ref.push(a)
        np.testing.assert_array_equal(buf.last(5)[:, 0], ref.items)
        assert not buf.mask.any()

    def test_underflow(self):
        buf = ActionBuffer(3)
        buf.push(1.0)
        with pytest.raises(ValueError):
            buf.last(2)


def _shadow_check(rec, D):
    """x_t rebuilt by the harness equals the ground truth logged alongside it."""
    checked = 0
    for t, r in enumerate(rec.reveal):
        if r < 0:
            assert rec.x_base[t] is None
            continue
        k = t - r
        np.testing.assert_array_equal(rec.x_base[t], np.atleast_1d(rec.true_states[r]))
        truth = np.array([np.atleast_1d(a) for a in rec.actions[r:t]]).reshape(k, -1)
        np.testing.assert_array_equal(rec.x_window[t][:k], truth)
        np.testing.assert_array_equal(rec.x_mask[t], np.arange(D) >= k)
        checked += 1
    return checked


class TestEpisodes:
    @pytest.mark.parametrize("D", [1, 4, 8])
    def test_shadow_log_deterministic(self, D):
        env = PointMass1D(sigma=0.05, horizon=40)
        rec = run_delayed_episode(env, lambda x: -x[:1], None, DelayProcess("deterministic", D), seed=3)
        assert _shadow_check(rec, D) == 40 - D
        assert all(t - r == D for t, r in enumerate(rec.reveal) if t >= D)

    @pytest.mark.parametrize("kind,mean", [("uniform", None), ("gaussian", 6.0), ("exponential", 4.0),
                                           ("binomial", 8.0)])
    @pytest.mark.parametrize("seed", range(3))
    def test_shadow_log_and_monotone_reveal(self, kind, mean, seed):
        env = PointMass1D(sigma=0.05, horizon=60)
        rec = run_delayed_episode(env, RandomPolicy(env, seed), None, DelayProcess(kind, 12, mean), seed=seed)
        _shadow_check(rec, 12)
        rev = np.array(rec.reveal)
        assert np.all(np.diff(rev) >= 0)
        assert np.all(rev <= np.arange(60))
        seen = rev >= 0
        assert np.all(np.arange(60)[seen] - rev[seen] <= 12)

    def test_zero_delay_is_delay_free(self):
        env = PointMass1D(sigma=0.05, horizon=30)
        pol = ExpertPolicy(env)
        a = run_delayed_episode(env, pol, None, DelayProcess("deterministic", 0), seed=5)
        b = run_episode(env, pol, seed=5)
        np.testing.assert_array_equal(np.array(a.true_states), np.array(b.true_states))
        np.testing.assert_array_equal(np.array(a.actions), np.array(b.actions))

    @pytest.mark.parametrize("env", [PointMass1D(horizon=30), LinearRotation2D(horizon=30)])
    def test_analytic_belief_recovers_delay_free_actions(self, env):
        D = 3
        pol = ExpertPolicy(env)
        bel = AnalyticBelief(env.mean_step)
        a = run_delayed_episode(env, pol, bel, DelayProcess("deterministic", D), seed=2)
        for t in range(D, env.horizon):
            np.testing.assert_allclose(a.actions[t], pol(a.true_states[t]), atol=1e-12)

    def test_return_is_sum(self):
        env = PointMass1D(sigma=0.05)
        rec = run_delayed_episode(env, RandomPolicy(env), None, DelayProcess("uniform", 4), seed=0)
        assert len(rec) == env.horizon
        assert rec.ret == pytest.approx(sum(rec.rewards), abs=1e-9)

    def test_zero_warmup(self):
        env = PointMass1D(horizon=10)
        rec = run_delayed_episode(env, lambda x: np.ones(1), None, DelayProcess("deterministic", 4), 0, warmup="zero")
        assert all(np.all(a == 0) for a in rec.actions[:4])

    def test_seeded(self):
        env = PointMass1D(sigma=0.1)
        runs = [run_delayed_episode(env, RandomPolicy(env, 1), None, DelayProcess("uniform", 5), 9) for _ in range(2)]
        assert runs[0].rewards == runs[1].rewards


class TestEvaluation:
    def test_reference_points(self):
        env = PointMass1D(sigma=0.05)
        refs = reference_scores(env)
        rand = evaluate(env, RandomPolicy(env, 123), None, DelayProcess("deterministic", 0), n_episodes=100,
                        seeds=(7,))
        exp = evaluate(env, ExpertPolicy(env), None, DelayProcess("deterministic", 0), n_episodes=50, seeds=(0,))
        assert refs.expert_score > refs.random_score
        assert abs(rand.mean) < 10.0
        assert abs(exp.mean - 100.0) < 5.0

    def test_delay_hurts_expert_on_chain(self):
        env = make_env("chain2", horizon=50)
        kw = dict(n_episodes=30, seeds=(0, 1))
        d0 = evaluate(env, ExpertPolicy(env), None, DelayProcess("deterministic", 0), **kw)
        d8 = evaluate(env, ExpertPolicy(env), None, DelayProcess("deterministic", 8), **kw)
        assert d8.mean < d0.mean

    def test_normalization_formula(self):
        refs = ReferenceScores(-10.0, 30.0)
        assert refs.normalize(10.0) == pytest.approx(50.0)
        shifted = ReferenceScores(-10.0 + 5 * 50, 30.0 + 5 * 50)  # reward + 5 over T = 50
        assert shifted.normalize(10.0 + 5 * 50) == pytest.approx(refs.normalize(10.0))

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            ReferenceScores(1.0, 1.0).normalize(0.0)


class TestDatasets:
    def test_empty(self):
        assert len(generate_behavior_dataset(PointMass1D(), "medium", 0, 0)) == 0

    def test_expert_beats_medium_on_chain(self):
        env = TabularEnv(two_state_chain(p_flip=0.8), "chain2", 50)
        ex = generate_behavior_dataset(env, "expert", 50, 0)
        md = generate_behavior_dataset(env, "medium", 50, 0)
        assert ex.mean_return() > md.mean_return()

    def test_replay_consistency(self):
        env = PointMass1D(sigma=0.0, horizon=20)
        ds = generate_behavior_dataset(env, "replay-mix", 5, 1)
        for tr in ds.trajectories:
            for t in range(len(tr)):
                s2, r = env.step(tr.states[t], tr.actions[t])
                np.testing.assert_allclose(s2, tr.states[t + 1], atol=1e-12)
                assert r == pytest.approx(tr.rewards[t])

    def test_unknown_kind_and_unsolvable(self):
        with pytest.raises(ValueError):
            generate_behavior_dataset(PointMass1D(), "random", 2, 0)

        class NoSolver:
            name = "x"

        with pytest.raises(ValueError, match="no solver"):
            generate_behavior_dataset(NoSolver(), "expert", 2, 0)

    def test_fraction_ceil(self):
        ds = generate_behavior_dataset(PointMass1D(horizon=5), "medium", 7, 0)
        assert len(ds.subset(0.3, 0)) == 3
        assert len(ds.subset(1.0, 0)) == 7
        with pytest.raises(ValueError):
            ds.subset(0.0, 0)

    @pytest.mark.parametrize("discrete", [False, True])
    def test_save_load(self, tmp_path, discrete):
        env = make_env("chain2", horizon=8) if discrete else PointMass1D(horizon=8)
        ds = generate_behavior_dataset(env, "medium", 3, 0)
        path = tmp_path / "d.jsonl"
        digest = ds.save(path, discrete=discrete)
        assert digest == file_checksum(path)
        back = TrajectorySet.load(path)
        assert len(back) == 3
        for a, b in zip(ds.trajectories, back.trajectories):
            np.testing.assert_allclose(np.asarray(a.states, float).reshape(-1), b.states.reshape(-1))
            np.testing.assert_allclose(a.rewards, b.rewards)
