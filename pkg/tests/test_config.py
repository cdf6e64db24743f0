import pytest

from dtcorl.config import ConfigError, ExperimentConfig


class TestRoundTrip:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert ExperimentConfig.from_text(cfg.to_text(), {}) == cfg

    def test_modified(self):
        cfg = ExperimentConfig()
        cfg.set("verify", "delay_pairs", "0-1,1-3")
        cfg.set("eval", "delays", "2,5")
        cfg.set("learner", "joint", "false")
        cfg.set("env", "sigma", "0.125")
        back = ExperimentConfig.from_text(cfg.to_text(), {})
        assert back == cfg
        assert back.verify.delay_pairs == [(0, 1), (1, 3)]
        assert back.eval.delays == [2, 5]
        assert back.learner.joint is False

    def test_load_file(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[learner]\nalpha = 1.5\n[run]\nseeds = 3, 4\n")
        cfg = ExperimentConfig.load(p, {})
        assert cfg.learner.alpha == 1.5
        assert cfg.run.seeds == [3, 4]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            ExperimentConfig.load(tmp_path / "absent.ini", {})


class TestOverrides:
    def test_env_variable(self):
        cfg = ExperimentConfig()
        cfg.apply_env({"DTCORL_LEARNER_ALPHA": "0.7", "HOME": "/x"})
        assert cfg.learner.alpha == 0.7

    def test_env_beats_file(self):
        cfg = ExperimentConfig.from_text("[learner]\nalpha = 1.5\n", {"DTCORL_LEARNER_ALPHA": "0.3"})
        assert cfg.learner.alpha == 0.3

    def test_env_unknown_section(self):
        with pytest.raises(ConfigError, match="no known section"):
            ExperimentConfig().apply_env({"DTCORL_NOPE_X": "1"})

    def test_env_key_with_underscores(self):
        cfg = ExperimentConfig()
        cfg.apply_env({"DTCORL_LEARNER_STEPS_PER_EPOCH": "7"})
        assert cfg.learner.steps_per_epoch == 7

    def test_smoke_profile(self):
        cfg = ExperimentConfig()
        cfg.apply_profile("smoke")
        assert cfg.learner.n_steps == 50
        assert cfg.dataset.n_trajectories == 10
        assert cfg.eval.n_episodes == 2
        cfg.validate()

    def test_full_profile_is_noop(self):
        cfg = ExperimentConfig()
        cfg.apply_profile("full")
        assert cfg == ExperimentConfig()

    def test_unknown_profile(self):
        with pytest.raises(ConfigError):
            ExperimentConfig().apply_profile("huge")


class TestValidation:
    @pytest.mark.parametrize("section,key,raw", [
        ("dataset", "fraction", "0"),
        ("dataset", "fraction", "1.5"),
        ("dataset", "behavior", "random"),
        ("dataset", "n_trajectories", "-1"),
        ("delay", "kind", "poisson"),
        ("delay", "max_delay", "-2"),
        ("learner", "algorithm", "cql"),
        ("learner", "gamma", "1.0"),
        ("learner", "lam1", "-0.1"),
        ("learner", "policy_freq", "0"),
        ("belief", "architecture", "rnn"),
        ("belief", "mode", "l1"),
        ("eval", "delays", "4,-1"),
        ("verify", "fault", "bitrot"),
    ])
    def test_rejects(self, section, key, raw):
        cfg = ExperimentConfig()
        cfg.set(section, key, raw)
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_mean_matched_needs_mean(self):
        cfg = ExperimentConfig()
        cfg.set("delay", "kind", "gaussian")
        with pytest.raises(ConfigError, match="delay.mean"):
            cfg.validate()
        cfg.set("delay", "mean", "2.5")
        cfg.validate()

    def test_empty_seeds(self):
        cfg = ExperimentConfig()
        cfg.run.seeds = []
        with pytest.raises(ConfigError, match="seeds"):
            cfg.validate()

    @pytest.mark.parametrize("section,key,raw,match", [
        ("nope", "x", "1", "unknown section"),
        ("learner", "nope", "1", "unknown key"),
        ("learner", "alpha", "abc", "cannot parse"),
        ("learner", "joint", "maybe", "cannot parse"),
        ("verify", "delay_pairs", "0:1", "cannot parse"),
    ])
    def test_set_errors(self, section, key, raw, match):
        with pytest.raises(ConfigError, match=match):
            ExperimentConfig().set(section, key, raw)

    def test_malformed_text(self):
        with pytest.raises(ConfigError, match="malformed"):
            ExperimentConfig.from_text("alpha = 1\n", {})

    @pytest.mark.parametrize("fraction,K,n", [(0.3, 7, 3), (1.0, 7, 7), (0.01, 100, 1), (0.25, 100, 25)])
    def test_n_selected_ceil(self, fraction, K, n):
        cfg = ExperimentConfig()
        cfg.dataset.fraction, cfg.dataset.n_trajectories = fraction, K
        assert cfg.n_selected() == n
