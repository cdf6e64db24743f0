"""Experiment configuration: INI-style sections, typed fields, DTCORL_ environment overrides.

An override variable is named DTCORL_<SECTION>_<KEY>, e.g. DTCORL_LEARNER_ALPHA=1.0.
"""
from __future__ import annotations

import configparser
import io
import math
import os
from dataclasses import dataclass, field, fields

ENV_PREFIX = "DTCORL_"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def _ints(s) -> list:
    if isinstance(s, (list, tuple)):
        return [int(v) for v in s]
    return [int(v) for v in str(s).replace(" ", "").split(",") if v != ""]


def _pairs(s) -> list:
    if isinstance(s, (list, tuple)):
        return [tuple(int(x) for x in p) for p in s]
    out = []
    for item in str(s).replace(" ", "").split(","):
        if item:
            a, b = item.split("-")
            out.append((int(a), int(b)))
    return out


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        if v and isinstance(v[0], tuple):
            return ",".join(f"{a}-{b}" for a, b in v)
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class EnvSection:
    id: str = "pointmass1d"
    sigma: float = 0.05
    horizon: int = 50


@dataclass
class DelaySection:
    kind: str = "deterministic"
    max_delay: int = 4
    mean: float = 0.0  # 0 = unset (only mean-matched kinds need it)


@dataclass
class DatasetSection:
    behavior: str = "medium"
    n_trajectories: int = 100
    fraction: float = 1.0


@dataclass
class BeliefSection:
    architecture: str = "transformer"
    mode: str = "mse"
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    dropout: float = 0.1
    n_members: int = 5
    hidden: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 256


@dataclass
class LearnerSection:
    algorithm: str = "dtcorl"
    joint: bool = True
    n_steps: int = 3000
    steps_per_epoch: int = 500
    lam1: float = 0.1
    lam2: float = 0.1
    alpha: float = 2.5
    alpha1: float = 0.1
    alpha2: float = 0.1
    gamma: float = 0.99
    epsilon: float = 0.0
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    tau: float = 5e-3
    policy_freq: int = 2
    batch_size: int = 256
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    hidden: int = 256
    critic_w1_proxy: bool = False


@dataclass
class EvalSection:
    delays: list = field(default_factory=lambda: [4, 8, 16])
    stochastic: bool = True
    n_episodes: int = 10
    eval_every_epoch: bool = False


@dataclass
class RunSection:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs"


@dataclass
class VerifySection:
    n_mdps: int = 20
    n_states: int = 3
    n_actions: int = 2
    delay_pairs: list = field(default_factory=lambda: [(0, 1), (0, 2), (1, 2)])
    n_policy_pairs: int = 10
    monotone_states: int = 4
    monotone_actions: int = 3
    monotone_delays: list = field(default_factory=lambda: [1, 2])
    monotone_iters: int = 10
    n_triples: int = 50
    per_x: bool = False
    fault: str = "none"


@dataclass
class BenchSection:
    n_states: int = 8
    p_advance: float = 0.8
    horizon: int = 16
    n_trajectories: int = 400
    n_steps: int = 1500
    batch_size: int = 128
    lr: float = 1e-3
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    n_members: int = 5
    hidden: int = 64
    n_test: int = 2000
    latency_calls: int = 50


SECTIONS = {
    "env": EnvSection, "delay": DelaySection, "dataset": DatasetSection, "belief": BeliefSection,
    "learner": LearnerSection, "eval": EvalSection, "run": RunSection, "verify": VerifySection,
    "bench": BenchSection,
}
LIST_INT = {("eval", "delays"), ("run", "seeds"), ("verify", "monotone_delays")}
LIST_PAIR = {("verify", "delay_pairs")}


def _coerce(section: str, key: str, proto, raw):
    if (section, key) in LIST_INT:
        return _ints(raw)
    if (section, key) in LIST_PAIR:
        return _pairs(raw)
    if isinstance(proto, bool):
        return _bool(raw)
    if isinstance(proto, int):
        return int(raw)
    if isinstance(proto, float):
        return float(raw)
    return str(raw)


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    delay: DelaySection = field(default_factory=DelaySection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    belief: BeliefSection = field(default_factory=BeliefSection)
    learner: LearnerSection = field(default_factory=LearnerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)
    verify: VerifySection = field(default_factory=VerifySection)
    bench: BenchSection = field(default_factory=BenchSection)

    def set(self, section: str, key: str, raw) -> None:
        sec = getattr(self, section, None)
        if section not in SECTIONS or sec is None:
            raise ConfigError(f"unknown section [{section}]")
        if key not in {f.name for f in fields(sec)}:
            raise ConfigError(f"unknown key {section}.{key}")
        try:
            setattr(sec, key, _coerce(section, key, getattr(sec, key), raw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r} ({exc})") from None

    def validate(self) -> "ExperimentConfig":
        d, ds, ln = self.delay, self.dataset, self.learner
        if not 0.0 < ds.fraction <= 1.0:
            raise ConfigError(f"dataset.fraction must lie in (0, 1], got {ds.fraction}")
        if ds.n_trajectories < 0:
            raise ConfigError("dataset.n_trajectories must be >= 0")
        if ds.behavior not in ("expert", "medium", "replay-mix"):
            raise ConfigError(f"dataset.behavior: unknown kind {ds.behavior!r}")
        if not self.run.seeds:
            raise ConfigError("run.seeds must be nonempty")
        if d.kind not in ("deterministic", "uniform", "gaussian", "exponential", "binomial"):
            raise ConfigError(f"delay.kind: unknown kind {d.kind!r}")
        if d.max_delay < 0:
            raise ConfigError("delay.max_delay must be >= 0")
        if d.kind in ("gaussian", "exponential", "binomial") and not 1.0 < d.mean < d.max_delay:
            raise ConfigError(f"delay.mean must lie in (1, max_delay) for {d.kind}, got {d.mean}")
        if d.mean > d.max_delay:
            raise ConfigError("delay.mean exceeds delay.max_delay")
        if ln.algorithm not in ("dtcorl", "augbc"):
            raise ConfigError(f"learner.algorithm: unknown {ln.algorithm!r}")
        if ln.n_steps < 1 or ln.steps_per_epoch < 1:
            raise ConfigError("learner.n_steps and learner.steps_per_epoch must be >= 1")
        for k in ("lam1", "lam2", "alpha", "alpha1", "alpha2"):
            if getattr(ln, k) < 0:
                raise ConfigError(f"learner.{k} must be >= 0")
        if ln.policy_freq < 1:
            raise ConfigError("learner.policy_freq must be >= 1")
        if not 0.0 < ln.gamma < 1.0:
            raise ConfigError("learner.gamma must lie in (0, 1)")
        if self.belief.architecture not in ("transformer", "ensemble"):
            raise ConfigError(f"belief.architecture: unknown {self.belief.architecture!r}")
        if self.belief.mode not in ("mse", "mle"):
            raise ConfigError(f"belief.mode: unknown {self.belief.mode!r}")
        if any(x < 0 for x in self.eval.delays):
            raise ConfigError("eval.delays must be >= 0")
        if self.verify.fault not in ("none", "sign_flip"):
            raise ConfigError(f"verify.fault: unknown {self.verify.fault!r}")
        return self

    # -- text round trip
    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(sec, f.name)) for f in fields(sec)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, env: dict | None = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        cfg = cls()
        for section in cp.sections():
            for key, raw in cp[section].items():
                cfg.set(section, key, raw)
        cfg.apply_env(os.environ if env is None else env)
        return cfg

    @classmethod
    def load(cls, path, env: dict | None = None) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, env)

    def apply_env(self, env) -> None:
        for var, raw in env.items():
            if not var.startswith(ENV_PREFIX):
                continue
            rest = var[len(ENV_PREFIX):].lower()
            for section in SECTIONS:
                if rest.startswith(section + "_"):
                    self.set(section, rest[len(section) + 1:], raw)
                    break
            else:
                raise ConfigError(f"environment override {var} names no known section")

    def apply_profile(self, profile: str) -> None:
        if profile == "full":
            return
        if profile != "smoke":
            raise ConfigError(f"unknown profile {profile!r}")
        b, ln = self.belief, self.learner
        b.d_model, b.n_layers, b.n_heads, b.hidden, b.n_members = 8, 1, 2, 16, 2
        b.batch_size = 32
        ln.hidden, ln.batch_size, ln.n_steps, ln.steps_per_epoch = 16, 32, 50, 25
        self.dataset.n_trajectories = min(self.dataset.n_trajectories, 10)
        self.eval.n_episodes = min(self.eval.n_episodes, 2)
        v = self.verify
        v.n_mdps, v.n_policy_pairs, v.monotone_iters, v.n_triples = min(v.n_mdps, 2), 2, 3, 5
        bn = self.bench
        bn.n_trajectories, bn.n_steps, bn.n_test, bn.latency_calls = 40, 30, 100, 5
        bn.d_model, bn.n_layers, bn.hidden, bn.n_members = 8, 1, 16, 2

    def n_selected(self) -> int:
        return math.ceil(self.dataset.fraction * self.dataset.n_trajectories)
