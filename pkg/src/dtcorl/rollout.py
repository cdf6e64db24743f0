"""Delayed deployment: delay processes, the action ring buffer, episodes, evaluation and datasets."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .belief import estimate_state
from .delayed import AugmentedArrays, AugmentedState, AugmentedTuple, augment_arrays, read_tuples, write_tuples_jsonl

DELAY_KINDS = ("deterministic", "uniform", "gaussian", "exponential", "binomial")


def _rounded_clamped_pmf(cdf, lo: int, hi: int) -> np.ndarray:
    """pmf of clip(floor(X + 0.5), lo, hi) for a continuous X given by its cdf."""
    ks = np.arange(lo, hi + 1)
    upper = np.where(ks == hi, 1.0, cdf(ks + 0.5))
    lower = np.where(ks == lo, 0.0, cdf(ks - 0.5))
    return upper - lower


def _bisect(f, lo: float, hi: float, target: float, iters: int = 200) -> float:
    """Root of the increasing function f(v) = target on [lo, hi]."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class DelayProcess:
    """Per-step observation delay.

    deterministic: always ``max_delay``. uniform: U{1..max_delay}.
    gaussian / exponential / binomial are mean-matched to ``mean`` with
    samples rounded and clamped into [1, max_delay].
    """

    kind: str
    max_delay: int
    mean: float | None = None
    params: dict = field(default_factory=dict, init=False)

    def __post_init__(self):
        if self.kind not in DELAY_KINDS:
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if self.max_delay < 0 or (self.kind != "deterministic" and self.max_delay < 1):
            raise ValueError("max_delay must be >= 1 for random delays")
        hi = self.max_delay
        if self.kind in ("gaussian", "exponential", "binomial"):
            if self.mean is None:
                raise ValueError(f"{self.kind} delay needs a target mean")
            if not 1.0 < self.mean < hi:
                raise ValueError(f"mean {self.mean} must lie strictly inside (1, {hi})")
        if self.kind == "gaussian":
            sd = hi / 4.0
            loc = _bisect(lambda m: self._pmf_mean(lambda x: stats.norm.cdf(x, m, sd)), -hi, 2 * hi, self.mean)
            self.params = {"loc": loc, "sd": sd}
        elif self.kind == "exponential":
            scale = _bisect(lambda b: self._pmf_mean(lambda x: stats.expon.cdf(x, scale=b)), 1e-6, 100.0 * hi,
                            self.mean)
            self.params = {"scale": scale}
        elif self.kind == "binomial":
            self.params = {"n": hi, "p": self.mean / hi}

    def _pmf_mean(self, cdf) -> float:
        pmf = _rounded_clamped_pmf(cdf, 1, self.max_delay)
        return float(np.arange(1, self.max_delay + 1) @ pmf)

    def expected_mean(self) -> float:
        hi = self.max_delay
        if self.kind == "deterministic":
            return float(hi)
        if self.kind == "uniform":
            return (1 + hi) / 2.0
        if self.kind == "binomial":
            pmf = stats.binom.pmf(np.arange(hi + 1), hi, self.params["p"])
            pmf[1] += pmf[0]
            return float(np.arange(1, hi + 1) @ pmf[1:])
        if self.kind == "gaussian":
            return self._pmf_mean(lambda x: stats.norm.cdf(x, self.params["loc"], self.params["sd"]))
        return self._pmf_mean(lambda x: stats.expon.cdf(x, scale=self.params["scale"]))

    def sample(self, rng: np.random.Generator, size=None):
        hi = self.max_delay
        if self.kind == "deterministic":
            out = np.full(size if size is not None else (), hi, dtype=np.int64)
        elif self.kind == "uniform":
            out = rng.integers(1, hi + 1, size=size)
        elif self.kind == "gaussian":
            raw = rng.normal(self.params["loc"], self.params["sd"], size=size)
            out = np.clip(np.floor(raw + 0.5), 1, hi).astype(np.int64)
        elif self.kind == "exponential":
            raw = rng.exponential(self.params["scale"], size=size)
            out = np.clip(np.floor(raw + 0.5), 1, hi).astype(np.int64)
        else:
            out = np.clip(rng.binomial(hi, self.params["p"], size=size), 1, hi).astype(np.int64)
        return int(out) if size is None else out

    def describe(self) -> str:
        if self.kind == "deterministic":
            return f"deterministic({self.max_delay})"
        if self.kind == "uniform":
            return f"uniform(1,{self.max_delay})"
        return f"{self.kind}(mean={self.mean},max={self.max_delay})"


class ActionBuffer:
    """Ring buffer of the most recent actions; unfilled slots are masked."""

    def __init__(self, capacity: int, action_dim: int = 1):
        self.capacity = capacity
        self.action_dim = action_dim
        self._data = np.zeros((max(capacity, 1), action_dim))
        self._head = 0  # next write position
        self.fill = 0

    def push(self, a):
        if self.capacity == 0:
            return
        self._data[self._head] = np.asarray(a, dtype=float).reshape(self.action_dim)
        self._head = (self._head + 1) % self.capacity
        self.fill = min(self.fill + 1, self.capacity)

    def last(self, k: int) -> np.ndarray:
        """The ``k`` most recent actions, oldest first."""
        if k > self.fill:
            raise ValueError(f"requested {k} actions but only {self.fill} are buffered")
        if k == 0:
            return np.zeros((0, self.action_dim))
        idx = (self._head - k + np.arange(k)) % self.capacity
        return self._data[idx].copy()

    def read(self) -> tuple[np.ndarray, np.ndarray]:
        """All slots in chronological order (filled first) and the mask (True = unfilled)."""
        out = np.zeros((self.capacity, self.action_dim))
        out[: self.fill] = self.last(self.fill)
        mask = np.arange(self.capacity) >= self.fill
        return out, mask

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.capacity) >= self.fill


@dataclass
class EpisodeRecord:
    true_states: list
    actions: list
    rewards: list
    delays: list  # sampled delta_t
    reveal: list  # index of the revealed observation, -1 during warm-up
    x_base: list
    x_window: list
    x_mask: list
    normalized: float | None = None

    @property
    def ret(self) -> float:
        return float(np.sum(self.rewards))

    def __len__(self):
        return len(self.actions)

    @property
    def effective_delays(self) -> list:
        return [t - r if r >= 0 else None for t, r in enumerate(self.reveal)]


def _as_vec(s) -> np.ndarray:
    return np.atleast_1d(np.asarray(s, dtype=float))


def _policy_input(belief, base, window, mask, rng):
    if belief is None:
        # Augmented-BC mode: flattened (base, window) with masked slots zeroed
        return np.concatenate([base, np.where(mask[:, None], 0.0, window).ravel()])
    return estimate_state(belief, base[None], window[None], mask[None], rng)[0]


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    env_ss, delay_ss, act_ss = ss.spawn(3)
    return np.random.default_rng(env_ss), np.random.default_rng(delay_ss), np.random.default_rng(act_ss)


def run_delayed_episode(env, policy, belief, delay_process: DelayProcess, seed: int, warmup: str = "random",
                        belief_rng: bool = False) -> EpisodeRecord:
    """Roll out ``policy`` while observations arrive ``delta_t`` steps late.

    The revealed index t - delta_t is clamped to be nondecreasing. Until the
    first observation arrives the executed actions are warm-up actions
    (uniform random, or zeros with ``warmup="zero"``). Afterwards x_t is the
    revealed state plus the actions since, padded to ``max_delay`` with masks.
    """
    if warmup not in ("random", "zero"):
        raise ValueError("warmup must be 'random' or 'zero'")
    env_rng, delay_rng, act_rng = _streams(seed)
    D = delay_process.max_delay
    da = env.action_dim
    buf = ActionBuffer(D, da)
    s = env.reset(env_rng)
    rec = EpisodeRecord([s], [], [], [], [], [], [], [])
    reveal_prev = -1
    for t in range(env.horizon):
        delta = delay_process.sample(delay_rng)
        reveal = min(t, max(reveal_prev, t - delta))
        reveal_prev = reveal
        if reveal < 0:
            if warmup == "random":
                a = env.random_action(act_rng)
            else:
                a = 0 if env.discrete else np.zeros(da)
            rec.x_base.append(None)
            rec.x_window.append(None)
            rec.x_mask.append(None)
        else:
            k = t - reveal
            base = _as_vec(rec.true_states[reveal])
            window = np.zeros((D, da))
            window[:k] = buf.last(k)
            mask = np.arange(D) >= k
            inp = _policy_input(belief, base, window, mask, act_rng if belief_rng else None)
            a = policy(inp)
            rec.x_base.append(base)
            rec.x_window.append(window)
            rec.x_mask.append(mask)
        s, r = env.step(s, a, env_rng)
        buf.push(a)
        rec.actions.append(a)
        rec.rewards.append(r)
        rec.delays.append(delta)
        rec.reveal.append(reveal)
        rec.true_states.append(s)
    return rec


def run_episode(env, policy, seed: int) -> EpisodeRecord:
    """Delay-free rollout with the same seeded streams as :func:`run_delayed_episode`."""
    env_rng, _, _ = _streams(seed)
    s = env.reset(env_rng)
    rec = EpisodeRecord([s], [], [], [], [], [], [], [])
    for t in range(env.horizon):
        a = policy(_as_vec(s))
        s, r = env.step(s, a, env_rng)
        rec.actions.append(a)
        rec.rewards.append(r)
        rec.delays.append(0)
        rec.reveal.append(t)
        rec.true_states.append(s)
    return rec


# ---------------------------------------------------------------------------
# reference policies


class ExpertPolicy:
    """The env's optimal delay-free controller applied to the first state_dim inputs."""

    def __init__(self, env):
        self.env = env

    def __call__(self, inp):
        s = np.asarray(inp, dtype=float)[: self.env.state_dim]
        return self.env.expert_action(int(round(s[0])) if self.env.discrete else s)


class RandomPolicy:
    def __init__(self, env, seed: int = 0):
        self.env = env
        self.rng = np.random.default_rng(seed)

    def __call__(self, inp):
        return self.env.random_action(self.rng)


class EpsilonGreedy:
    def __init__(self, env, base, eps: float, seed: int = 0):
        self.env, self.base, self.eps = env, base, eps
        self.rng = np.random.default_rng(seed)

    def __call__(self, inp):
        if self.rng.random() < self.eps:
            return self.env.random_action(self.rng)
        return self.base(inp)


# ---------------------------------------------------------------------------
# evaluation

_REF_CACHE: dict = {}


@dataclass
class ReferenceScores:
    random_score: float
    expert_score: float

    def normalize(self, ret):
        span = self.expert_score - self.random_score
        if span <= 0:
            raise ValueError("degenerate normalization: expert score does not exceed random score")
        return 100.0 * (np.asarray(ret, dtype=float) - self.random_score) / span


def reference_scores(env, seed: int = 0, n_episodes: int = 100) -> ReferenceScores:
    """Random-policy and delay-free expert mean returns, cached per env and seed."""
    key = (json.dumps(env.describe(), sort_keys=True), seed, n_episodes)
    if key not in _REF_CACHE:
        no_delay = DelayProcess("deterministic", 0)
        rand = [run_delayed_episode(env, RandomPolicy(env, seed + i), None, no_delay, 10_000_000 + seed * 1000 + i).ret
                for i in range(n_episodes)]
        expert = [run_episode(env, ExpertPolicy(env), 20_000_000 + seed * 1000 + i).ret for i in range(n_episodes)]
        refs = ReferenceScores(float(np.mean(rand)), float(np.mean(expert)))
        refs.normalize(0.0)  # raises when degenerate
        _REF_CACHE[key] = refs
    return _REF_CACHE[key]


@dataclass
class EvalResult:
    mean: float
    std: float  # across seeds
    per_seed: list
    returns: list
    normalized: list


def evaluate(env, policy, belief, delay_process: DelayProcess, n_episodes: int = 10, seeds=(0, 1, 2),
             refs: ReferenceScores | None = None, warmup: str = "random") -> EvalResult:
    refs = refs or reference_scores(env)
    per_seed, rets, norms = [], [], []
    for sd in seeds:
        r = [run_delayed_episode(env, policy, belief, delay_process, 1000 * sd + i, warmup).ret
             for i in range(n_episodes)]
        n = refs.normalize(r)
        rets.extend(r)
        norms.extend(n.tolist())
        per_seed.append(float(np.mean(n)))
    return EvalResult(float(np.mean(per_seed)), float(np.std(per_seed)), per_seed, rets, norms)


# ---------------------------------------------------------------------------
# datasets

BEHAVIOR_EPS = {"expert": 0.05, "medium": 0.3}
REPLAY_EPS = (1.0, 0.7, 0.4, 0.2, 0.05)


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, ds)
    actions: np.ndarray  # (T, da)
    rewards: np.ndarray  # (T,)

    def __len__(self):
        return len(self.actions)


@dataclass
class TrajectorySet:
    trajectories: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def subset(self, fraction: float, seed: int) -> "TrajectorySet":
        """ceil(fraction * K) trajectories chosen by a seeded shuffle."""
        if not 0.0 < fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        n = math.ceil(fraction * len(self))
        order = np.random.default_rng(seed).permutation(len(self))[:n]
        return TrajectorySet([self.trajectories[i] for i in sorted(order)], {**self.meta, "fraction": fraction})

    def mean_return(self) -> float:
        return float(np.mean([t.rewards.sum() for t in self.trajectories])) if self.trajectories else float("nan")

    def to_arrays(self, delay: int, include_boundary: bool = False) -> AugmentedArrays:
        if not self.trajectories:
            raise ValueError("empty dataset")
        parts = [augment_arrays(t.states, t.actions, t.rewards, delay, include_boundary) for t in self.trajectories
                 if len(t) > delay or include_boundary]
        return AugmentedArrays.concat(parts)

    def to_tuples(self, discrete: bool = False) -> list:
        """Delay-free tuples (window length 0); ``done`` marks each trajectory end."""
        out = []
        for tr in self.trajectories:
            T = len(tr)
            for t in range(T):
                s, s2 = tr.states[t], tr.states[t + 1]
                a = tr.actions[t]
                if discrete:
                    s, s2, a = int(s[0]), int(s2[0]), int(a[0])
                out.append(AugmentedTuple(AugmentedState(s), a, float(tr.rewards[t]), AugmentedState(s2), s,
                                          done=t == T - 1, next_true_state=s2))
        return out

    @classmethod
    def from_tuples(cls, tuples, meta=None) -> "TrajectorySet":
        trajs, cur = [], []
        for tp in tuples:
            cur.append(tp)
            if tp.done:
                trajs.append(cur)
                cur = []
        if cur:
            trajs.append(cur)
        out = []
        for tr in trajs:
            states = [_as_vec(tp.x.base_state) for tp in tr] + [_as_vec(tr[-1].x_next.base_state)]
            out.append(Trajectory(np.array(states), np.array([_as_vec(tp.a) for tp in tr]),
                                  np.array([tp.r for tp in tr])))
        return cls(out, dict(meta or {}))

    def save(self, path, discrete: bool = False) -> str:
        """Write JSON lines (delay-0 tuples); returns the sha256 of the file."""
        write_tuples_jsonl(path, self.to_tuples(discrete), delay=0)
        return file_checksum(path)

    @classmethod
    def load(cls, path, meta=None) -> "TrajectorySet":
        delay, tuples = read_tuples(path)
        if delay != 0:
            raise ValueError(f"trajectory files are delay-free, found delay {delay}")
        return cls.from_tuples(tuples, meta)


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_behavior_dataset(env, kind: str, n_trajectories: int, seed: int, reference_policy=None,
                              checkpoints=None) -> TrajectorySet:
    """Delay-free trajectories from an epsilon-greedy wrapper of the reference controller.

    expert: eps 0.05; medium: eps 0.3; replay-mix: cycles through ``checkpoints``
    (policies), or, when none are given, through eps in REPLAY_EPS.
    """
    if kind not in ("expert", "medium", "replay-mix"):
        raise ValueError(f"unknown behavior kind {kind!r}")
    if reference_policy is None:
        if not hasattr(env, "expert_action"):
            raise ValueError("environment has no solver and no reference policy was supplied")
        reference_policy = ExpertPolicy(env)
    out = []
    for i in range(n_trajectories):
        pseed = seed * 100_003 + i
        if kind == "replay-mix":
            if checkpoints:
                pol = checkpoints[i % len(checkpoints)]
            else:
                pol = EpsilonGreedy(env, reference_policy, REPLAY_EPS[i % len(REPLAY_EPS)], pseed)
        else:
            pol = EpsilonGreedy(env, reference_policy, BEHAVIOR_EPS[kind], pseed)
        rec = run_episode(env, pol, pseed)
        out.append(Trajectory(np.array([_as_vec(s) for s in rec.true_states]),
                              np.array([_as_vec(a) for a in rec.actions]), np.array(rec.rewards, dtype=float)))
    return TrajectorySet(out, {"env": env.name, "behavior": kind, "K": n_trajectories, "seed": seed})
