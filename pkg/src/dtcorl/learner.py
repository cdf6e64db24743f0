"""Neural actor-critic on belief estimates, plus the Augmented-BC baseline.

The critic and actor see the belief point estimate s_hat of the augmented
state. Critic targets use dataset rewards directly:
    y = r + gamma * min(Q1', Q2')(s_hat', clip(pi'(s_hat') + noise)).
The actor maximises Q1(s_hat, pi(s_hat)) - alpha * ||a - pi(s_hat)||^2.
"""
from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import Tensor
from .belief import (BeliefConfig, BeliefTrainConfig, BeliefTrainer, NonFiniteLoss, belief_train_step, build_belief,
                     estimate_state)
from .delayed import truncate_windows
from .nn import MLP, Module, soft_update

POLICY_MAGIC = b"DTCP"
TRACE_COLUMNS = ["epoch", "critic_loss", "actor_loss", "belief_loss", "eval_return_mean", "eval_return_std", "seed"]


@dataclass
class LearnerConfig:
    lam1: float = 0.1
    lam2: float = 0.1
    alpha: float = 2.5
    alpha1: float = 0.1
    alpha2: float = 0.1
    gamma: float = 0.99
    epsilon: float = 0.0  # constraint margin, provenance only
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    tau: float = 5e-3
    policy_freq: int = 2
    batch_size: int = 256
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    hidden: int = 256
    critic_w1_proxy: bool = False

    def __post_init__(self):
        for k in ("lam1", "lam2", "alpha", "alpha1", "alpha2", "epsilon", "policy_noise", "noise_clip"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be >= 0")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.policy_freq < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("frequencies and sizes must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class Critic(Module):
    def __init__(self, state_dim, action_dim, hidden, rng):
        self.q1 = MLP([state_dim + action_dim, hidden, hidden, 1], rng)
        self.q2 = MLP([state_dim + action_dim, hidden, hidden, 1], rng)

    def both(self, s, a):
        sa = ag.concat([_t(s), _t(a)], axis=1)
        return self.q1(sa), self.q2(sa)

    def first(self, s, a):
        return self.q1(ag.concat([_t(s), _t(a)], axis=1))


class Actor(Module):
    def __init__(self, in_dim, action_dim, hidden, rng):
        self.net = MLP([in_dim, hidden, hidden, action_dim], rng, out_activation="tanh")

    def __call__(self, s):
        return self.net(_t(s))

    def act(self, s) -> np.ndarray:
        with ag.no_grad():
            return self(np.atleast_2d(s)).data


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class DTCorlAgent:
    def __init__(self, state_dim: int, action_dim: int, cfg: LearnerConfig, seed: int = 0):
        self.cfg = cfg
        self.state_dim, self.action_dim = state_dim, action_dim
        init = np.random.default_rng(seed)
        self.actor = Actor(state_dim, action_dim, cfg.hidden, init)
        self.critic = Critic(state_dim, action_dim, cfg.hidden, init)
        self.actor_target = Actor(state_dim, action_dim, cfg.hidden, init)
        self.critic_target = Critic(state_dim, action_dim, cfg.hidden, init)
        self.actor_target.copy_from(self.actor)
        self.critic_target.copy_from(self.critic)
        self.actor_opt = ag.Adam(self.actor.parameters(), lr=cfg.actor_lr)
        self.critic_opt = ag.Adam(self.critic.parameters(), lr=cfg.critic_lr)
        self.rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        self.total_it = 0

    def policy(self):
        """Callable mapping one (belief-estimated) state vector to an action."""
        return lambda s: self.actor.act(s)[0]

    def modules(self) -> dict:
        return {"actor": self.actor, "critic": self.critic, "actor_target": self.actor_target,
                "critic_target": self.critic_target}


def _check_finite(val: float, what: str, step: int):
    if not np.isfinite(val):
        raise NonFiniteLoss(f"{what} is {val} at step {step}")


def belief_states(belief, batch, rng=None):
    """(s_hat, s_hat') for a learner batch; windows must be full."""
    if batch.mask.any() or batch.next_mask.any():
        raise ValueError("learner batches need full action windows")
    s = estimate_state(belief, batch.base, batch.window, batch.mask, rng)
    s2 = estimate_state(belief, batch.next_base, batch.next_window, batch.next_mask, rng)
    return s, s2


def td_target(agent: DTCorlAgent, s_next: np.ndarray, reward: np.ndarray, noise: np.ndarray,
              gamma: float | None = None) -> np.ndarray:
    """r + gamma * min(Q1', Q2')(s', clip(pi'(s') + clip(noise)))."""
    cfg = agent.cfg
    gamma = cfg.gamma if gamma is None else gamma
    with ag.no_grad():
        a2 = np.clip(agent.actor_target(s_next).data + np.clip(noise, -cfg.noise_clip, cfg.noise_clip), -1.0, 1.0)
        q1, q2 = agent.critic_target.both(s_next, a2)
        return np.asarray(reward, dtype=float)[:, None] + gamma * np.minimum(q1.data, q2.data)


def critic_update(agent: DTCorlAgent, belief, batch, noise: np.ndarray | None = None, sample_rng=None):
    """One TD step on both critics, then a soft update of the critic targets.

    Returns (td_loss, target) with the target as computed before the step.
    """
    cfg = agent.cfg
    s, s2 = belief_states(belief, batch, sample_rng)
    if noise is None:
        noise = cfg.policy_noise * agent.rng.standard_normal((len(s2), agent.action_dim))
    y = td_target(agent, s2, batch.reward, noise)
    if cfg.critic_w1_proxy and cfg.lam1 > 0:
        # action-space proxy for the W1 behaviour penalty at the current state
        with ag.no_grad():
            dev = np.sum((agent.actor_target(s).data - batch.action) ** 2, axis=1, keepdims=True)
        y = y - cfg.lam1 * dev
    agent.critic_opt.zero_grad()
    q1, q2 = agent.critic.both(s, batch.action)
    yt = Tensor(y)
    d1, d2 = q1 - yt, q2 - yt
    loss = (d1 * d1).mean() + (d2 * d2).mean()
    val = loss.item()
    _check_finite(val, "critic loss", agent.total_it)
    loss.backward()
    agent.critic_opt.step()
    soft_update(agent.critic_target, agent.critic, cfg.tau)
    return val, y


def actor_objective(agent: DTCorlAgent, s: np.ndarray, action: np.ndarray, alpha: float) -> Tensor:
    pi = agent.actor(s)
    q = agent.critic.first(s, pi)
    diff = pi - Tensor(action)
    bc = (diff * diff).sum(axis=1).mean()
    return -q.mean() + bc * alpha


def actor_gradient(agent: DTCorlAgent, s: np.ndarray, action: np.ndarray, alpha: float) -> np.ndarray:
    """Flattened actor-parameter gradient of the actor loss (no step taken)."""
    agent.actor.zero_grad()
    agent.critic.zero_grad()
    actor_objective(agent, s, action, alpha).backward()
    g = np.concatenate([p.grad.ravel() if p.grad is not None else np.zeros(p.data.size)
                        for p in agent.actor.parameters()])
    agent.actor.zero_grad()
    agent.critic.zero_grad()
    return g


def actor_update(agent: DTCorlAgent, belief, batch, sample_rng=None) -> float:
    s, _ = belief_states(belief, batch, sample_rng)
    agent.actor_opt.zero_grad()
    loss = actor_objective(agent, s, batch.action, agent.cfg.alpha)
    val = loss.item()
    _check_finite(val, "actor loss", agent.total_it)
    loss.backward()
    agent.critic.zero_grad()  # only the actor moves
    agent.actor_opt.step()
    soft_update(agent.actor_target, agent.actor, agent.cfg.tau)
    return val


def learner_step(agent: DTCorlAgent, belief, batch, sample_rng=None) -> tuple[float, float | None]:
    c, _ = critic_update(agent, belief, batch, sample_rng=sample_rng)
    a = None
    agent.total_it += 1
    if agent.total_it % agent.cfg.policy_freq == 0:
        a = actor_update(agent, belief, batch, sample_rng)
    return c, a


# ---------------------------------------------------------------------------
# Augmented-BC


def flatten_augmented(base, window, mask=None) -> np.ndarray:
    base = np.asarray(base, dtype=float)
    window = np.asarray(window, dtype=float)
    if window.ndim == 2:
        window = window[:, :, None]
    if mask is not None:
        window = np.where(np.asarray(mask, bool)[:, :, None], 0.0, window)
    return np.concatenate([base, window.reshape(len(base), -1)], axis=1)


class AugmentedBCAgent:
    def __init__(self, state_dim: int, action_dim: int, delay: int, cfg: LearnerConfig, seed: int = 0):
        self.cfg = cfg
        self.state_dim, self.action_dim, self.delay = state_dim, action_dim, delay
        init = np.random.default_rng(seed)
        self.actor = Actor(state_dim + delay * action_dim, action_dim, cfg.hidden, init)
        self.actor_opt = ag.Adam(self.actor.parameters(), lr=cfg.actor_lr)
        self.total_it = 0

    def policy(self):
        return lambda inp: self.actor.act(inp)[0]

    def modules(self) -> dict:
        return {"actor": self.actor}


def augmented_bc_train(agent: AugmentedBCAgent, batch) -> float:
    """One step of min ||a - pi(flatten(x))||^2."""
    x = flatten_augmented(batch.base, batch.window, batch.mask)
    agent.actor_opt.zero_grad()
    diff = agent.actor(x) - Tensor(batch.action)
    loss = (diff * diff).sum(axis=1).mean()
    val = loss.item()
    _check_finite(val, "bc loss", agent.total_it)
    loss.backward()
    agent.actor_opt.step()
    agent.total_it += 1
    return val


# ---------------------------------------------------------------------------
# training driver


@dataclass
class TrainResult:
    agent: object
    belief: object
    trace: list = field(default_factory=list)
    belief_pretrain_steps: int = 0


def _minibatch(arrays, rng, size):
    return arrays.take(rng.integers(0, len(arrays), size=min(size, len(arrays))))


def _belief_batch(arrays, rng, size, variable_length=False):
    b = _minibatch(arrays, rng, size)
    return truncate_windows(b, rng) if variable_length else b


def pretrain_belief(trainer: BeliefTrainer, arrays, batch_size: int, max_steps: int, rng,
                    window: int = 200, rel_tol: float = 0.01, variable_length: bool = False) -> tuple[int, float]:
    """Train until the windowed mean loss improves by less than ``rel_tol`` or ``max_steps``."""
    losses, prev = [], None
    for step in range(1, max_steps + 1):
        losses.append(belief_train_step(trainer, _belief_batch(arrays, rng, batch_size, variable_length)))
        if step % window == 0:
            cur = float(np.mean(losses[-window:]))
            if prev is not None and cur > (1.0 - rel_tol) * prev:
                return step, cur
            prev = cur
    return max_steps, float(np.mean(losses[-window:])) if losses else float("nan")


def train_dtcorl(dataset, state_dim: int, action_dim: int, delay: int, cfg: LearnerConfig, *, joint: bool = True,
                 n_steps: int = 1000, steps_per_epoch: int = 100, seed: int = 0, belief=None,
                 belief_cfg: BeliefConfig | None = None, belief_train: BeliefTrainConfig | None = None,
                 eval_fn=None, agent: DTCorlAgent | None = None, belief_trainer: BeliefTrainer | None = None,
                 start_epoch: int = 0, variable_length: bool = False) -> TrainResult:
    """Belief + actor-critic training on a delay-free trajectory dataset.

    joint=True: one belief step per learner step. joint=False: the belief is
    pretrained until its loss plateaus (capped at ``n_steps``) and then
    frozen. An injected ``belief`` (e.g. analytic) is never trained.
    ``eval_fn(agent, belief) -> (mean, std)`` runs at every epoch end.
    variable_length: belief batches use windows of the belief's own max delay,
    each row randomly cut to 1..max_delay real actions (the rest masked), so a
    single model serves every delay up to that bound.
    """
    if dataset is None or len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, start_epoch]))
    learn = dataset.to_arrays(delay).learner_only()
    if len(learn) == 0:
        raise ValueError("empty dataset")
    agent = agent or DTCorlAgent(state_dim, action_dim, cfg, seed)
    trainer = belief_trainer
    pre_steps = 0
    if belief is None and delay > 0:
        bcfg = belief_cfg or BeliefConfig(state_dim, action_dim, delay)
        if trainer is None:
            trainer = BeliefTrainer(build_belief(bcfg, seed), belief_train, seed)
        belief = trainer.model
        bdelay = trainer.model.cfg.max_delay if variable_length else delay
        barr = dataset.to_arrays(bdelay, include_boundary=True)
        bsize = trainer.cfg.batch_size
        if not joint:
            pre_steps, _ = pretrain_belief(trainer, barr, bsize, n_steps, rng, variable_length=variable_length)
    train_belief = trainer is not None and joint
    if trainer is not None:
        trainer.model.eval()
    trace = []
    n_epochs = max(1, n_steps // steps_per_epoch)
    for ep in range(n_epochs):
        cl, al, bl = [], [], []
        for _ in range(steps_per_epoch):
            if train_belief:
                bl.append(belief_train_step(trainer, _belief_batch(barr, rng, bsize, variable_length)))
                trainer.model.eval()
            c, a = learner_step(agent, belief, _minibatch(learn, rng, cfg.batch_size))
            cl.append(c)
            if a is not None:
                al.append(a)
        em, es = eval_fn(agent, belief) if eval_fn else (float("nan"), float("nan"))
        trace.append({"epoch": start_epoch + ep + 1, "critic_loss": float(np.mean(cl)),
                      "actor_loss": float(np.mean(al)) if al else float("nan"),
                      "belief_loss": float(np.mean(bl)) if bl else float("nan"),
                      "eval_return_mean": em, "eval_return_std": es, "seed": seed})
    out = TrainResult(agent, belief, trace, pre_steps)
    out.belief_trainer = trainer
    return out


def train_augmented_bc(dataset, state_dim: int, action_dim: int, delay: int, cfg: LearnerConfig, *,
                       n_steps: int = 1000, steps_per_epoch: int = 100, seed: int = 0, eval_fn=None,
                       agent: AugmentedBCAgent | None = None, start_epoch: int = 0) -> TrainResult:
    if dataset is None or len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    learn = dataset.to_arrays(delay).learner_only()
    agent = agent or AugmentedBCAgent(state_dim, action_dim, delay, cfg, seed)
    trace = []
    for ep in range(max(1, n_steps // steps_per_epoch)):
        al = [augmented_bc_train(agent, _minibatch(learn, rng, cfg.batch_size)) for _ in range(steps_per_epoch)]
        em, es = eval_fn(agent, None) if eval_fn else (float("nan"), float("nan"))
        trace.append({"epoch": start_epoch + ep + 1, "critic_loss": float("nan"), "actor_loss": float(np.mean(al)),
                      "belief_loss": float("nan"), "eval_return_mean": em, "eval_return_std": es, "seed": seed})
    return TrainResult(agent, None, trace)


# ---------------------------------------------------------------------------
# persistence


def write_trace_csv(path, trace) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in trace:
            w.writerow({k: row[k] for k in TRACE_COLUMNS})
    os.replace(tmp, path)


def read_trace_csv(path) -> list:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("epoch", "seed") else float(v)) for k, v in r.items()} for r in rows]


def save_agent(agent, path, extra: dict | None = None) -> None:
    kind = "augbc" if isinstance(agent, AugmentedBCAgent) else "dtcorl"
    meta = {"kind": kind, "state_dim": agent.state_dim, "action_dim": agent.action_dim,
            "learner": asdict(agent.cfg), "total_it": agent.total_it, **(extra or {})}
    if kind == "augbc":
        meta["delay"] = agent.delay
    arrays = {}
    for mname, mod in agent.modules().items():
        for k, v in mod.state_dict().items():
            arrays[f"{mname}.{k}"] = v
    opts = {"actor_opt": agent.actor_opt}
    if kind == "dtcorl":
        opts["critic_opt"] = agent.critic_opt
    for oname, opt in opts.items():
        st = opt.state_arrays()
        meta[f"{oname}.t"] = st["t"]
        for i, (m, v) in enumerate(zip(st["m"], st["v"])):
            arrays[f"{oname}.m.{i}"] = m
            arrays[f"{oname}.v.{i}"] = v
    if kind == "dtcorl":
        meta["rng"] = agent.rng.bit_generator.state
    checkpoint.save(path, POLICY_MAGIC, meta, arrays)


def load_agent(path, expected_cfg: LearnerConfig | None = None):
    meta, arrays = checkpoint.load(path, POLICY_MAGIC)
    cfg = LearnerConfig.from_dict(meta["learner"])
    if expected_cfg is not None and asdict(expected_cfg) != asdict(cfg):
        raise ValueError("checkpoint learner config does not match the requested config")
    if meta["kind"] == "augbc":
        agent = AugmentedBCAgent(meta["state_dim"], meta["action_dim"], meta["delay"], cfg)
        opts = {"actor_opt": agent.actor_opt}
    else:
        agent = DTCorlAgent(meta["state_dim"], meta["action_dim"], cfg)
        opts = {"actor_opt": agent.actor_opt, "critic_opt": agent.critic_opt}
        agent.rng.bit_generator.state = meta["rng"]
    for mname, mod in agent.modules().items():
        pre = f"{mname}."
        mod.load_state_dict({k[len(pre):]: v for k, v in arrays.items() if k.startswith(pre)})
    for oname, opt in opts.items():
        n = len(opt.params)
        opt.load_state_arrays({"t": meta[f"{oname}.t"], "m": [arrays[f"{oname}.m.{i}"] for i in range(n)],
                               "v": [arrays[f"{oname}.v.{i}"] for i in range(n)]})
    agent.total_it = int(meta["total_it"])
    return agent, meta
