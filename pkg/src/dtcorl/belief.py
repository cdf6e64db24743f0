"""Learned belief predictors: a causal transformer and an ensemble of one-step MLPs.

Inputs follow the augmented-array convention: ``base`` (B, ds) is the delayed
observation, ``window`` (B, D, da) the action window with real actions
left-aligned, and ``mask`` (B, D) True on slots that hold no action. Outputs
are the D intermediate states s_{t-D+1..t}; the point estimate for a window
with k real actions is output k (or ``base`` when k = 0).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import Tensor
from .nn import MLP, LayerNorm, Linear, Module, dropout, uniform_param

LOG_SCALE_MIN, LOG_SCALE_MAX = -5.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
BELIEF_MAGIC = b"DTCB"


class NonFiniteLoss(FloatingPointError):
    pass


def n_valid(mask: np.ndarray) -> np.ndarray:
    return (~np.asarray(mask, bool)).sum(axis=1)


def _check_inputs(base, window, mask, max_delay):
    base = np.asarray(base, dtype=np.float64)
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 2:
        window = window[:, :, None]
    B, D = window.shape[:2]
    mask = np.zeros((B, D), bool) if mask is None else np.asarray(mask, bool)
    if D > max_delay:
        raise ValueError(f"window length {D} exceeds configured max delay {max_delay}")
    if mask.shape != (B, D):
        raise ValueError(f"mask shape {mask.shape} does not match window {(B, D)}")
    # real actions must come first
    if D > 1 and np.any(mask[:, :-1] & ~mask[:, 1:]):
        raise ValueError("masked slots must trail the real actions")
    return base, window, mask


@dataclass
class BeliefConfig:
    state_dim: int
    action_dim: int
    max_delay: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_model
    dropout: float = 0.1
    mode: str = "mse"
    # ensemble-only
    n_members: int = 5
    hidden: int = 64
    kind: str = "transformer"

    def __post_init__(self):
        if self.mode not in ("mse", "mle"):
            raise ValueError(f"mode must be mse or mle, got {self.mode}")
        if self.kind not in ("transformer", "ensemble"):
            raise ValueError(f"unknown belief kind {self.kind}")
        if self.kind == "transformer" and self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_delay < 0 or self.n_members < 1:
            raise ValueError("invalid belief dimensions")

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model


class Attention(Module):
    def __init__(self, d: int, h: int, rng):
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.h = h

    def __call__(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        dh = d // self.h

        def heads(t):
            return t.reshape(B, T, self.h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = (q @ ag.swap_last(k)) * (1.0 / math.sqrt(dh))
        causal = np.tril(np.ones((T, T), bool))
        w = ag.softmax(scores, axis=-1, mask=causal)
        out = (w @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
        return self.o(out)


class Block(Module):
    def __init__(self, cfg: BeliefConfig, rng):
        d = cfg.d_model
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, cfg.n_heads, rng)
        self.ln2 = LayerNorm(d)
        self.ff = MLP([d, cfg.ff_width, d], rng, activation="gelu")
        self.p = cfg.dropout

    def __call__(self, x: Tensor, rng) -> Tensor:
        x = x + dropout(self.attn(self.ln1(x)), self.p, rng, self.training)
        return x + dropout(self.ff(self.ln2(x)), self.p, rng, self.training)


class TransformerBelief(Module):
    """Causal transformer over tokens [s, a_1, ..., a_D].

    The output at token j (j >= 1) predicts the state after a_1..a_j, added
    to the observed state as a residual.
    """

    def __init__(self, cfg: BeliefConfig, seed: int = 0):
        if cfg.kind != "transformer":
            raise ValueError("config kind must be transformer")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.state_embed = Linear(cfg.state_dim, d, rng)
        self.action_embed = Linear(cfg.action_dim, d, rng)
        self.pos = uniform_param(rng, (cfg.max_delay + 1, d), d)
        self.mask_token = uniform_param(rng, (d,), d)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d)
        out = cfg.state_dim * (2 if cfg.mode == "mle" else 1)
        self.head = Linear(d, out, rng)

    def raw(self, base, window, mask=None, rng=None) -> Tensor:
        """Head outputs at the D action positions, shape (B, D, out)."""
        base, window, mask = _check_inputs(base, window, mask, self.cfg.max_delay)
        B, D = mask.shape
        s_tok = self.state_embed(Tensor(base[:, None, :]))
        # zero masked content so nothing of it survives, then swap in the mask token
        clean = np.where(mask[:, :, None], 0.0, window)
        a_tok = ag.where(mask[:, :, None], self.mask_token, self.action_embed(Tensor(clean)))
        x = ag.concat([s_tok, a_tok], axis=1) + self.pos[: D + 1]
        x = dropout(x, self.cfg.dropout, rng, self.training)
        for blk in self.blocks:
            x = blk(x, rng)
        return self.head(self.ln_f(x))[:, 1:, :]

    def forward(self, base, window, mask=None, rng=None):
        """Returns (means (B, D, ds), log_scales or None) as Tensors."""
        out = self.raw(base, window, mask, rng)
        ds = self.cfg.state_dim
        base_t = Tensor(np.asarray(base, dtype=np.float64)[:, None, :])
        if self.cfg.mode == "mse":
            return out + base_t, None
        return out[:, :, :ds] + base_t, ag.clip(out[:, :, ds:], LOG_SCALE_MIN, LOG_SCALE_MAX)


class EnsembleBelief(Module):
    """M one-step residual MLPs s' = s + f_m(s, a), each rolled out over the window.

    The prediction is the mean of the member rollouts. Masked slots hold the
    running state fixed.
    """

    def __init__(self, cfg: BeliefConfig, seed: int = 0):
        if cfg.kind != "ensemble":
            raise ValueError("config kind must be ensemble")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        sizes = [cfg.state_dim + cfg.action_dim, cfg.hidden, cfg.hidden, cfg.state_dim]
        self.members = [MLP(sizes, rng, activation="gelu") for _ in range(cfg.n_members)]

    def member_rollout(self, m: int, base, window, mask) -> Tensor:
        net = self.members[m]
        s = Tensor(base)
        preds = []
        for j in range(window.shape[1]):
            nxt = s + net(ag.concat([s, Tensor(window[:, j])], axis=1))
            s = ag.where(mask[:, j:j + 1], s, nxt)
            preds.append(s)
        if not preds:
            return Tensor(np.zeros((base.shape[0], 0, base.shape[1])))
        return ag.stack(preds, axis=1)

    def forward(self, base, window, mask=None, rng=None):
        base, window, mask = _check_inputs(base, window, mask, self.cfg.max_delay)
        outs = [self.member_rollout(m, base, window, mask) for m in range(self.cfg.n_members)]
        mean = outs[0]
        for o in outs[1:]:
            mean = mean + o
        return mean * (1.0 / len(outs)), None

    def one_step_loss(self, base, window, mask, labels, member_idx=None) -> Tensor:
        """Teacher-forced one-step MSE, averaged over members.

        ``member_idx`` optionally gives each member its own row subset (bootstrap).
        """
        base, window, mask = _check_inputs(base, window, mask, self.cfg.max_delay)
        labels = np.asarray(labels, dtype=np.float64)
        B, D = mask.shape
        if B == 0 or D == 0:
            raise ValueError("empty batch")
        prev = np.concatenate([base[:, None, :], labels[:, :-1, :]], axis=1)  # (B, D, ds)
        valid = ~mask
        total = None
        for m, net in enumerate(self.members):
            rows = np.arange(B) if member_idx is None else member_idx[m]
            v = valid[rows]
            x = np.concatenate([prev[rows], window[rows]], axis=2)[v]
            y = labels[rows][v]
            pred = Tensor(x[:, : self.cfg.state_dim]) + net(Tensor(x))
            diff = pred - Tensor(y)
            term = (diff * diff).mean()
            total = term if total is None else total + term
        return total * (1.0 / self.cfg.n_members)


def build_belief(cfg: BeliefConfig, seed: int = 0):
    return TransformerBelief(cfg, seed) if cfg.kind == "transformer" else EnsembleBelief(cfg, seed)


# ---------------------------------------------------------------------------
# forward / loss / training


def belief_forward(model, base, window, mask=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Inference: predictions (B, D, ds) and log-scales (mle) as arrays, no dropout."""
    was = model.training
    model.eval()
    try:
        with ag.no_grad():
            mean, logs = model.forward(base, window, mask)
    finally:
        model.train(was)
    return mean.data, (None if logs is None else logs.data)


def point_estimate(model, base, window, mask=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Belief estimate of the current state: output k for k real actions, ``base`` when k = 0.

    In mle mode with ``rng`` given, draws one Gaussian sample per row.
    """
    base = np.asarray(base, dtype=np.float64)
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 2:
        window = window[:, :, None]
    mask = np.zeros(window.shape[:2], bool) if mask is None else np.asarray(mask, bool)
    k = n_valid(mask)
    if window.shape[1] == 0 or not k.any():
        return base.copy()
    mean, logs = belief_forward(model, base, window, mask)
    rows = np.arange(len(base))
    idx = np.maximum(k - 1, 0)
    est = mean[rows, idx]
    if logs is not None and rng is not None:
        est = est + np.exp(logs[rows, idx]) * rng.standard_normal(est.shape)
    return np.where((k > 0)[:, None], est, base)


def sequence_loss(mean: Tensor, log_scale, labels, mask, mode: str) -> Tensor:
    labels = np.asarray(labels, dtype=np.float64)
    valid = ~np.asarray(mask, bool)
    n = int(valid.sum()) * labels.shape[-1]
    if n == 0:
        raise ValueError("empty batch")
    w = Tensor(valid[:, :, None].astype(np.float64))
    diff = mean - Tensor(labels)
    if mode == "mse":
        return (diff * diff * w).sum() * (1.0 / n)
    z = diff * ag.exp(-log_scale)
    nll = z * z * 0.5 + log_scale + HALF_LOG_2PI
    return (nll * w).sum() * (1.0 / n)


def belief_loss(model, batch, rng=None, member_idx=None) -> Tensor:
    """Training loss on a batch with fields base, window, mask, labels.

    Transformer: sequence MSE / Gaussian NLL over unmasked positions.
    Ensemble: one-step teacher-forced MSE per member.
    """
    if len(batch.base) == 0:
        raise ValueError("empty batch")
    if isinstance(model, EnsembleBelief):
        return model.one_step_loss(batch.base, batch.window, batch.mask, batch.labels, member_idx)
    mean, logs = model.forward(batch.base, batch.window, batch.mask, rng)
    return sequence_loss(mean, logs, batch.labels, batch.mask, model.cfg.mode)


@dataclass
class BeliefTrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 256
    clip_norm: float = 1.0


class BeliefTrainer:
    """Optimizer state plus the seeded stream used for dropout and bootstraps."""

    def __init__(self, model, cfg: BeliefTrainConfig | None = None, seed: int = 0):
        self.model = model
        self.cfg = cfg or BeliefTrainConfig()
        self.opt = ag.Adam(model.parameters(), lr=self.cfg.lr, betas=(self.cfg.beta1, self.cfg.beta2),
                           weight_decay=self.cfg.weight_decay)
        self.rng = np.random.default_rng(seed)
        self.steps = 0


def belief_train_step(trainer: BeliefTrainer, batch) -> float:
    model = trainer.model
    model.train()
    member_idx = None
    if isinstance(model, EnsembleBelief) and model.cfg.n_members > 1:
        n = len(batch.base)
        member_idx = [trainer.rng.integers(0, n, size=n) for _ in range(model.cfg.n_members)]
    trainer.opt.zero_grad()
    loss = belief_loss(model, batch, trainer.rng, member_idx)
    val = loss.item()
    if not np.isfinite(val):
        raise NonFiniteLoss(f"belief loss is {val} at step {trainer.steps}")
    loss.backward()
    ag.clip_grad_norm(trainer.opt.params, trainer.cfg.clip_norm)
    trainer.opt.step()
    trainer.steps += 1
    for p in trainer.opt.params:
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteLoss(f"non-finite parameter after step {trainer.steps}")
    return val


# ensemble_* names mirror the transformer ops
ensemble_forward = belief_forward
ensemble_train_step = belief_train_step


# ---------------------------------------------------------------------------
# finite-difference verification


def gradient_check(model, batch, n_params_sampled: int = 100, seed: int = 0, step: float = 1e-5,
                   loss_fn=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``n_params_sampled`` scalar parameters uniformly over all entries.
    Relative error is |a - n| / max(|a|, |n|), and pairs where both sides
    are below 1e-8 in absolute value count as exact agreement.
    """
    fn = loss_fn or (lambda: belief_loss(model, batch))
    was = model.training
    model.eval()
    try:
        params = model.parameters()
        model.zero_grad()
        fn().backward()
        sizes = np.array([p.data.size for p in params])
        rng = np.random.default_rng(seed)
        flat = rng.choice(int(sizes.sum()), size=min(n_params_sampled, int(sizes.sum())), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        worst = 0.0
        with ag.no_grad():
            for f in flat:
                pi = int(np.searchsorted(offsets, f, side="right") - 1)
                p = params[pi]
                idx = np.unravel_index(int(f - offsets[pi]), p.shape)
                a = 0.0 if p.grad is None else float(p.grad[idx])
                orig = p.data[idx]
                p.data[idx] = orig + step
                up = fn().item()
                p.data[idx] = orig - step
                dn = fn().item()
                p.data[idx] = orig
                num = (up - dn) / (2 * step)
                scale = max(abs(a), abs(num))
                if scale < 1e-8:
                    continue
                worst = max(worst, abs(a - num) / scale)
        model.zero_grad()
        return worst
    finally:
        model.train(was)


# ---------------------------------------------------------------------------
# persistence


def save_belief(model, path) -> None:
    checkpoint.save(path, BELIEF_MAGIC, asdict(model.cfg), model.state_dict())


def load_belief(path, expected: BeliefConfig | None = None):
    cfg_doc, arrays = checkpoint.load(path, BELIEF_MAGIC)
    cfg = BeliefConfig(**cfg_doc)
    if expected is not None and asdict(expected) != cfg_doc:
        raise ValueError("checkpoint config does not match the requested belief config")
    model = build_belief(cfg)
    model.load_state_dict(arrays)
    return model


class AnalyticBelief:
    """Exact belief for a deterministic step function (a perfect predictor)."""

    def __init__(self, step_fn):
        self.step_fn = step_fn

    def predict(self, base, window, mask=None):
        base = np.asarray(base, dtype=np.float64)
        window = np.asarray(window, dtype=np.float64)
        if window.ndim == 2:
            window = window[:, :, None]
        mask = np.zeros(window.shape[:2], bool) if mask is None else np.asarray(mask, bool)
        s = base.copy()
        out = np.zeros(window.shape[:2] + (base.shape[1],))
        for j in range(window.shape[1]):
            nxt = np.stack([self.step_fn(si, ai) for si, ai in zip(s, window[:, j])])
            s = np.where(mask[:, j:j + 1], s, nxt)
            out[:, j] = s
        return out


def estimate_state(belief, base, window, mask=None, rng=None) -> np.ndarray:
    """Point estimate from any belief (learned model, analytic, or None for the raw base)."""
    base = np.asarray(base, dtype=np.float64)
    if belief is None:
        return base.copy()
    if isinstance(belief, AnalyticBelief):
        window = np.asarray(window, dtype=np.float64)
        if window.ndim == 2:
            window = window[:, :, None]
        mask = np.zeros(window.shape[:2], bool) if mask is None else np.asarray(mask, bool)
        k = n_valid(mask)
        if window.shape[1] == 0:
            return base.copy()
        seq = belief.predict(base, window, mask)
        est = seq[np.arange(len(base)), np.maximum(k - 1, 0)]
        return np.where((k > 0)[:, None], est, base)
    return point_estimate(belief, base, window, mask, rng)
