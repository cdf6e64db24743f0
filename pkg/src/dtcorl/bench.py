"""Transformer vs ensemble belief comparison on a stochastic cyclic chain embedded in 1D.

State i of an n-state cycle is embedded as i / n; action 0 (stay) as -1 and
action 1 (advance w.p. p) as +1. Both models get the same number of
gradient steps on the same minibatches.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .belief import BeliefConfig, BeliefTrainConfig, BeliefTrainer, belief_forward, belief_train_step, build_belief
from .delayed import AugmentedArrays, augment_arrays, truncate_windows
from .mdp import cyclic_chain


@dataclass
class BenchResult:
    mse: dict  # kind -> (D,) per-step test MSE
    latency_ms: dict  # kind -> median ms per single-window call
    n_params: dict
    train_loss: dict


def chain_dataset(n_states: int, p_advance: float, horizon: int, n_traj: int, delay: int, seed: int):
    mdp = cyclic_chain(n_states, p_advance)
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(n_traj):
        s = int(rng.integers(n_states))
        states, acts = [s], []
        for _ in range(horizon):
            a = int(rng.integers(2))
            s = int(rng.choice(n_states, p=mdp.transition[s, a]))
            states.append(s)
            acts.append(a)
        st = (np.array(states, dtype=float) / n_states)[:, None]
        ac = (2.0 * np.array(acts, dtype=float) - 1.0)[:, None]
        parts.append(augment_arrays(st, ac, np.zeros(horizon), delay))
    return AugmentedArrays.concat(parts)


def _latency_ms(model, base, window, mask, n_calls: int) -> float:
    belief_forward(model, base, window, mask)  # warm
    times = []
    for _ in range(n_calls):
        t0 = time.perf_counter()
        belief_forward(model, base, window, mask)
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times))


def run_belief_bench(bc, seed: int = 0, delay: int = 16) -> BenchResult:
    """``bc`` is a config section with the bench fields (see config.BenchSection)."""
    train = chain_dataset(bc.n_states, bc.p_advance, bc.horizon + delay, bc.n_trajectories, delay, seed)
    test = chain_dataset(bc.n_states, bc.p_advance, bc.horizon + delay, max(1, bc.n_test // bc.horizon), delay,
                         seed + 10_000)
    models = {
        "transformer": build_belief(BeliefConfig(1, 1, delay, d_model=bc.d_model, n_layers=bc.n_layers,
                                                 n_heads=bc.n_heads, dropout=0.0), seed),
        "ensemble": build_belief(BeliefConfig(1, 1, delay, kind="ensemble", n_members=bc.n_members,
                                              hidden=bc.hidden), seed),
    }
    tcfg = BeliefTrainConfig(lr=bc.lr, weight_decay=0.0, batch_size=bc.batch_size)
    trainers = {k: BeliefTrainer(m, tcfg, seed) for k, m in models.items()}
    rng = np.random.default_rng(np.random.SeedSequence([seed, 16]))
    losses = {k: [] for k in models}
    for _ in range(bc.n_steps):
        batch = truncate_windows(train.take(rng.integers(0, len(train), size=bc.batch_size)), rng)
        for k, tr in trainers.items():
            losses[k].append(belief_train_step(tr, batch))
    mse, lat, npar = {}, {}, {}
    one = test.take(np.arange(1))
    for k, m in models.items():
        pred, _ = belief_forward(m, test.base, test.window, test.mask)
        mse[k] = np.mean((pred - test.labels) ** 2, axis=(0, 2))
        lat[k] = _latency_ms(m, one.base, one.window, one.mask, bc.latency_calls)
        npar[k] = m.n_parameters()
    tail = max(1, bc.n_steps // 10)
    return BenchResult(mse, lat, npar, {k: float(np.mean(v[-tail:])) for k, v in losses.items()})


def write_bench_csvs(result: BenchResult, mse_path, latency_path) -> None:
    kinds = sorted(result.mse)
    D = len(result.mse[kinds[0]])
    with open(mse_path, "w") as fh:
        fh.write("step," + ",".join(f"{k}_mse" for k in kinds) + "\n")
        for j in range(D):
            fh.write(f"{j + 1}," + ",".join(repr(float(result.mse[k][j])) for k in kinds) + "\n")
    with open(latency_path, "w") as fh:
        fh.write("model,n_parameters,latency_ms\n")
        for k in kinds:
            fh.write(f"{k},{result.n_params[k]},{result.latency_ms[k]:.4f}\n")

