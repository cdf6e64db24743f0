"""Finite MDPs, exact delay-free solvers and Lipschitz-constant estimation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .wasserstein import (
    discrete_metric,
    index_metric,
    pairwise_w1,
    validate_metric,
    wasserstein1,
)

DEFAULT_TOL = 1e-10


class ConvergenceError(RuntimeError):
    pass


def _metric_by_name(name: str, n: int) -> np.ndarray:
    if name == "index":
        return index_metric(n)
    if name == "discrete":
        return discrete_metric(n)
    raise ValueError(f"unknown metric {name!r}; expected 'index' or 'discrete'")


@dataclass
class TabularMdp:
    """Finite MDP with dense kernels.

    ``transition[s, a]`` is the next-state distribution and ``reward[s, a]``
    the immediate reward. Metrics on states and actions default to the index
    metric |i - j|.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    horizon: int = 100
    rho0: np.ndarray | None = None
    state_metric: np.ndarray | None = None
    action_metric: np.ndarray | None = None
    metric: str = "index"
    check_metrics: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.reward = np.asarray(self.reward, dtype=float)
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {self.transition.shape}")
        S, A = self.transition.shape[:2]
        if S < 1 or A < 1:
            raise ValueError("need at least one state and one action")
        if self.reward.shape != (S, A):
            raise ValueError(f"reward must have shape {(S, A)}, got {self.reward.shape}")
        if np.any(self.transition < 0):
            raise ValueError("transition probabilities must be nonnegative")
        if np.max(np.abs(self.transition.sum(-1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.rho0 is None:
            self.rho0 = np.full(S, 1.0 / S)
        self.rho0 = np.asarray(self.rho0, dtype=float)
        if self.rho0.shape != (S,) or np.any(self.rho0 < 0) or abs(self.rho0.sum() - 1.0) > 1e-12:
            raise ValueError("rho0 must be a probability vector over states")
        if self.state_metric is None:
            self.state_metric = _metric_by_name(self.metric, S)
        if self.action_metric is None:
            self.action_metric = _metric_by_name(self.metric, A)
        self.state_metric = np.asarray(self.state_metric, dtype=float)
        self.action_metric = np.asarray(self.action_metric, dtype=float)
        if self.state_metric.shape != (S, S) or self.action_metric.shape != (A, A):
            raise ValueError("metric shapes do not match the state/action counts")
        if self.check_metrics:
            validate_metric(self.state_metric)
            validate_metric(self.action_metric)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def is_deterministic(self) -> bool:
        return bool(np.all((self.transition == 0) | (self.transition == 1)))

    def to_dict(self) -> dict:
        out = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "gamma": self.gamma,
            "horizon": self.horizon,
            "rho0": self.rho0.tolist(),
            "metric": self.metric,
        }
        if self.metric not in ("index", "discrete"):
            out["state_metric"] = self.state_metric.tolist()
            out["action_metric"] = self.action_metric.tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        mdp = cls(
            transition=np.array(doc["transition"], dtype=float),
            reward=np.array(doc["reward"], dtype=float),
            gamma=float(doc["gamma"]),
            horizon=int(doc["horizon"]),
            rho0=np.array(doc["rho0"], dtype=float),
            state_metric=np.array(doc["state_metric"]) if "state_metric" in doc else None,
            action_metric=np.array(doc["action_metric"]) if "action_metric" in doc else None,
            metric=doc.get("metric", "index"),
        )
        if mdp.n_states != doc["n_states"] or mdp.n_actions != doc["n_actions"]:
            raise ValueError("declared sizes disagree with the kernel shape")
        return mdp

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


@dataclass
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if self.probs.ndim != 2:
            raise ValueError("policy table must be 2-D (states x actions)")
        if np.any(self.probs < 0) or np.max(np.abs(self.probs.sum(1) - 1.0)) > 1e-12:
            raise ValueError("policy rows must be probability vectors")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((len(actions), n_actions))
        probs[np.arange(len(actions)), actions] = 1.0
        return cls(probs)

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: np.random.Generator) -> "TabularPolicy":
        """Rows drawn from Dirichlet(1)."""
        return cls(rng.dirichlet(np.ones(n_actions), size=n_states))

    def greedy_actions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


@dataclass
class ValueTables:
    q: np.ndarray
    v: np.ndarray
    residual: float = 0.0


@dataclass
class LipschitzEstimates:
    L_P: float
    L_R: float
    L_pi: float
    L_Q: float
    contraction_ok: bool
    # exhaustive maximum for the given table; finite even without contraction
    L_Q_observed: float = 0.0


def _iteration_cap(gamma: float, tol: float) -> int:
    return int(math.ceil(math.log(tol * (1.0 - gamma)) / math.log(gamma))) + 64


def bellman_backup(mdp: TabularMdp, policy_probs: np.ndarray, q: np.ndarray) -> np.ndarray:
    v = np.sum(policy_probs * q, axis=1)
    return mdp.reward + mdp.gamma * mdp.transition @ v


def exact_policy_evaluation(mdp: TabularMdp, policy: TabularPolicy, tol: float = DEFAULT_TOL) -> ValueTables:
    """Q^pi by a direct linear solve, polished with Bellman sweeps if needed."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    pi = policy.probs
    S, A = mdp.n_states, mdp.n_actions
    if pi.shape != (S, A):
        raise ValueError(f"policy shape {pi.shape} does not match mdp {(S, A)}")
    # Q = r + gamma * P Pi Q over the flattened (s, a) index
    p_sa = mdp.transition.reshape(S * A, S)
    pi_mat = np.zeros((S, S * A))
    for s in range(S):
        pi_mat[s, s * A:(s + 1) * A] = pi[s]
    system = np.eye(S * A) - mdp.gamma * p_sa @ pi_mat
    q = np.linalg.solve(system, mdp.reward.ravel()).reshape(S, A)
    residual = float(np.max(np.abs(q - bellman_backup(mdp, pi, q))))
    cap = _iteration_cap(mdp.gamma, tol)
    it = 0
    while residual > tol:
        if it >= cap:
            raise ConvergenceError(
                f"policy evaluation residual {residual:.3e} > tol after {cap} sweeps; check gamma"
            )
        q = bellman_backup(mdp, pi, q)
        residual = float(np.max(np.abs(q - bellman_backup(mdp, pi, q))))
        it += 1
    return ValueTables(q=q, v=np.sum(pi * q, axis=1), residual=residual)


def value_iteration(mdp: TabularMdp, policy: TabularPolicy | None = None, n_iters: int = 10_000) -> np.ndarray:
    """Plain fixed-count Bellman sweeps from zero (used as an oracle)."""
    q = np.zeros_like(mdp.reward)
    for _ in range(n_iters):
        if policy is None:
            v = q.max(axis=1)
        else:
            v = np.sum(policy.probs * q, axis=1)
        q = mdp.reward + mdp.gamma * mdp.transition @ v
    return q


def greedy_rows(q: np.ndarray, incumbent: np.ndarray | None = None, tol: float = 0.0) -> np.ndarray:
    """Deterministic greedy actions; lowest id wins ties, incumbent kept unless beaten by > tol."""
    best = np.argmax(q, axis=1)
    if incumbent is not None:
        rows = np.arange(q.shape[0])
        keep = q[rows, best] <= q[rows, incumbent] + tol
        best = np.where(keep, incumbent, best)
    return best


def exact_policy_iteration(mdp: TabularMdp, tol: float = DEFAULT_TOL, max_iters: int = 1000):
    """Howard policy iteration from the all-zeros deterministic policy."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    actions = np.zeros(mdp.n_states, dtype=int)
    for _ in range(max_iters):
        policy = TabularPolicy.deterministic(actions, mdp.n_actions)
        values = exact_policy_evaluation(mdp, policy, tol)
        new_actions = greedy_rows(values.q, incumbent=actions, tol=tol)
        if np.array_equal(new_actions, actions):
            return policy, values
        actions = new_actions
    raise ConvergenceError("policy iteration did not stabilise")


def estimate_lipschitz_constants(mdp: TabularMdp, policy: TabularPolicy, q) -> LipschitzEstimates:
    """Exhaustive pairwise maxima of the Lipschitz ratios.

    Pairs whose denominator is zero are skipped.
    """
    S, A = mdp.n_states, mdp.n_actions
    if S > 64 or A > 64:
        raise ValueError("exhaustive Lipschitz estimation limited to 64 states/actions")
    qtab = q.q if isinstance(q, ValueTables) else np.asarray(q, dtype=float)
    denom = mdp.state_metric[:, None, :, None] + mdp.action_metric[None, :, None, :]
    denom = denom.reshape(S * A, S * A)
    valid = denom > 0

    rows = mdp.transition.reshape(S * A, S)
    w_rows = pairwise_w1(rows, mdp.state_metric)
    r = mdp.reward.ravel()
    dr = np.abs(r[:, None] - r[None, :])
    qf = qtab.ravel()
    dq = np.abs(qf[:, None] - qf[None, :])

    def _ratio_max(num, den, mask):
        if not np.any(mask):
            return 0.0
        return float(np.max(num[mask] / den[mask]))

    L_P = _ratio_max(w_rows, denom, valid)
    L_R = _ratio_max(dr, denom, valid)
    L_Qobs = _ratio_max(dq, denom, valid)
    w_pi = pairwise_w1(policy.probs, mdp.action_metric)
    L_pi = _ratio_max(w_pi, mdp.state_metric, mdp.state_metric > 0)
    ok = mdp.gamma * L_P * (1.0 + L_pi) < 1.0
    return LipschitzEstimates(
        L_P=L_P, L_R=L_R, L_pi=L_pi,
        L_Q=L_Qobs if ok else math.inf,
        contraction_ok=bool(ok),
        L_Q_observed=L_Qobs,
    )


def lipschitz_violations(mdp: TabularMdp, policy: TabularPolicy, q, est: LipschitzEstimates, slack: float = 1e-12):
    """Enumerate every pair and return those breaking the defining inequalities."""
    S, A = mdp.n_states, mdp.n_actions
    qtab = q.q if isinstance(q, ValueTables) else np.asarray(q)
    bad = []
    for s1 in range(S):
        for a1 in range(A):
            for s2 in range(S):
                for a2 in range(A):
                    den = mdp.state_metric[s1, s2] + mdp.action_metric[a1, a2]
                    if den <= 0:
                        continue
                    w = wasserstein1(mdp.transition[s1, a1], mdp.transition[s2, a2], mdp.state_metric)
                    if w > est.L_P * den + slack:
                        bad.append(("P", s1, a1, s2, a2))
                    if abs(mdp.reward[s1, a1] - mdp.reward[s2, a2]) > est.L_R * den + slack:
                        bad.append(("R", s1, a1, s2, a2))
                    if abs(qtab[s1, a1] - qtab[s2, a2]) > est.L_Q_observed * den + slack:
                        bad.append(("Q", s1, a1, s2, a2))
    for s1 in range(S):
        for s2 in range(S):
            den = mdp.state_metric[s1, s2]
            if den <= 0:
                continue
            w = wasserstein1(policy.probs[s1], policy.probs[s2], mdp.action_metric)
            if w > est.L_pi * den + slack:
                bad.append(("pi", s1, s2))
    return bad


# ---------------------------------------------------------------------------
# instance families

def two_state_chain(p_flip: float = 1.0, gamma: float = 0.9, horizon: int = 100) -> TabularMdp:
    """Action 0 stays, action 1 flips with probability ``p_flip``; r(s1, .) = 1."""
    T = np.zeros((2, 2, 2))
    T[0, 0, 0] = T[1, 0, 1] = 1.0
    T[0, 1, 1] = T[1, 1, 0] = p_flip
    T[0, 1, 0] = T[1, 1, 1] = 1.0 - p_flip
    R = np.array([[0.0, 0.0], [1.0, 1.0]])
    return TabularMdp(T, R, gamma=gamma, horizon=horizon, rho0=np.array([1.0, 0.0]))


def cyclic_chain(n_states: int, p_advance: float = 0.8, gamma: float = 0.9, horizon: int = 100) -> TabularMdp:
    """Action 0 stays; action 1 advances s -> s+1 (mod n) with probability ``p_advance``.

    With two states this is the stochastic flip chain. Reward 1 in the last state.
    """
    n = n_states
    T = np.zeros((n, 2, n))
    for s in range(n):
        T[s, 0, s] = 1.0
        T[s, 1, (s + 1) % n] += p_advance
        T[s, 1, s] += 1.0 - p_advance
    R = np.zeros((n, 2))
    R[n - 1, :] = 1.0
    rho0 = np.zeros(n)
    rho0[0] = 1.0
    return TabularMdp(T, R, gamma=gamma, horizon=horizon, rho0=rho0)


def random_tabular_mdp(n_states: int, n_actions: int, rng: np.random.Generator, gamma: float = 0.9,
                       deterministic: bool = False, metric: str = "index", horizon: int = 100) -> TabularMdp:
    if deterministic:
        nxt = rng.integers(n_states, size=(n_states, n_actions))
        T = np.zeros((n_states, n_actions, n_states))
        T[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], nxt] = 1.0
    else:
        T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
        T /= T.sum(-1, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    rho0 = rng.dirichlet(np.ones(n_states))
    rho0 /= rho0.sum()
    return TabularMdp(T, R, gamma=gamma, horizon=horizon, rho0=rho0, metric=metric)
