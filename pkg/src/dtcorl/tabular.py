"""Exact belief-based policy evaluation / improvement on tabular delayed MDPs.

Evaluation regresses Q at belief samples: for every augmented state x with
data weight w(x) and every state s in the support of b(.|x), the target is
r(s, a) + gamma * E[V(s')] - lam1 * W1(pi(.|s), mu_delta(.|x)). The exact
minimiser is the fixed point of a per-state penalised Bellman equation whose
penalty is the belief-weighted average

    g_s(p) = sum_x omega(x|s) W1(p, mu_delta(.|x)),
    omega(x|s) = w(x) b(s|x) / sum_x' w(x') b(s|x').

Improvement maximises E_p Q(s, .) - lam2 * g_s(p) state by state, which is
exactly the improvement objective once the expectation over x is split per
belief state.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy.optimize import linprog

from .delayed import (
    augmented_index,
    belief_matrix,
    build_augmented_mdp,
)
from .mdp import DEFAULT_TOL, TabularMdp, TabularPolicy, ValueTables, exact_policy_evaluation
from .wasserstein import fault_sign, is_discrete_metric, is_index_metric, w1_cdf_batch, wasserstein1

GRID_RESOLUTION = 64
TIE_TOL = 1e-12


class CoverageError(ValueError):
    """Belief supports leave some states without any evaluation sample."""

    def __init__(self, uncovered):
        self.uncovered = list(uncovered)
        super().__init__(f"belief supports do not cover states {self.uncovered}")


@dataclass
class BeliefContext:
    """Everything the belief-based iteration needs about the data.

    ``beliefs[i]`` is b(.|x_i), ``weights[i]`` the data weight of x_i and
    ``mu_delta[i]`` the lifted behaviour row at x_i.
    """

    mdp: TabularMdp
    delay: int
    beliefs: np.ndarray
    weights: np.ndarray
    mu_delta: np.ndarray
    x_index: np.ndarray = field(default=None)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.x_index is None:
            self.x_index = np.arange(len(self.weights))

    @property
    def occupancy(self) -> np.ndarray:
        """nu(s) = sum_x w(x) b(s|x)."""
        return self.weights @ self.beliefs

    def supported_states(self) -> np.ndarray:
        return np.flatnonzero(self.occupancy > 0)

    def omega(self) -> np.ndarray:
        """omega[s, i] = w(x_i) b(s|x_i) / nu(s); rows of uncovered states are zero."""
        joint = (self.weights[:, None] * self.beliefs).T
        nu = joint.sum(1, keepdims=True)
        return np.divide(joint, nu, out=np.zeros_like(joint), where=nu > 0)

    @classmethod
    def enumerate(cls, mdp: TabularMdp, delay: int, behavior: TabularPolicy,
                  weights: np.ndarray | None = None) -> "BeliefContext":
        """All augmented states, behaviour lifted pointwise: mu_delta(a|x) = sum_s b(s|x) mu(a|s)."""
        B = belief_matrix(mdp, delay)
        X = len(B)
        w = np.full(X, 1.0 / X) if weights is None else np.asarray(weights, dtype=float)
        return cls(mdp, delay, B, w, B @ behavior.probs)

    @classmethod
    def from_dataset(cls, mdp: TabularMdp, delay: int, tuples, smoothing: float = 1e-6) -> "BeliefContext":
        """Empirical x-frequencies and smoothed conditional action frequencies."""
        A = mdp.n_actions
        counts = {}
        for t in tuples:
            if t.boundary:
                continue
            idx = augmented_index(t.x, A)
            row = counts.setdefault(idx, np.zeros(A))
            row[int(t.a)] += 1.0
        if not counts:
            raise ValueError("empty dataset")
        idx = np.array(sorted(counts))
        n = np.array([counts[i] for i in idx])
        mu = (n + smoothing) / (n.sum(1, keepdims=True) + smoothing * A)
        w = n.sum(1) / n.sum()
        B = belief_matrix(mdp, delay)[idx]
        return cls(mdp, delay, B, w, mu, x_index=idx)


def w1_rows(P: np.ndarray, Q: np.ndarray, metric: np.ndarray) -> np.ndarray:
    """W1 between every row of ``P`` (n, A) and every row of ``Q`` (m, A) -> (n, m)."""
    if is_index_metric(metric):
        return w1_cdf_batch(P[:, None, :], Q[None, :, :])
    if is_discrete_metric(metric):
        return 0.5 * np.abs(P[:, None, :] - Q[None, :, :]).sum(-1) * fault_sign()
    out = np.empty((len(P), len(Q)))
    for i, p in enumerate(P):
        for j, q in enumerate(Q):
            out[i, j] = wasserstein1(p, q, metric)
    return out


def state_penalties(ctx: BeliefContext, policy_rows: np.ndarray) -> np.ndarray:
    """g_s(pi(.|s)) for every state."""
    W = w1_rows(policy_rows, ctx.mu_delta, ctx.mdp.action_metric)  # (S, X)
    return np.sum(ctx.omega() * W, axis=1)


def tabular_bpe(ctx: BeliefContext, policy: TabularPolicy, lam1: float, tol: float = DEFAULT_TOL) -> ValueTables:
    """Belief-based policy evaluation with the critic-side W1 penalty."""
    nu = ctx.occupancy
    uncovered = np.flatnonzero(nu <= 0)
    if len(uncovered):
        raise CoverageError(uncovered)
    pen = state_penalties(ctx, policy.probs) if lam1 > 0 else np.zeros(ctx.mdp.n_states)
    mdp = ctx.mdp
    shaped = TabularMdp(mdp.transition, mdp.reward - lam1 * pen[:, None], gamma=mdp.gamma,
                        horizon=mdp.horizon, rho0=mdp.rho0, state_metric=mdp.state_metric,
                        action_metric=mdp.action_metric, metric=mdp.metric, check_metrics=False)
    vt = exact_policy_evaluation(shaped, policy, tol)
    return vt


def bpe_sample_residual(ctx: BeliefContext, policy: TabularPolicy, q: np.ndarray, lam1: float) -> float:
    """Max residual of the sample-level regression targets, computed by brute force.

    Averages, for each x and action, the squared-error stationarity condition
    over belief samples s and successor states s'. Independent of the linear
    solve in :func:`tabular_bpe`.
    """
    mdp = ctx.mdp
    S, A = mdp.n_states, mdp.n_actions
    v = np.sum(policy.probs * q, axis=1)
    num = np.zeros((S, A))
    den = np.zeros((S, A))
    for i in range(len(ctx.weights)):
        for s in range(S):
            wb = ctx.weights[i] * ctx.beliefs[i, s]
            if wb <= 0:
                continue
            pen = wasserstein1(policy.probs[s], ctx.mu_delta[i], mdp.action_metric)
            for a in range(A):
                target = mdp.reward[s, a] + mdp.gamma * mdp.transition[s, a] @ v - lam1 * pen
                num[s, a] += wb * (q[s, a] - target)
                den[s, a] += wb
    return float(np.max(np.abs(num / den)))


@lru_cache(maxsize=16)
def simplex_grid(n_actions: int, resolution: int = GRID_RESOLUTION) -> np.ndarray:
    """All points of the simplex with coordinates in multiples of 1/resolution.

    Ordered lexicographically descending, so mass on lower action ids comes first.
    """
    pts = []
    # stars and bars over n_actions - 1 bars
    for bars in combinations(range(resolution + n_actions - 1), n_actions - 1):
        prev = -1
        counts = []
        for b in bars:
            counts.append(b - prev - 1)
            prev = b
        counts.append(resolution + n_actions - 2 - prev)
        pts.append(counts)
    grid = np.array(pts, dtype=float) / resolution
    order = np.lexsort(tuple(-grid[:, k] for k in reversed(range(n_actions))))
    out = grid[order]
    out.setflags(write=False)
    return out


def _penalised_objective(points: np.ndarray, q_row: np.ndarray, omega_row: np.ndarray, mu_rows: np.ndarray,
                         metric: np.ndarray, lam2: float) -> np.ndarray:
    obj = points @ q_row
    if lam2 > 0:
        keep = omega_row > 0
        obj = obj - lam2 * w1_rows(points, mu_rows[keep], metric) @ omega_row[keep]
    return obj


def _lp_improve(q_row, omega_row, mu_rows, lam2):
    """Exact maximiser of p.q - lam2 * sum_x omega_x TV(p, mu_x) (0/1 action metric)."""
    keep = np.flatnonzero(omega_row > 0)
    A = len(q_row)
    k = len(keep)
    # variables: p (A), t (k*A) with t >= |p - mu_x|
    n = A + k * A
    c = np.concatenate([-q_row, np.repeat(lam2 * 0.5 * omega_row[keep], A)])
    rows, rhs = [], []
    for j, x in enumerate(keep):
        for a in range(A):
            r1 = np.zeros(n)
            r1[a] = 1.0
            r1[A + j * A + a] = -1.0
            rows.append(r1)
            rhs.append(mu_rows[x, a])
            r2 = np.zeros(n)
            r2[a] = -1.0
            r2[A + j * A + a] = -1.0
            rows.append(r2)
            rhs.append(-mu_rows[x, a])
    a_eq = np.zeros((1, n))
    a_eq[0, :A] = 1.0
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), A_eq=a_eq, b_eq=[1.0],
                  bounds=(0, None), method="highs-ds")
    if res.status != 0:
        raise RuntimeError(f"improvement LP failed: {res.message}")
    p = np.clip(res.x[:A], 0, None)
    return p / p.sum()


def tabular_bpi(q: np.ndarray, ctx: BeliefContext, lam2: float, incumbent: TabularPolicy | None = None,
                resolution: int = GRID_RESOLUTION) -> TabularPolicy:
    """Per-state maximiser of E_p Q(s, .) - lam2 * g_s(p) over the simplex.

    Index metrics are solved on the 1/resolution grid (first maximiser in
    lower-action-first order); the 0/1 metric by LP. A given incumbent row is
    kept unless beaten by more than a roundoff margin.
    """
    q = np.asarray(q.q if isinstance(q, ValueTables) else q, dtype=float)
    S, A = q.shape
    supported = ctx.supported_states()
    if len(supported) == 0:
        raise ValueError("empty belief support")
    metric = ctx.mdp.action_metric
    omega = ctx.omega()
    out = incumbent.probs.copy() if incumbent is not None else np.full((S, A), 1.0 / A)
    use_lp = lam2 > 0 and is_discrete_metric(metric)
    grid = None if use_lp else simplex_grid(A, resolution)
    for s in supported:
        if use_lp:
            cand = _lp_improve(q[s], omega[s], ctx.mu_delta, lam2)
            best_val = _penalised_objective(cand[None], q[s], omega[s], ctx.mu_delta, metric, lam2)[0]
        else:
            vals = _penalised_objective(grid, q[s], omega[s], ctx.mu_delta, metric, lam2)
            top = vals.max()
            i = int(np.flatnonzero(vals >= top - TIE_TOL)[0])
            cand, best_val = grid[i], vals[i]
        if incumbent is not None:
            inc_val = _penalised_objective(incumbent.probs[s][None], q[s], omega[s], ctx.mu_delta, metric, lam2)[0]
            if best_val <= inc_val + TIE_TOL:
                continue
        out[s] = cand
    return TabularPolicy(out)


@dataclass
class MonotoneReport:
    trace: np.ndarray  # (n_iters + 1, S): E_{a~pi_k} Q^{pi_k}(s, a)
    policies: list
    violations: list  # (iteration, state, drop)
    supported: np.ndarray

    @property
    def ok(self) -> bool:
        return not self.violations


def check_monotone_improvement(mdp: TabularMdp, delay: int, lam1: float, lam2: float, n_iters: int,
                               behavior: TabularPolicy | None = None, ctx: BeliefContext | None = None,
                               init_policy: TabularPolicy | None = None, slack: float = 1e-8,
                               resolution: int = GRID_RESOLUTION) -> MonotoneReport:
    """Alternate evaluation and improvement, recording expected Q per state.

    A violation is any supported state whose expected Q drops by more than
    ``slack`` between consecutive iterations.
    """
    if ctx is None:
        if behavior is None:
            behavior = TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
        ctx = BeliefContext.enumerate(mdp, delay, behavior)
    pi = init_policy if init_policy is not None else (
        behavior if behavior is not None else TabularPolicy.uniform(mdp.n_states, mdp.n_actions)
    )
    supported = ctx.supported_states()
    vt = tabular_bpe(ctx, pi, lam1)
    trace = [vt.v.copy()]
    policies = [pi]
    violations = []
    for k in range(1, n_iters + 1):
        pi = tabular_bpi(vt.q, ctx, lam2, incumbent=pi, resolution=resolution)
        vt = tabular_bpe(ctx, pi, lam1)
        trace.append(vt.v.copy())
        policies.append(pi)
        drop = trace[-2] - trace[-1]
        for s in supported:
            if drop[s] > slack:
                violations.append((k, int(s), float(drop[s])))
    return MonotoneReport(np.array(trace), policies, violations, supported)


def augmented_brac_iteration(mdp: TabularMdp, delay: int, behavior: TabularPolicy, alpha1: float, alpha2: float,
                             n_iters: int, resolution: int = GRID_RESOLUTION):
    """Penalised policy iteration directly on the enumerated augmented MDP.

    This is the augmented-space form that the belief-based iteration is derived
    from; ``alpha1``/``alpha2`` weight the critic- and actor-side W1 penalties.
    Returns the augmented policy and its value tables.
    """
    aug = build_augmented_mdp(mdp, delay)
    X = aug.n_states
    lifted = TabularPolicy(belief_matrix(mdp, delay) @ behavior.probs)
    ctx = BeliefContext(aug, 0, np.eye(X), np.full(X, 1.0 / X), lifted.probs)
    pi = lifted
    vt = tabular_bpe(ctx, pi, alpha1)
    for _ in range(n_iters):
        pi = tabular_bpi(vt.q, ctx, alpha2, incumbent=pi, resolution=resolution)
        vt = tabular_bpe(ctx, pi, alpha1)
    return pi, vt


def lift_policy(mdp: TabularMdp, delay: int, policy: TabularPolicy) -> TabularPolicy:
    """pi_delta(a|x) = sum_s b(s|x) pi(a|s) over enumerated augmented states."""
    return TabularPolicy(belief_matrix(mdp, delay) @ policy.probs)
