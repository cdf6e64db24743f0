"""Numerical checks of the delayed performance/Q-difference bounds.

All quantities are computed exactly on enumerated augmented MDPs. Value
functions on the shorter-delay space are evaluated under the shorter-delay
policy; Lipschitz constants are exhaustive maxima on that space.
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .delayed import belief_matrix, build_augmented_mdp, n_augmented_states, sub_belief_matrix
from .mdp import (TabularMdp, TabularPolicy, estimate_lipschitz_constants, exact_policy_evaluation,
                  random_tabular_mdp)
from .tabular import check_monotone_improvement, w1_rows
from .wasserstein import inject_sign_flip, wasserstein1

HOLD_TOL = 1e-8


@dataclass
class BoundReport:
    """Two sides of one inequality (or identity) on one instance.

    ``lhs``/``rhs`` are averages over reachable augmented states; the per-x
    arrays carry the pointwise version and ``worst_slack`` its minimum.
    """

    instance: str
    lemma: str
    lhs: float
    rhs: float
    per_x_lhs: np.ndarray = field(default=None, repr=False)
    per_x_rhs: np.ndarray = field(default=None, repr=False)
    identity: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        if self.identity:
            return -abs(self.rhs - self.lhs)
        return self.rhs - self.lhs

    @property
    def holds(self) -> bool:
        return self.slack >= -HOLD_TOL

    @property
    def worst_slack(self) -> float:
        if self.per_x_lhs is None:
            return self.slack
        diff = self.per_x_rhs - self.per_x_lhs
        if self.identity:
            return float(-np.max(np.abs(diff)))
        return float(np.min(diff))

    @property
    def holds_per_x(self) -> bool:
        return self.worst_slack >= -HOLD_TOL

    def worst_x(self) -> int:
        diff = self.per_x_rhs - self.per_x_lhs
        return int(np.argmax(np.abs(diff))) if self.identity else int(np.argmin(diff))


def instance_hash(mdp: TabularMdp, *extra) -> str:
    h = hashlib.sha1(mdp.to_json().encode())
    for e in extra:
        h.update(repr(e).encode())
    return h.hexdigest()[:12]


def reachable_states(aug: TabularMdp) -> np.ndarray:
    """Augmented states reachable from the initial distribution under any actions."""
    adj = aug.transition.sum(axis=1) > 0
    seen = aug.rho0 > 0
    frontier = seen.copy()
    while frontier.any():
        nxt = adj[frontier].any(axis=0) & ~seen
        seen |= nxt
        frontier = nxt
    return np.flatnonzero(seen)


def _short_space(mdp: TabularMdp, delay: int, short_delay: int, short_policy: TabularPolicy):
    if not 0 <= short_delay < delay:
        raise ValueError("need 0 <= short delay < delay")
    aug_s = build_augmented_mdp(mdp, short_delay)
    vt_s = exact_policy_evaluation(aug_s, short_policy)
    lq = estimate_lipschitz_constants(aug_s, short_policy, vt_s).L_Q_observed
    sub = sub_belief_matrix(mdp, delay, short_delay)
    return aug_s, vt_s, lq, sub


def verify_performance_difference_bound(mdp: TabularMdp, delay: int, short_delay: int,
                                        short_policy: TabularPolicy, policy: TabularPolicy) -> BoundReport:
    """E_{x^~b, a~pi}[V_short(x^) - Q_short(x^, a)] <= L_Q E_{x^~b} W1(pi_short(x^), pi(x))."""
    aug_s, vt_s, lq, sub = _short_space(mdp, delay, short_delay, short_policy)
    aug = build_augmented_mdp(mdp, delay)
    gap = vt_s.v[:, None] - vt_s.q  # (X_short, A)
    lhs = np.einsum("xy,xa,ya->x", sub, policy.probs, gap)
    w = w1_rows(policy.probs, short_policy.probs, mdp.action_metric)  # (X, X_short)
    rhs = lq * np.sum(sub * w, axis=1)
    reach = reachable_states(aug)
    return BoundReport(
        instance_hash(mdp, delay, short_delay), "performance_difference_bound",
        float(lhs[reach].mean()), float(rhs[reach].mean()), lhs[reach], rhs[reach],
        meta={"L_Q": lq, "delay": delay, "short_delay": short_delay, "reachable": reach},
    )


def verify_qvalue_difference_bound(mdp: TabularMdp, delay: int, short_delay: int,
                                   short_policy: TabularPolicy, policy: TabularPolicy) -> BoundReport:
    """E_{a~pi, x^~b}[Q_short(x^, a) - Q(x, a)] <= gamma L_Q / (1 - gamma) E W1(pi_short(x^), pi(x))."""
    aug_s, vt_s, lq, sub = _short_space(mdp, delay, short_delay, short_policy)
    aug = build_augmented_mdp(mdp, delay)
    vt = exact_policy_evaluation(aug, policy)
    q_short_at_x = sub @ vt_s.q  # (X, A)
    lhs = np.sum(policy.probs * (q_short_at_x - vt.q), axis=1)
    c = mdp.gamma * lq / (1.0 - mdp.gamma)
    w = w1_rows(policy.probs, short_policy.probs, mdp.action_metric)
    rhs = c * np.sum(sub * w, axis=1)
    reach = reachable_states(aug)
    return BoundReport(
        instance_hash(mdp, delay, short_delay), "qvalue_difference_bound",
        float(lhs[reach].mean()), float(rhs[reach].mean()), lhs[reach], rhs[reach],
        meta={"L_Q": lq, "c": c, "delay": delay, "short_delay": short_delay, "reachable": reach},
    )


def verify_qvalue_difference_occupancy_bound(mdp: TabularMdp, delay: int, short_delay: int,
                                             short_policy: TabularPolicy, policy: TabularPolicy) -> BoundReport:
    """Q-difference bound with the W1 term taken along the future of x.

    Same lhs as :func:`verify_qvalue_difference_bound`; the rhs averages the
    per-state W1 gap over x' ~ P_delta(.|x, a), a ~ pi(x), followed by the
    normalised discounted occupancy of pi started at x'. This form follows from
    the general performance-difference identity and holds pointwise.
    """
    aug_s, vt_s, lq, sub = _short_space(mdp, delay, short_delay, short_policy)
    aug = build_augmented_mdp(mdp, delay)
    vt = exact_policy_evaluation(aug, policy)
    lhs = np.sum(policy.probs * (sub @ vt_s.q - vt.q), axis=1)
    w = np.sum(sub * w1_rows(policy.probs, short_policy.probs, mdp.action_metric), axis=1)
    p_pi = np.einsum("xa,xay->xy", policy.probs, aug.transition)
    X = len(w)
    occ_w = (1.0 - mdp.gamma) * np.linalg.solve(np.eye(X) - mdp.gamma * p_pi, w)
    c = mdp.gamma * lq / (1.0 - mdp.gamma)
    rhs = c * (p_pi @ occ_w)
    reach = reachable_states(aug)
    return BoundReport(
        instance_hash(mdp, delay, short_delay), "qvalue_difference_occupancy_bound",
        float(lhs[reach].mean()), float(rhs[reach].mean()), lhs[reach], rhs[reach],
        meta={"L_Q": lq, "c": c, "delay": delay, "short_delay": short_delay, "reachable": reach},
    )


def _pd_terms(mdp: TabularMdp, delay: int, behavior_delta: TabularPolicy, policy: TabularPolicy):
    vt = exact_policy_evaluation(mdp, policy)
    B = belief_matrix(mdp, delay)
    # g(x) = E_{s~b(x), a~mu(x)}[V(s) - Q(s, a)]
    g = np.einsum("xs,xa,sa->x", B, behavior_delta.probs, vt.v[:, None] - vt.q)
    aug = build_augmented_mdp(mdp, delay)
    p_mu = np.einsum("xa,xay->xy", behavior_delta.probs, aug.transition)
    return vt, B, g, aug, p_mu


def verify_general_performance_difference(mdp: TabularMdp, delay: int, behavior_delta: TabularPolicy,
                                          policy: TabularPolicy) -> BoundReport:
    """I(x) = E_{s~b(x)} V(s) - V_delta,mu(x) against (1/(1-gamma)) E_{x'~d_x}[...].

    d_x is the normalised discounted occupancy of the behaviour chain started
    at x. Checked as an identity.
    """
    vt, B, g, aug, p_mu = _pd_terms(mdp, delay, behavior_delta, policy)
    v_beh = exact_policy_evaluation(aug, behavior_delta).v
    lhs = B @ vt.v - v_beh
    X = len(g)
    occ = (1.0 - mdp.gamma) * np.linalg.solve(np.eye(X) - mdp.gamma * p_mu, np.eye(X))  # rows: d_x
    rhs = occ @ g / (1.0 - mdp.gamma)
    reach = reachable_states(aug)
    return BoundReport(
        instance_hash(mdp, delay, "general"), "general_performance_difference",
        float(lhs[reach].mean()), float(rhs[reach].mean()), lhs[reach], rhs[reach], identity=True,
        meta={"delay": delay, "reachable": reach},
    )


def general_pd_truncated_rollout(mdp: TabularMdp, delay: int, behavior_delta: TabularPolicy,
                                 policy: TabularPolicy, n_steps: int = 10_000):
    """Unrolled sum_t gamma^t E[V(s_t) - Q(s_t, a_t)] by forward propagation.

    Returns (values per x, tail bound gamma^T * max|g| / (1 - gamma)).
    """
    _, _, g, _, p_mu = _pd_terms(mdp, delay, behavior_delta, policy)
    X = len(g)
    dist = np.eye(X)
    total = np.zeros(X)
    disc = 1.0
    for _ in range(n_steps):
        total += disc * (dist @ g)
        dist = dist @ p_mu
        disc *= mdp.gamma
        if disc < 1e-300:
            break
    tail = disc * np.max(np.abs(g)) / (1.0 - mdp.gamma)
    return total, tail


def verify_bpe_derivation_inequalities(mdp: TabularMdp, delay: int, policy: TabularPolicy,
                                       policy_delta: TabularPolicy, behavior_delta: TabularPolicy,
                                       n_triples: int, rng: np.random.Generator) -> list:
    """Kantorovich-Rubinstein step and W1 triangle composition on sampled triples.

    KR: |E_{a1~mu, a2~nu}[Q(s, a1) - Q(s, a2)]| <= L_Q W1(mu, nu).
    Triangle: W1(pi(s), mu_delta(x)) <= W1(pi(s), pi_delta(x)) + W1(pi_delta(x), mu_delta(x)).
    """
    vt = exact_policy_evaluation(mdp, policy)
    lq = estimate_lipschitz_constants(mdp, policy, vt).L_Q_observed
    B = belief_matrix(mdp, delay)
    S, A = mdp.n_states, mdp.n_actions
    d_a = mdp.action_metric
    tag = instance_hash(mdp, delay, "derivation")
    out = []
    for _ in range(n_triples):
        x = int(rng.integers(len(B)))
        s = int(rng.choice(S, p=B[x]))
        if rng.random() < 0.5:
            mu, nu = policy.probs[s], policy_delta.probs[x]
        else:
            mu, nu = rng.dirichlet(np.ones(A)), rng.dirichlet(np.ones(A))
        lhs = abs(float(mu @ vt.q[s] - nu @ vt.q[s]))
        out.append(BoundReport(tag, "kr_lipschitz_q", lhs, lq * wasserstein1(mu, nu, d_a), meta={"s": s, "x": x}))
        p, m, r = policy.probs[s], policy_delta.probs[x], behavior_delta.probs[x]
        out.append(BoundReport(
            tag, "w1_triangle", wasserstein1(p, r, d_a),
            wasserstein1(p, m, d_a) + wasserstein1(m, r, d_a), meta={"s": s, "x": x},
        ))
    return out


REPORT_COLUMNS = ["instance", "lemma", "lhs", "rhs", "slack", "holds", "worst_slack", "holds_per_x"]


def write_reports_csv(path, reports) -> None:
    """Averaged sides, slack and verdict, plus the pointwise worst case."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([r.instance, r.lemma, repr(r.lhs), repr(r.rhs), repr(r.slack), int(r.holds),
                        repr(r.worst_slack), int(r.holds_per_x)])


def summarize(reports) -> str:
    n = len(reports)
    bad = sum(not r.holds for r in reports)
    bad_x = sum(not r.holds_per_x for r in reports)
    worst = min((r.worst_slack for r in reports), default=float("nan"))
    return f"{n} reports, {bad} averaged violations, {bad_x} per-x violations, worst per-x slack {worst:.3e}"


# ---------------------------------------------------------------------------
# suites


@contextlib.contextmanager
def injected_fault(kind: str = "none"):
    """Deliberately corrupt the checks; ``sign_flip`` negates every W1 distance."""
    if kind == "none":
        yield
    elif kind == "sign_flip":
        with inject_sign_flip():
            yield
    else:
        raise ValueError(f"unknown fault {kind!r}")


def run_lemma_suite(n_mdps: int = 20, delay_pairs=((0, 1), (0, 2), (1, 2)), n_policy_pairs: int = 10,
                    n_states: int = 3, n_actions: int = 2, n_triples: int = 50, seed: int = 0,
                    fault: str = "none") -> list:
    """Every bound and identity on seeded random MDPs and random policy pairs."""
    if n_mdps < 1 or not delay_pairs or n_policy_pairs < 1:
        raise ValueError("nothing to verify: empty instance family")
    out = []
    with injected_fault(fault):
        for i in range(n_mdps):
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            mdp = random_tabular_mdp(n_states, n_actions, rng)
            for short, delay in delay_pairs:
                xs, x = n_augmented_states(n_states, n_actions, short), n_augmented_states(n_states, n_actions, delay)
                for _ in range(n_policy_pairs):
                    ps = TabularPolicy.random(xs, n_actions, rng)
                    p = TabularPolicy.random(x, n_actions, rng)
                    out.append(verify_performance_difference_bound(mdp, delay, short, ps, p))
                    out.append(verify_qvalue_difference_bound(mdp, delay, short, ps, p))
                    out.append(verify_qvalue_difference_occupancy_bound(mdp, delay, short, ps, p))
                beh = TabularPolicy.random(x, n_actions, rng)
                pol = TabularPolicy.random(n_states, n_actions, rng)
                ident = verify_general_performance_difference(mdp, delay, beh, pol)
                out.append(ident)
                roll, tail = general_pd_truncated_rollout(mdp, delay, beh, pol)
                reach = ident.meta.get("reachable", reachable_states(build_augmented_mdp(mdp, delay)))
                out.append(BoundReport(ident.instance, "general_performance_difference_rollout",
                                       ident.lhs, float(roll[reach].mean()), ident.per_x_lhs, roll[reach],
                                       identity=True, meta={"delay": delay, "tail": tail}))
                pd = TabularPolicy.random(x, n_actions, rng)
                out.extend(verify_bpe_derivation_inequalities(mdp, delay, pol, pd, beh, n_triples, rng))
    return out


def run_monotone_suite(n_mdps: int = 20, delays=(1, 2), n_iters: int = 10, n_states: int = 4, n_actions: int = 3,
                       lam: float = 0.1, seed: int = 0) -> list:
    """(instance, delay, MonotoneReport) for BPE/BPI on seeded random MDPs."""
    if n_mdps < 1 or not delays:
        raise ValueError("nothing to verify: empty instance family")
    out = []
    for i in range(n_mdps):
        mdp = random_tabular_mdp(n_states, n_actions, np.random.default_rng(np.random.SeedSequence([seed, 1, i])))
        for d in delays:
            out.append((instance_hash(mdp, d, "monotone"), d, check_monotone_improvement(mdp, d, lam, lam, n_iters)))
    return out
