"""Exact 1-Wasserstein distance between discrete distributions."""
from __future__ import annotations

import contextlib

import numpy as np
from scipy.optimize import linprog

MAX_SUPPORT = 64

# test hook for fault injection; multiplies every returned distance
_fault_sign = 1.0


@contextlib.contextmanager
def inject_sign_flip():
    """Flip the sign of every W1 value while active (verification sanity checks)."""
    global _fault_sign
    _fault_sign = -1.0
    try:
        yield
    finally:
        _fault_sign = 1.0


def fault_sign() -> float:
    return _fault_sign


def index_metric(n: int) -> np.ndarray:
    idx = np.arange(n, dtype=float)
    return np.abs(idx[:, None] - idx[None, :])


def discrete_metric(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


def validate_metric(d: np.ndarray, atol: float = 1e-12) -> None:
    """Raise ValueError unless ``d`` is a (pseudo)metric on its index set.

    Checks zero diagonal, symmetry, nonnegativity and, exhaustively, the
    triangle inequality.
    """
    d = np.asarray(d, dtype=float)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"metric must be square, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("metric has non-finite entries")
    if np.any(np.abs(np.diag(d)) > atol):
        raise ValueError("metric diagonal must be zero")
    if np.any(d < -atol):
        raise ValueError("metric must be nonnegative")
    if np.max(np.abs(d - d.T), initial=0.0) > atol:
        raise ValueError("metric must be symmetric")
    n = d.shape[0]
    for k in range(n):
        # d[i,j] <= d[i,k] + d[k,j] for all i, j
        if np.any(d > d[:, k:k + 1] + d[k:k + 1, :] + atol):
            raise ValueError("metric violates the triangle inequality")


def _cheap_metric_check(d: np.ndarray, n: int) -> None:
    if d.shape != (n, n):
        raise ValueError(f"metric shape {d.shape} does not match support size {n}")
    if np.any(np.abs(np.diag(d)) > 1e-12) or np.any(d < 0) or np.max(np.abs(d - d.T)) > 1e-12:
        raise ValueError("invalid metric")


def is_index_metric(d: np.ndarray) -> bool:
    n = d.shape[0]
    return bool(np.array_equal(d, index_metric(n)))


def is_discrete_metric(d: np.ndarray) -> bool:
    n = d.shape[0]
    return bool(np.array_equal(d, discrete_metric(n)))


def w1_cdf(p: np.ndarray, q: np.ndarray) -> float:
    """W1 on the integer line with unit spacing: sum |F_p - F_q|."""
    return float(np.sum(np.abs(np.cumsum(p - q)[:-1])))


def w1_cdf_batch(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise CDF formula for many ``p`` against one or many ``q``."""
    diff = np.cumsum(np.asarray(P) - np.asarray(q), axis=-1)[..., :-1]
    return np.sum(np.abs(diff), axis=-1) * _fault_sign


def w1_lp(p: np.ndarray, q: np.ndarray, metric: np.ndarray) -> float:
    """Optimal-transport cost by a dual-simplex LP restricted to the supports."""
    sp = np.flatnonzero(p > 0)
    sq = np.flatnonzero(q > 0)
    if len(sp) > MAX_SUPPORT or len(sq) > MAX_SUPPORT:
        raise ValueError(f"support exceeds {MAX_SUPPORT} atoms; exact solve refused")
    if len(sp) == 1:
        return float(metric[sp[0], sq] @ q[sq])
    if len(sq) == 1:
        return float(metric[sp, sq[0]] @ p[sp])
    m, k = len(sp), len(sq)
    cost = metric[np.ix_(sp, sq)].ravel()
    a_eq = np.zeros((m + k, m * k))
    for i in range(m):
        a_eq[i, i * k:(i + 1) * k] = 1.0
    for j in range(k):
        a_eq[m + j, j::k] = 1.0
    b_eq = np.concatenate([p[sp], q[sq]])
    # one marginal constraint is redundant; dropping it keeps the basis well posed
    res = linprog(cost, A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def wasserstein1(p, q, metric) -> float:
    """Exact W1 between probability vectors ``p`` and ``q`` under ``metric``.

    Uses the CDF formula for the 1D index metric, total variation for the
    0/1 metric, and an exact transport LP otherwise.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    metric = np.asarray(metric, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("inputs must sum to 1")
    if np.any(p < -1e-12) or np.any(q < -1e-12):
        raise ValueError("inputs must be nonnegative")
    _cheap_metric_check(metric, len(p))
    p = np.clip(p, 0.0, None)
    q = np.clip(q, 0.0, None)
    if is_index_metric(metric):
        out = w1_cdf(p, q)
    elif is_discrete_metric(metric):
        out = 0.5 * float(np.abs(p - q).sum())
    else:
        out = w1_lp(p, q, metric)
    return out * _fault_sign


def wasserstein1_lp(p, q, metric) -> float:
    """Always use the LP route (cross-check for the closed forms)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    metric = np.asarray(metric, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    _cheap_metric_check(metric, len(p))
    return w1_lp(np.clip(p, 0, None), np.clip(q, 0, None), metric) * _fault_sign


def pairwise_w1(rows: np.ndarray, metric: np.ndarray) -> np.ndarray:
    """Matrix of W1 distances between all pairs of distribution rows."""
    rows = np.asarray(rows, dtype=float)
    n = rows.shape[0]
    if is_index_metric(metric):
        return w1_cdf_batch(rows[:, None, :], rows[None, :, :])
    if is_discrete_metric(metric):
        return 0.5 * np.abs(rows[:, None, :] - rows[None, :, :]).sum(-1) * _fault_sign
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = wasserstein1(rows[i], rows[j], metric)
    return out
