import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtcorl.wasserstein import (discrete_metric, index_metric, inject_sign_flip, pairwise_w1, validate_metric,
                                w1_cdf, w1_lp, wasserstein1)


def _dist(n):
    return st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3).map(
        lambda v: np.asarray(v) / np.sum(v))


@st.composite
def triples(draw):
    n = draw(st.integers(1, 8))
    return n, draw(_dist(n)), draw(_dist(n)), draw(_dist(n))


def _brute_force_two_atoms(p, q, d):
    # plans on 2x2 are parameterised by the mass t moved 0 -> 0
    best = np.inf
    for t in np.linspace(0, 1, 100_001):
        plan = np.array([[t, p[0] - t], [q[0] - t, p[1] - q[0] + t]])
        if np.all(plan >= -1e-12):
            best = min(best, float(np.sum(plan * d)))
    return best


class TestKnownValues:
    def test_identical(self):
        p = np.array([0.2, 0.3, 0.5])
        assert wasserstein1(p, p, index_metric(3)) == 0.0

    def test_point_masses(self):
        assert wasserstein1(np.array([1.0, 0.0]), np.array([0.0, 1.0]), index_metric(2)) == pytest.approx(1.0)

    def test_half_mass_moves(self):
        p, q = np.array([0.5, 0.5]), np.array([0.0, 1.0])
        got = wasserstein1(p, q, index_metric(2))
        assert got == pytest.approx(0.5, abs=1e-12)
        assert got == pytest.approx(_brute_force_two_atoms(p, q, index_metric(2)), abs=1e-5)

    def test_discrete_metric_is_total_variation(self):
        p, q = np.array([0.6, 0.4, 0.0]), np.array([0.1, 0.1, 0.8])
        assert wasserstein1(p, q, discrete_metric(3)) == pytest.approx(0.8)

    def test_custom_metric_goes_through_lp(self):
        d = np.array([[0, 2, 3], [2, 0, 1], [3, 1, 0]], dtype=float)
        p, q = np.array([1.0, 0, 0]), np.array([0, 0.5, 0.5])
        assert wasserstein1(p, q, d) == pytest.approx(2.5)


class TestErrors:
    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            wasserstein1(np.ones(2) / 2, np.ones(3) / 3, index_metric(3))

    def test_invalid_metric(self):
        bad = np.array([[0.0, 1.0], [2.0, 0.0]])
        with pytest.raises(ValueError):
            wasserstein1(np.array([1.0, 0]), np.array([0, 1.0]), bad)

    def test_triangle_violation_detected(self):
        d = np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0]], dtype=float)
        with pytest.raises(ValueError, match="triangle"):
            validate_metric(d)

    def test_support_limit(self):
        n = 65
        p = np.ones(n) / n
        d = index_metric(n) ** 0.5  # not the index metric, forces the LP route
        with pytest.raises(ValueError):
            wasserstein1(p, p, d)


@settings(max_examples=1000, deadline=None)
@given(triples())
def test_metric_axioms(t):
    n, p, q, r = t
    d = index_metric(n)
    pq, qp = wasserstein1(p, q, d), wasserstein1(q, p, d)
    assert pq >= -1e-12
    assert abs(pq - qp) < 1e-9
    assert wasserstein1(p, p, d) == pytest.approx(0.0, abs=1e-12)
    assert pq <= wasserstein1(p, r, d) + wasserstein1(r, q, d) + 1e-9


@settings(max_examples=200, deadline=None)
@given(triples())
def test_cdf_formula_matches_lp(t):
    n, p, q, _ = t
    assert abs(w1_cdf(p, q) - w1_lp(p, q, index_metric(n))) < 1e-9


def test_pairwise_matches_scalar():
    rng = np.random.default_rng(0)
    rows = rng.dirichlet(np.ones(4), size=5)
    for d in (index_metric(4), discrete_metric(4)):
        W = pairwise_w1(rows, d)
        for i, j in itertools.product(range(5), repeat=2):
            assert W[i, j] == pytest.approx(wasserstein1(rows[i], rows[j], d), abs=1e-12)


def test_sign_flip_hook_is_scoped():
    p, q = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    with inject_sign_flip():
        assert wasserstein1(p, q, index_metric(2)) == pytest.approx(-1.0)
    assert wasserstein1(p, q, index_metric(2)) == pytest.approx(1.0)
