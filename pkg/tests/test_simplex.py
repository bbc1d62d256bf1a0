import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madpoison import simplex
from madpoison.simplex import Budget


def posteriors(min_k=2, max_k=8):
    return st.integers(min_k, max_k).flatmap(
        lambda k: st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).dirichlet(np.ones(k) * 0.5)))


def test_extremes():
    assert [list(v) for v in simplex.extremes(2)] == [[1, 0], [0, 1]]
    ten = list(simplex.extremes(10))
    assert len(ten) == 10 and all(simplex.is_posterior(v) for v in ten)
    np.testing.assert_array_equal(np.stack(ten), np.eye(10))
    with pytest.raises(ValueError):
        list(simplex.extremes(1))


def test_extremes_argmax():
    got = np.stack(list(simplex.extremes_argmax(3, 0)))
    np.testing.assert_array_equal(got, [[1, 0, 0], [.5, .5, 0], [.5, 0, .5]])
    np.testing.assert_array_equal(np.stack(list(simplex.extremes_argmax(2, 1))), [[0, 1], [.5, .5]])
    with pytest.raises(ValueError):
        list(simplex.extremes_argmax(3, 3))


@pytest.mark.parametrize("K", [2, 3, 7, 10])
def test_extremes_argmax_membership(K):
    for k in range(K):
        V = simplex.extremes_matrix(K, k)
        assert V.shape == (K, K)
        assert np.all(V[:, k][:, None] >= V)
        assert all(simplex.is_posterior(v) for v in V)


def test_interpolate():
    y, s = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(simplex.interpolate(y, s, 0), y)
    np.testing.assert_array_equal(simplex.interpolate(y, s, 1), s)
    np.testing.assert_array_equal(simplex.interpolate(y, s, 0.5), [0.5, 0.5])
    with pytest.raises(ValueError):
        simplex.interpolate(y, s, 1.5)


@given(posteriors(), posteriors(), st.floats(0, 1))
def test_interpolate_stays_on_simplex(y, s, alpha):
    if len(y) != len(s):
        s = np.resize(s, len(y))
        s = s / s.sum()
    assert simplex.is_posterior(simplex.interpolate(y, s, alpha))


def test_opt_step_examples():
    y, s = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert simplex.opt_step(y, s, Budget(1.0)) == 0.5
    assert simplex.opt_step(y, s, Budget(2.0)) == 1.0
    assert simplex.opt_step(y, y, Budget(1.0)) == 0.0
    assert simplex.opt_step(y, s, Budget(0.0)) == 0.0
    assert simplex.opt_step(y, s, Budget(math.sqrt(2) / 2, norm_p=2)) == pytest.approx(0.5)


@given(posteriors(3, 3), st.integers(0, 2), st.floats(0, 2))
def test_opt_step_feasible_and_maximal(y, j, eps):
    s = np.eye(3)[j]
    b = Budget(eps)
    a = simplex.opt_step(y, s, b)
    assert simplex.l_p_dist(simplex.interpolate(y, s, a), y, 1) <= eps + 1e-9
    gap = simplex.l_p_dist(y, s, 1)
    if gap > eps and a < 1:
        a2 = min(a + 1e-6, 1.0)
        assert simplex.l_p_dist(simplex.interpolate(y, s, a2), y, 1) > eps


def test_opt_step_bisection_custom_dist():
    y, s = np.array([0.9, 0.1]), np.array([0.0, 1.0])
    dist = lambda a, b: float(np.abs(a - b).sum() ** 2)  # noqa: E731
    a = simplex.opt_step(y, s, Budget(0.25), dist=dist)
    # closed form: (2 * 0.9 * a)^2 = 0.25
    assert a == pytest.approx(0.5 / 1.8, abs=1e-5)
    assert dist(y, simplex.interpolate(y, s, a)) <= 0.25


def test_opt_step_batch_matches_scalar():
    rng = np.random.default_rng(0)
    Y = rng.dirichlet(np.ones(4), size=20)
    S = np.eye(4)[rng.integers(4, size=20)]
    got = simplex.opt_step_batch(Y, S, 0.7)
    ref = [simplex.opt_step(Y[i], S[i], Budget(0.7)) for i in range(20)]
    np.testing.assert_allclose(got, ref, atol=0)


def test_budget_validation():
    Budget(2.0)
    Budget(math.sqrt(2), 2)
    with pytest.raises(ValueError):
        Budget(2.1)
    with pytest.raises(ValueError):
        Budget(1.5, 2)
    with pytest.raises(ValueError):
        Budget(-0.1)
    with pytest.raises(ValueError):
        Budget(0.5, 3)


def test_entropy():
    assert simplex.entropy(np.full(10, 0.1)) == pytest.approx(3.3219, abs=1e-4)
    assert simplex.entropy(np.eye(4)[1]) == 0
    assert simplex.entropy(np.array([0.5, 0.5])) == pytest.approx(1.0)
    assert simplex.entropy(np.array([0.5, 0.5]), base="e") == pytest.approx(math.log(2))


def test_l_p_dist():
    a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert simplex.l_p_dist(a, a) == 0
    assert simplex.l_p_dist(a, b, 1) == 2
    assert simplex.l_p_dist(a, b, 2) == pytest.approx(1.4142, abs=1e-4)
    with pytest.raises(ValueError):
        simplex.l_p_dist(a, np.ones(3))


def _project_l1_cvx(v, r):
    import cvxpy as cp
    x = cp.Variable(len(v))
    cp.Problem(cp.Minimize(cp.sum_squares(x - v)), [cp.norm1(x) <= r]).solve()
    return x.value


@pytest.mark.parametrize("seed", range(8))
def test_project_l1_ball_matches_qp(seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(6) * 2
    r = float(rng.uniform(0.1, 3))
    got = simplex.project_l1_ball(v, r)
    np.testing.assert_allclose(got, _project_l1_cvx(v, r), atol=1e-5)
    assert np.abs(got).sum() <= r + 1e-9


@given(st.integers(0, 2**32 - 1), st.floats(0, 5))
@settings(max_examples=100)
def test_project_l1_ball_idempotent(seed, r):
    v = np.random.default_rng(seed).standard_normal(7) * 3
    once = simplex.project_l1_ball(v, r)
    np.testing.assert_allclose(simplex.project_l1_ball(once, r), once, atol=1e-12)
    assert np.abs(once).sum() <= r + 1e-9


def test_project_l1_ball_errors_and_inside():
    v = np.array([0.1, -0.2])
    np.testing.assert_array_equal(simplex.project_l1_ball(v, 1.0), v)
    np.testing.assert_array_equal(simplex.project_l1_ball(v, 0.0), [0, 0])
    with pytest.raises(ValueError):
        simplex.project_l1_ball(v, -1)
