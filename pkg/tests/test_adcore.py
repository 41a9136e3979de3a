import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmmkit import adcore as ad
from hmmkit.likelihood import nll, nll_function
from hmmkit.params import EmissionSpec, NaturalParams, working_from_natural
from hmmkit.studies import simulate

from conftest import TRUTH_POISSON

EPS = np.finfo(float).eps


def fd_gradient(f, x):
    x = np.asarray(x, float)
    g = np.zeros_like(x)
    for i in range(x.size):
        h = np.cbrt(EPS) * max(1.0, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def test_trivial_values_and_gradients():
    sq = ad.DiffFunction(lambda x: x[0] * x[0], 1)
    assert ad.value(sq, [3.0]) == 9.0
    np.testing.assert_array_equal(ad.gradient(sq, [3.0]), [6.0])
    total = ad.DiffFunction(lambda x: ad.sum(x), 3)
    assert ad.value(total, [1, 2, 3]) == 6.0
    prod = ad.DiffFunction(lambda x: x[0] * x[1], 2)
    np.testing.assert_array_equal(ad.gradient(prod, [2.0, 5.0]), [5.0, 2.0])


def test_trivial_hessians():
    f = ad.DiffFunction(lambda x: x[0] * x[0] + 3 * x[0] * x[1], 2)
    for x in ([0.0, 0.0], [1.5, -2.0]):
        np.testing.assert_array_equal(ad.hessian(f, x), [[2, 3], [3, 0]])
    np.testing.assert_array_equal(ad.hessian(lambda x: ad.exp(x[0]), [0.0]), [[1.0]])


def test_input_length_checked():
    with pytest.raises(ValueError):
        ad.value(ad.DiffFunction(lambda x: x[0], 2), [1.0])


def test_nan_is_reported():
    with pytest.raises(ad.EvaluationError):
        ad.value(lambda x: ad.exp(x[0]) * 0.0 + np.nan, [1.0])
    with pytest.raises(ad.NonDifferentiableError):
        ad.gradient(lambda x: ad.log(x[0]), [-1.0])
    with pytest.raises(ad.NonDifferentiableError):
        ad.gradient(lambda x: ad.sqrt(x[0]), [0.0])


def test_nll_value_matches_plain_evaluation(poisson_series):
    obs, _ = poisson_series
    spec = EmissionSpec("poisson", 2)
    w = working_from_natural(TRUTH_POISSON)
    assert ad.value(nll_function(obs.values, spec), w) == nll(w, obs.values, spec)


def test_var_arithmetic_matches_plain():
    f = lambda x: ad.logsumexp(ad.exp(x) * x - x / 3.0 + ad.power(x, 3.0))
    x = np.array([0.3, -1.2, 2.0])
    v, _ = ad.value_and_gradient(f, x)
    assert abs(v - f(x)) <= 2 * EPS * abs(v)


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_cubic_polynomial_derivatives_exact(x, c):
    def f(v):
        return c[0] * v[0] * v[1] * v[2] + c[1] * ad.power(v[0], 3.0) + c[2] * v[1] * v[1] + c[3] * v[2]
    x = np.array(x)
    g_sym = np.array([c[0] * x[1] * x[2] + 3 * c[1] * x[0] ** 2,
                      c[0] * x[0] * x[2] + 2 * c[2] * x[1],
                      c[0] * x[0] * x[1] + c[3]])
    h_sym = np.array([[6 * c[1] * x[0], c[0] * x[2], c[0] * x[1]],
                      [c[0] * x[2], 2 * c[2], c[0] * x[0]],
                      [c[0] * x[1], c[0] * x[0], 0.0]])
    _, g, h = ad.value_grad_hess(f, x)
    scale = 8 * EPS * max(1.0, np.max(np.abs(g_sym)))
    assert np.max(np.abs(g - g_sym)) <= scale
    assert np.max(np.abs(h - h_sym)) <= 8 * EPS * max(1.0, np.max(np.abs(h_sym)))
    assert np.array_equal(h, h.T)


@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_gradient_linearity(x):
    f = lambda v: ad.logsumexp(v * 2.0)
    g = lambda v: ad.sum(ad.exp(v) * v)
    lhs = ad.gradient(lambda v: f(v) + g(v), x)
    rhs = ad.gradient(f, x) + ad.gradient(g, x)
    assert np.max(np.abs(lhs - rhs)) <= 4 * EPS * max(1.0, np.max(np.abs(rhs)))


def test_gaussian_nll_gradient_vs_finite_differences(rng):
    truth = NaturalParams(gamma=[[0.9, 0.1], [0.1, 0.9]], mu=[-5, 5], sigma=[1, 5])
    obs, _ = simulate(truth, 50, 3)
    spec = truth.spec
    df = nll_function(obs.values, spec)
    w = working_from_natural(truth) + rng.normal(0, 0.1, spec.n_working)
    g = ad.gradient(df, w)
    fd = fd_gradient(lambda v: nll(v, obs.values, spec), w)
    assert np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(fd))) < 1e-6


def test_hessian_pd_at_mle(poisson_fit):
    assert poisson_fit.converged
    assert np.min(np.linalg.eigvalsh(poisson_fit.hessian_working)) > 0


def test_jacobian_forward_mode():
    f = lambda v: ad.concatenate([ad.exp(v), v * v[0:1]])
    x = np.array([0.5, -1.0])
    j = ad.jacobian(f, x)
    expect = np.array([[np.exp(0.5), 0], [0, np.exp(-1.0)], [2 * 0.5, 0], [-1.0, 0.5]])
    np.testing.assert_allclose(j, expect, rtol=1e-15)


def test_solve_derivative():
    a0 = np.array([[2.0, 0.5], [0.3, 1.5]])
    b = np.array([1.0, -1.0])
    f = lambda v: ad.sum(ad.solve(a0 + ad.reshape(ad.concatenate([v, v * 0.0]), (2, 2)), b))
    x = np.array([0.1, 0.2])
    g = ad.gradient(f, x)
    fd = fd_gradient(lambda v: f(v), x)
    np.testing.assert_allclose(g, fd, rtol=1e-8, atol=1e-9)


def test_gradient_cost_is_bounded_multiple_of_value(poisson_series):
    obs, _ = poisson_series
    df = nll_function(obs.values, EmissionSpec("poisson", 2))
    w = working_from_natural(TRUTH_POISSON)
    with ad.count_ops() as cv:
        ad.value(df, w)
    with ad.count_ops() as cg:
        ad.gradient(df, w)
    assert cv.ops > 0
    assert cg.ops <= 6 * cv.ops


def test_concurrent_evaluations_do_not_interfere():
    f = lambda v: ad.sum(ad.exp(v) * v)
    xs = [np.full(3, 0.1 * i) for i in range(8)]
    expect = [ad.gradient(f, x) for x in xs]
    out = [None] * len(xs)

    def work(i):
        for _ in range(20):
            out[i] = ad.gradient(f, xs[i])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(xs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, b in zip(out, expect):
        np.testing.assert_array_equal(a, b)
