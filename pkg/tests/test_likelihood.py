import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmmkit import adcore as ad
from hmmkit.likelihood import (ObservationSeries, brute_force_likelihood, forward_backward,
                               matrix_product_likelihood, nll, nll_natural)
from hmmkit.params import EmissionSpec, NaturalParams, working_from_natural
from hmmkit.studies import simulate

from conftest import TRUTH_POISSON, random_obs, random_params


def test_single_state_closed_forms():
    w = np.log([1.0])
    assert nll(w, [0.0], EmissionSpec("poisson", 1)) == pytest.approx(1.0, abs=1e-15)
    g = nll(np.array([0.0, 0.0]), [0.0], EmissionSpec("gaussian", 1))
    assert g == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-15)
    assert abs(g - 0.9189385) < 1e-7


def test_eight_point_poisson_against_brute_force():
    obs, _ = simulate(TRUTH_POISSON, 8, 11)
    v = nll(working_from_natural(TRUTH_POISSON), obs.values, TRUTH_POISSON.spec)
    ref = -np.log(brute_force_likelihood(TRUTH_POISSON, obs))
    assert abs(v - ref) <= 1e-10 * abs(ref)


def test_brute_force_single_point_is_mixture():
    n = NaturalParams(gamma=[[0.7, 0.3], [0.4, 0.6]], lam=[1.0, 4.0])
    x = 2.0
    dens = np.exp(-n.lam) * n.lam ** x / 2.0
    assert brute_force_likelihood(n, [x]) == pytest.approx(float(n.delta @ dens), rel=1e-14)


def test_brute_force_equals_matrix_product():
    n = NaturalParams(gamma=[[0.8, 0.2], [0.3, 0.7]], mu=[0.0, 2.0], sigma=[1.0, 0.5])
    x = [0.1, 1.9, 2.2]
    assert brute_force_likelihood(n, x) == pytest.approx(matrix_product_likelihood(n, x), rel=1e-13)


def test_brute_force_size_limit():
    n = NaturalParams(gamma=[[0.8, 0.2], [0.3, 0.7]], lam=[1.0, 2.0])
    with pytest.raises(ValueError):
        brute_force_likelihood(n, np.ones(30))


@given(st.integers(0, 2 ** 31), st.integers(1, 3), st.integers(1, 7),
       st.sampled_from(["poisson", "gaussian"]))
def test_nll_matches_brute_force(seed, m, T, family):
    rng = np.random.default_rng(seed)
    n = random_params(rng, m, family)
    x = random_obs(rng, n, T)
    ref = -np.log(brute_force_likelihood(n, x))
    v = nll(working_from_natural(n), x, n.spec)
    assert abs(v - ref) <= 1e-10 * max(1.0, abs(ref))
    assert abs(nll_natural(n, x) - ref) <= 1e-10 * max(1.0, abs(ref))


@given(st.integers(0, 2 ** 31), st.sampled_from(["poisson", "gaussian"]))
def test_permutation_invariance(seed, family):
    rng = np.random.default_rng(seed)
    n = random_params(rng, 3, family)
    x = random_obs(rng, n, 40)
    p = n.permute(rng.permutation(3))
    a, b = nll_natural(n, x), nll_natural(p, x)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


@given(st.integers(0, 2 ** 31))
def test_forward_backward_consistency(seed):
    rng = np.random.default_rng(seed)
    n = random_params(rng, 3, "gaussian")
    x = random_obs(rng, n, 20)
    c = forward_backward(n, x)
    per_t = ad.logsumexp(c.log_alpha + c.log_beta, axis=0)
    np.testing.assert_allclose(per_t, c.log_likelihood, rtol=0, atol=1e-8)
    np.testing.assert_array_equal(c.log_beta[:, -1], 0.0)
    # forward total vs delta P(x1) beta_1
    with np.errstate(divide="ignore"):
        from hmmkit.likelihood import natural_log_inputs
        log_delta, _, logp = natural_log_inputs(n, x)
    back = float(ad.logsumexp(log_delta + logp[0] + c.log_beta[:, 0]))
    assert abs(np.exp(back - c.log_likelihood) - 1.0) < 1e-10
    assert c.log_likelihood == pytest.approx(-nll_natural(n, x), rel=1e-12)


def test_single_state_forward_backward_is_cumulative():
    n = NaturalParams(gamma=[[1.0]], lam=[2.0])
    x = np.array([1.0, 3.0, 0.0, 2.0])
    lp = x * np.log(2.0) - 2.0 - np.array([0, np.log(6), 0, np.log(2)])
    c = forward_backward(n, x)
    np.testing.assert_allclose(c.log_alpha[0], np.cumsum(lp), atol=1e-14)
    np.testing.assert_allclose(c.log_beta[0], np.cumsum(lp[::-1])[::-1] - lp, atol=1e-14)


def test_long_series_stays_finite():
    rng = np.random.default_rng(0)
    n = NaturalParams(gamma=[[1 - 1e-9, 1e-9], [1e-9, 1 - 1e-9]], lam=[0.01, 500.0])
    x = rng.poisson(250.0, 100_000).astype(float)
    v = nll_natural(n, x)
    assert np.isfinite(v)
    assert np.isfinite(nll(working_from_natural(n), x, n.spec))


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        nll(np.zeros(4), [1.0, -1.0], EmissionSpec("poisson", 2))
    with pytest.raises(ValueError):
        ObservationSeries([1.5, 2.0], family="poisson")
    with pytest.raises(ValueError):
        ObservationSeries([1.0, np.nan])


def test_csv_reading(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("count\n1\n2\n\n3\n")
    assert list(ObservationSeries.from_csv(p).values) == [1, 2, 3]
    p.write_text("1\n2\n")
    assert len(ObservationSeries.from_csv(p, header=False)) == 2
    assert len(ObservationSeries.from_csv(p, header=True)) == 1
    p.write_text("x\n1\nabc\n")
    with pytest.raises(ValueError, match=":3:"):
        ObservationSeries.from_csv(p)
