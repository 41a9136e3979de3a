import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from hmmkit import inference as inf
from hmmkit.likelihood import _emission_prob
from hmmkit.optim import FitResult, OptimizerConfig, fit
from hmmkit.params import EmissionSpec, NaturalParams, natural_from_working, working_from_natural
from hmmkit.studies import simulate, simulate_visited

from conftest import TRUTH_GAUSS, TRUTH_POISSON, random_obs, random_params


def brute_posterior(n, x):
    """P(C_t = i | x) by enumerating every state path."""
    p = _emission_prob(n, x)
    T, m = len(x), n.m
    post = np.zeros((m, T))
    for path in itertools.product(range(m), repeat=T):
        w = n.delta[path[0]] * p[0, path[0]]
        for t in range(1, T):
            w *= n.gamma[path[t - 1], path[t]] * p[t, path[t]]
        post[list(path), range(T)] += w
    return post / post[:, :1].sum()


# ---------------------------------------------------------------- quantiles and CIs

def test_normal_quantile_against_scipy():
    for p in [1e-10, 1e-4, 0.025, 0.3, 0.5, 0.8, 0.975, 1 - 1e-6]:
        assert abs(inf.normal_quantile(p) - stats.norm.ppf(p)) < 1e-9
    assert abs(inf._z(0.95) - 1.959964) < 1e-6
    with pytest.raises(ValueError):
        inf._z(1.0)


def test_wald_worked_example():
    ci = inf.wald_ci(1.64, 0.278, 0.95, (0.0, np.inf))
    assert abs(ci.lower - 1.095) < 1e-3 and abs(ci.upper - 2.185) < 1e-3
    assert abs(ci.lower - 1.09) < 0.01 and abs(ci.upper - 2.18) < 0.01


def test_wald_clipping_and_degenerate():
    ci = inf.wald_ci(0.34, 0.25, 0.95, (0.0, 1.0))
    assert ci.lower == 0.0 and ci.upper == pytest.approx(0.34 + 1.959963984540054 * 0.25)
    ci = inf.wald_ci(0.7, 0.0)
    assert ci.lower == ci.upper == 0.7
    with pytest.raises(ValueError):
        inf.wald_ci(0.5, 0.1, level=0.0)
    with pytest.raises(ValueError):
        inf.wald_ci(0.5, -0.1)


@given(st.floats(-5, 5), st.floats(0, 10), st.floats(0.01, 0.999),
       st.sampled_from([None, (0.0, 1.0), (0.0, np.inf)]))
def test_wald_ordering_property(est, se, level, bounds):
    if bounds is not None:
        est = min(max(est, bounds[0]), bounds[1])
    ci = inf.wald_ci(est, se, level, bounds)
    assert ci.lower <= ci.estimate <= ci.upper


def test_aic_bic():
    assert inf.aic_bic(0.0, 2, np.e ** 2) == pytest.approx((4.0, 4.0))
    aic, bic = inf.aic_bic(168.5, 4, 87)
    assert aic == pytest.approx(345.0) and abs(bic - 354.9) < 0.1
    for T in (8, 100, 5000):
        a, b = inf.aic_bic(10.0, 3, T)
        assert b > a


# ---------------------------------------------------------------- covariance

def test_single_state_poisson_se_closed_form():
    x = np.array([2.0, 2.0, 2.0])
    res = fit(EmissionSpec("poisson", 1), x, NaturalParams(gamma=[[1.0]], lam=[1.0]))
    rows = {lab: (e, s) for lab, e, s, _ in inf.parameter_table(res)}
    lam, se = rows["lambda1"]
    assert lam == pytest.approx(2.0, abs=1e-8)
    assert se == pytest.approx(np.sqrt(2.0 / 3.0), rel=1e-8)
    # chain rule through exp
    var_eta = inf.inverse_hessian(res.hessian_working)[0, 0]
    assert res.cov_natural[1, 1] == pytest.approx(lam ** 2 * var_eta, rel=1e-10)


def test_singular_hessian_reports_condition_number():
    with pytest.raises(inf.CovarianceUnavailableError, match="condition number"):
        inf.inverse_hessian(np.array([[1.0, 1.0], [1.0, 1.0]]) * -1)
    with pytest.raises(np.linalg.LinAlgError):
        inf.inverse_hessian(None)


@given(st.integers(0, 10 ** 6))
def test_covariance_diagonal_nonnegative(seed):
    rng = np.random.default_rng(seed)
    obs, _, _ = simulate_visited(TRUTH_POISSON, 120, rng)
    res = fit(TRUTH_POISSON.spec, obs, TRUTH_POISSON)
    if res.converged:
        assert np.min(np.diag(inf.covariance_natural(res))) >= -1e-10


def test_parameter_table_bounds(poisson_fit):
    for lab, est, se, ci in inf.parameter_table(poisson_fit):
        assert ci.lower <= est <= ci.upper
        if lab.startswith(("gamma", "delta")):
            assert 0 <= ci.lower and ci.upper <= 1


# ---------------------------------------------------------------- smoothing

def test_smoothing_hand_set_brute_force():
    n = NaturalParams(gamma=[[0.8, 0.2], [0.35, 0.65]], lam=[1.0, 4.0])
    x = np.array([0.0, 5.0, 3.0, 1.0])
    np.testing.assert_allclose(inf.smoothing_probabilities(n, x), brute_posterior(n, x),
                               rtol=0, atol=1e-10)


@given(st.integers(0, 2 ** 31), st.integers(1, 3), st.integers(1, 6),
       st.sampled_from(["poisson", "gaussian"]))
def test_smoothing_matches_enumeration(seed, m, T, family):
    rng = np.random.default_rng(seed)
    n = random_params(rng, m, family)
    x = random_obs(rng, n, T)
    p = inf.smoothing_probabilities(n, x)
    np.testing.assert_allclose(p, brute_posterior(n, x), rtol=0, atol=1e-10)
    assert np.max(np.abs(p.sum(axis=0) - 1)) < 1e-10


def test_single_state_smoothing_is_certain():
    x = np.array([1.0, 4.0, 2.0, 0.0])
    res = fit(EmissionSpec("poisson", 1), x, NaturalParams(gamma=[[1.0]], lam=[1.0]))
    rep = inf.smoothing_with_uncertainty(res, x)
    assert np.all(rep.probs == 1.0) and np.all(rep.se == 0.0)
    assert np.all(rep.ci_lower == 1.0) and np.all(rep.ci_upper == 1.0)


def test_smoothing_se_matches_finite_difference(poisson_series, poisson_fit):
    obs, _ = poisson_series
    x = obs.values[:60]
    res = fit(TRUTH_POISSON.spec, x, TRUTH_POISSON)
    rep = inf.smoothing_with_uncertainty(res, x)
    w0, h = res.working_hat, 1e-5
    J = np.zeros(rep.probs.shape + (w0.size,))
    for k in range(w0.size):
        e = np.zeros_like(w0)
        e[k] = h
        up = inf.smoothing_probabilities(natural_from_working(w0 + e, res.spec), x)
        dn = inf.smoothing_probabilities(natural_from_working(w0 - e, res.spec), x)
        J[..., k] = (up - dn) / (2 * h)
    cov = inf.inverse_hessian(res.hessian_working)
    se_fd = np.sqrt(np.clip(np.einsum("itk,kl,itl->it", J, cov, J), 0, None))
    assert np.max(np.abs(se_fd - rep.se)) < 1e-4


def test_smoothing_report_invariants_and_csv(tmp_path, poisson_series, poisson_fit):
    obs, _ = poisson_series
    rep = inf.smoothing_with_uncertainty(poisson_fit, obs)
    assert np.max(np.abs(rep.probs.sum(axis=0) - 1)) < 1e-10
    assert np.all(rep.ci_lower >= 0) and np.all(rep.ci_upper <= 1)
    assert np.all(rep.ci_lower <= rep.probs) and np.all(rep.probs <= rep.ci_upper)
    p = tmp_path / "s.csv"
    rep.to_csv(p)
    header = p.read_text().splitlines()[0]
    assert header == "t,state,prob,se,lower,upper,most_likely"
    back = inf.SmoothingReport.from_csv(p)
    assert np.array_equal(back.probs, rep.probs) and np.array_equal(back.se, rep.se)
    assert np.array_equal(back.most_likely_state, rep.most_likely_state)
    d = json.loads(rep.to_json())
    assert len(d["probs"]) == 2


def test_separated_states_are_classified():
    obs, path = simulate(TRUTH_GAUSS, 300, 17)
    res = fit(TRUTH_GAUSS.spec, obs, TRUTH_GAUSS)
    rep = inf.smoothing_with_uncertainty(res, obs)
    assert np.mean(rep.probs.max(axis=0) > 0.9) > 0.95
    assert np.mean(rep.most_likely_state == path) >= 0.95


def test_uncertain_columns_can_differ_in_se():
    # qualitative: near-equal probabilities, very different standard errors
    truth = NaturalParams(gamma=[[0.9, 0.1], [0.1, 0.9]], mu=[-1, 1], sigma=[1, 1])
    obs, _ = simulate(truth, 200, 2)
    res = fit(truth.spec, obs, truth)
    rep = inf.smoothing_with_uncertainty(res, obs)
    idx = np.flatnonzero(np.abs(rep.probs[0] - 0.5) < 0.05)
    assert idx.size >= 2
    se = rep.se[0, idx]
    assert se.max() / se.min() > 2


def test_smoothing_needs_converged_fit(poisson_fit):
    bad = FitResult(**{**poisson_fit.__dict__, "converged": False})
    with pytest.raises(ValueError):
        inf.smoothing_with_uncertainty(bad, np.ones(5))


# ---------------------------------------------------------------- bootstrap

def test_bootstrap_is_worker_count_independent(poisson_fit):
    a = inf.parametric_bootstrap(poisson_fit, 6, seed=3, workers=1)
    b = inf.parametric_bootstrap(poisson_fit, 6, seed=3, workers=2)
    assert np.array_equal(a.estimates, b.estimates)


def test_bootstrap_duplicate_seeds_collapse(poisson_fit):
    r = inf.parametric_bootstrap(poisson_fit, 4, seed=[11] * 4)
    np.testing.assert_array_equal(r.lower, r.upper)
    np.testing.assert_array_equal(r.median, r.lower)


def test_bootstrap_failures(poisson_fit):
    with pytest.raises(inf.BootstrapUnreliableError):
        inf.parametric_bootstrap(poisson_fit, 4, seed=1,
                                 optcfg=OptimizerConfig(max_iterations=1))
    with pytest.raises(ValueError):
        inf.parametric_bootstrap(poisson_fit, 1, seed=1)


# ---------------------------------------------------------------- selection

def test_selection_rows_and_marks():
    obs, _ = simulate(TRUTH_POISSON, 200, 4)
    rows = inf.select_state_count(obs, "poisson", 1, 3)
    assert [r.m for r in rows] == [1, 2, 3]
    assert sum(r.best_bic for r in rows) == 1 and sum(r.best_aic for r in rows) == 1
    assert rows[1].best_bic
    with pytest.raises(ValueError):
        inf.select_state_count(obs, "poisson", 2, 9)


def test_default_init_valid():
    for m in range(1, 5):
        for fam in ("poisson", "gaussian"):
            spec = EmissionSpec(fam, m)
            n = inf.default_init(np.array([0.0, 0.0, 1.0, 3.0]), spec)
            assert n.spec == spec
            working_from_natural(n)
