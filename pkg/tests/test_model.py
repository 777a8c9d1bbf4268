import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from multiprev.covariance import CovarianceStructure, CovParams, build_joint_covariance
from multiprev.model import (
    ConvergenceError,
    ModelSpec,
    ParamSet,
    SurveyDataset,
    binomial_loglik,
    build_design_matrix,
    empirical_lambda,
    find_mode,
    logistic_regression,
    loglik_derivs,
    simulate_counts,
)
from oracles import bisect_mode, central_diff, rel_err


def dataset(survey, biased, p=1, seed=0, m=5, **kw):
    g = np.random.default_rng(seed)
    survey = np.asarray(survey)
    X = np.column_stack([np.ones(survey.size)] + [g.standard_normal(survey.size)
                                                  for _ in range(p - 1)])
    mm = np.full(survey.size, m)
    return SurveyDataset(survey, g.random((survey.size, 2)), mm, g.integers(0, m + 1, survey.size),
                         X, biased=biased, **kw)


# -- design matrix ----------------------------------------------------------

def test_design_two_surveys_intercept_only():
    D = build_design_matrix(dataset([0, 1], (False, True)))
    np.testing.assert_array_equal(D, [[1, 0], [1, 1]])


def test_design_all_unbiased_has_shared_columns_only():
    data = dataset([0, 0, 1, 2], (False, False, False), p=3)
    D = build_design_matrix(data)
    np.testing.assert_array_equal(D, data.covariates)


def test_design_application_shape():
    sizes = (475, 425, 249)
    survey = np.repeat([0, 1, 2], sizes)
    data = dataset(survey, (False, False, True), p=6, time=(1, 2, 2))
    D = build_design_matrix(data, bias_covariates=[5])
    assert D.shape == (1149, 7)
    rows = survey == 2
    np.testing.assert_array_equal(D[rows, 6], data.covariates[rows, 5])
    assert not D[~rows, 6].any()
    np.testing.assert_array_equal(D[:, :6], data.covariates)


def test_design_rejects_bad_mask():
    with pytest.raises(ValueError):
        build_design_matrix(dataset([0, 1], (False, True)), bias_covariates=[3])


# -- likelihood ---------------------------------------------------------------

def test_loglik_symmetric_case():
    assert binomial_loglik(np.array([1]), np.array([2]), np.array([0.0])) == \
        pytest.approx(-np.log(2), rel=1e-14)


def test_loglik_zero_counts():
    assert binomial_loglik(np.array([0]), np.array([5]), np.array([0.0])) == \
        pytest.approx(5 * np.log(0.5), rel=1e-14)


def test_loglik_matches_direct_evaluation():
    p = 1 / (1 + math.exp(0.5))
    direct = math.log(math.comb(10, 3)) + 3 * math.log(p) + 7 * math.log(1 - p)
    assert binomial_loglik(np.array([3]), np.array([10]), np.array([-0.5])) == \
        pytest.approx(direct, rel=1e-13)


def test_loglik_stable_at_extremes():
    v = binomial_loglik(np.array([0, 5]), np.array([5, 5]), np.array([800.0, -800.0]))
    assert v == pytest.approx(-5 * 800 - 5 * 800)


def test_loglik_shape_mismatch():
    with pytest.raises(ValueError):
        binomial_loglik(np.array([1, 2]), np.array([2, 2]), np.array([0.0]))


def test_derivs_symmetric_point():
    g, w = loglik_derivs(np.array([1.0]), np.array([2.0]), np.array([0.0]))
    assert g[0] == 0 and w[0] == 0.5


def test_curvature_saturates():
    _, w = loglik_derivs(np.array([1.0]), np.array([1.0]), np.array([40.0]))
    assert w[0] < 1e-15


@given(st.integers(0, 2 ** 31), st.integers(1, 8))
def test_derivs_match_finite_differences(seed, n):
    g = np.random.default_rng(seed)
    m = g.integers(1, 30, n)
    y = g.integers(0, m + 1)
    t = g.normal(0, 2, n)
    grad, w = loglik_derivs(y, m, t)
    f = lambda tt: binomial_loglik(y, m, tt)
    fd = central_diff(f, t, h=1e-6)
    assert np.all(rel_err(grad, fd, floor=1e-2) < 1e-6)
    for i in range(n):
        fi = lambda s: loglik_derivs(y, m, np.where(np.arange(n) == i, s, t))[0][i]
        d2 = (fi(t[i] + 1e-6) - fi(t[i] - 1e-6)) / 2e-6
        assert rel_err(w[i], -d2, floor=1e-2) < 1e-6
    assert np.all(w >= 0)


@given(st.integers(1, 50), st.floats(-30, 30), st.floats(0.01, 3))
def test_loglik_concave_per_site(m, t, h):
    for y in (0, m // 2, m):
        f = [binomial_loglik(np.array([y]), np.array([m]), np.array([t + k * h]))
             for k in (-1, 0, 1)]
        assert f[0] + f[2] - 2 * f[1] <= 1e-9 * (1 + abs(f[1]))


@pytest.mark.parametrize("y, m, expected", [(1, 2, 0.5), (0, 4, 0.4375), (1, 1, 0.25)])
def test_empirical_lambda(y, m, expected):
    assert empirical_lambda(np.array([y]), np.array([m]))[0] == pytest.approx(expected)


# -- mode -------------------------------------------------------------------

def test_mode_symmetric_data_is_zero():
    g = np.random.default_rng(1)
    x = g.random((6, 2))
    V = build_joint_covariance(CovParams(1.0, [0.0], [0.2], 0.3, [1.0]), [x], [False])
    t = find_mode(np.full(6, 5), np.full(6, 10), np.zeros(6), V)
    np.testing.assert_allclose(t, 0, atol=1e-12)


def test_mode_single_site_matches_bisection():
    t = find_mode(np.array([8.0]), np.array([10.0]), np.zeros(1), np.eye(1), tol=1e-12)
    assert t[0] == pytest.approx(bisect_mode(8, 10, 1.0), abs=1e-10)


def test_mode_tiny_variance_returns_prior_mean():
    mean = np.array([0.3, -1.2, 2.0])
    t = find_mode(np.array([0, 10, 3]), np.array([10, 10, 10]), mean, 1e-10 * np.eye(3))
    np.testing.assert_allclose(t, mean, atol=1e-8)


def test_mode_reports_last_iterate():
    with pytest.raises(ConvergenceError) as info:
        find_mode(np.array([10.0]), np.array([10.0]), np.zeros(1), 1e6 * np.eye(1),
                  max_iter=1)
    assert info.value.last is not None


# -- collapse to a single survey ----------------------------------------------

def test_single_survey_collapse():
    """With no biased survey and one time period the two-survey objects
    reduce entry for entry to the single-survey ones."""
    two = dataset([0, 0, 0, 1, 1], (False, False), p=2, seed=3)
    one = SurveyDataset(np.zeros(5, int), two.coords, two.m, two.y, two.covariates,
                        biased=(False,))
    np.testing.assert_array_equal(build_design_matrix(two), build_design_matrix(one))
    p2 = CovParams(1.2, [0, 0], [0.3, 0.3], 0.2, [1, 1])
    p1 = CovParams(1.2, [0], [0.3], 0.2, [1])
    V2 = CovarianceStructure(two.coords, two.survey, two.biased).matrix(p2)
    V1 = CovarianceStructure(one.coords, one.survey, one.biased).matrix(p1)
    np.testing.assert_array_equal(V1, V2)


# -- containers -------------------------------------------------------------

@pytest.mark.parametrize("change, msg", [
    (dict(y=[0, 6]), "count"),
    (dict(m=[0, 5]), "denominator"),
    (dict(survey=[1, 1]), "contiguous"),
    (dict(survey=[1, 0]), "ordered"),
    (dict(biased=(True, True)), "unbiased"),
    (dict(covariates=np.ones((3, 1))), "rows"),
])
def test_dataset_validation(change, msg):
    kw = dict(survey=[0, 1], coords=np.zeros((2, 2)), m=[5, 5], y=[1, 2],
              covariates=np.ones((2, 1)), biased=(False, False))
    kw.update(change)
    with pytest.raises(ValueError, match=msg):
        SurveyDataset(**kw)


def test_spec_requires_gold_standard():
    with pytest.raises(ValueError):
        ModelSpec(biased=(True,))


def test_spec_psi_round_trip():
    spec = ModelSpec(biased=(False, False, True), time=(1, 2, 2), bias_covariates=(5,))
    assert spec.psi_names == ["nu2_ratio_3", "tau2_ratio_1", "tau2_ratio_2", "tau2_ratio_3",
                              "phi", "delta_3", "alpha_1_2"]
    psi = np.array([0.3, 0.2, 0.1, 0.4, 0.05, 0.01, 0.7])
    cov = spec.cov_from_psi(2.0, psi)
    assert cov.alpha[1, 2] == 1.0 and cov.alpha[0, 1] == 0.7 and cov.alpha[0, 2] == 0.7
    np.testing.assert_allclose(spec.psi_from_cov(cov), psi, rtol=1e-15)
    assert spec.n_beta(6) == 7


def test_natural_names_reporting_order():
    spec = ModelSpec(biased=(False, False, True), time=(1, 2, 2), bias_covariates=(5,),
                     shared_nugget=True)
    names = spec.natural_names(6)
    assert names == [f"beta{k}" for k in range(1, 8)] + ["sigma2", "tau2", "nu2", "alpha",
                                                         "phi", "delta"]


def test_param_set_rejects_non_finite():
    with pytest.raises(ValueError):
        ParamSet([np.nan], CovParams(1, [0], [0], 1, [1]))


def test_logistic_regression_recovers_coefficients():
    g = np.random.default_rng(5)
    X = np.column_stack([np.ones(4000), g.standard_normal(4000)])
    m = np.full(4000, 20)
    y = g.binomial(m, expit(X @ [-0.5, 1.0]))
    beta, ok = logistic_regression(y, m, X)
    assert ok
    np.testing.assert_allclose(beta, [-0.5, 1.0], atol=0.05)


def test_simulate_degenerate_truth_has_half_prevalence():
    data = dataset([0, 0, 1, 1], (False, True))
    truth = ParamSet([0.0, 0.0], CovParams(0.0, [0, 0], [0, 0], 0.1, [1, 1]))
    y, t = simulate_counts(data, ModelSpec(biased=(False, True)), truth,
                           np.random.default_rng(0))
    assert np.all(expit(t) == 0.5)
    assert np.all((y >= 0) & (y <= data.m))
