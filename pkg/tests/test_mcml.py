import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import linalg, optimize

from multiprev.covariance import CovarianceStructure, CovParams
from multiprev.laplace import laplace_loglik
from multiprev.mcml import (
    AsymptoticCovariance,
    FitResult,
    ImportanceDensity,
    MCMLConfig,
    asymptotic_covariance,
    bootstrap_intervals,
    fit,
    format_report,
    mcml_derivatives,
    mcml_objective,
    parametric_bootstrap,
    profile_beta_sigma,
    transform_psi,
    untransform_psi,
)
from multiprev.model import ModelSpec, ParamSet, SurveyDataset, build_design_matrix, simulate_counts
from multiprev.sampler import ChainConfig, run_chain
from oracles import central_diff, gh_loglik, rel_err

SMALL_CHAIN = ChainConfig(n_iter=3000, burnin=500, thin=5)
SMALL_FIT = MCMLConfig(chain=SMALL_CHAIN, n_starts=1, max_refresh=4)


def make_data(sizes, biased, seed=0, m=5, p=1, time=None):
    g = np.random.default_rng(seed)
    survey = np.repeat(np.arange(len(sizes)), sizes)
    n = survey.size
    X = np.column_stack([np.ones(n)] + [g.standard_normal(n) for _ in range(p - 1)])
    return SurveyDataset(survey, g.random((n, 2)), np.full(n, m), np.zeros(n, int), X,
                         biased=biased, time=time)


def importance(data, spec, params, n_samples, seed=0, thin=5):
    D = build_design_matrix(data, spec.bias_covariates)
    V = CovarianceStructure(data.coords, data.survey, spec.biased).matrix(params.cov)
    cfg = ChainConfig(n_iter=2000 + n_samples * thin, burnin=2000, thin=thin, seed=seed)
    res = run_chain(data.y, data.m, D @ params.beta, V, cfg)
    return ImportanceDensity(data, spec, params, res.samples)


@pytest.fixture(scope="module")
def toy_imp():
    data = make_data((6, 4), (False, True), seed=1)
    spec = ModelSpec(biased=(False, True))
    p0 = ParamSet([0.2, -0.3], CovParams(1.0, [0, 0.5], [0.3, 0.2], 0.3, [1, 0.2]))
    y, _ = simulate_counts(data, spec, p0, np.random.default_rng(2))
    data = data.with_counts(y)
    return importance(data, spec, p0, 400, seed=3)


@pytest.fixture(scope="module")
def small_fit():
    data = make_data((25, 25), (False, True), seed=4)
    spec = ModelSpec(biased=(False, True), nugget=False)
    truth = ParamSet([0.5, -0.5], CovParams(1.0, [0, 0.5], [0, 0], 0.3, [1, 0.3]))
    y, _ = simulate_counts(data, spec, truth, np.random.default_rng(5))
    data = data.with_counts(y)
    return fit(data, spec, config=SMALL_FIT.replace(seed=7))


# -- objective --------------------------------------------------------------

@given(st.integers(0, 2 ** 31), st.integers(1, 60))
def test_objective_zero_at_reference(seed, m):
    g = np.random.default_rng(seed)
    data = make_data((3, 2), (False, True), seed=seed % 100)
    spec = ModelSpec(biased=(False, True))
    p0 = ParamSet(g.normal(size=2), CovParams(g.uniform(0.2, 2), [0, g.uniform(0, 1)],
                                              g.uniform(0, 1, 2), g.uniform(0.05, 1),
                                              [1, g.uniform(0.05, 1)]))
    imp = ImportanceDensity(data, spec, p0, g.normal(size=(m, 5)))
    assert mcml_objective(p0.beta, p0.cov, imp) == 0.0


def test_objective_invariant_to_sample_order(toy_imp):
    p = toy_imp.params0
    beta = p.beta + 0.1
    cov = p.cov.replace(sigma2=1.4, phi=0.25)
    a = mcml_objective(beta, cov, toy_imp)
    perm = np.random.default_rng(0).permutation(toy_imp.m)
    other = ImportanceDensity(toy_imp.data, toy_imp.spec, p, toy_imp.samples[perm])
    assert mcml_objective(beta, cov, other) == pytest.approx(a, abs=1e-12)


def test_objective_matches_quadrature_two_sites():
    """The importance-sampling ratio reproduces the exact likelihood ratio
    of a two-site model within 1%."""
    data = SurveyDataset([0, 0], [[0, 0], [0.1, 0.05]], [8, 12], [3, 9], np.ones((2, 1)),
                         biased=(False,))
    spec = ModelSpec(biased=(False,))
    p0 = ParamSet([0.0], CovParams(1.0, [0], [0.3], 0.2, [1]))
    imp = importance(data, spec, p0, 50_000, seed=9, thin=3)
    S = CovarianceStructure(data.coords, data.survey, spec.biased)
    ref = gh_loglik(data.y, data.m, [0.0, 0.0], S.matrix(p0.cov))
    for beta, cov in [([0.3], p0.cov.replace(sigma2=1.2)),
                      ([-0.2], p0.cov.replace(phi=0.3, tau2=[0.2])),
                      ([0.4], p0.cov.replace(sigma2=0.8, phi=0.15))]:
        exact = gh_loglik(data.y, data.m, np.full(2, beta[0]), S.matrix(cov)) - ref
        ratio = np.exp(mcml_objective(np.array(beta), cov, imp) - exact)
        assert ratio == pytest.approx(1.0, abs=0.01)


def test_objective_incoherent_cross_correlation_is_minus_inf():
    data = make_data((2, 2, 2), (False, False, False), time=(1, 2, 3))
    spec = ModelSpec(biased=(False,) * 3, time=(1, 2, 3))
    a = np.array([[1, .5, .5], [.5, 1, .5], [.5, .5, 1]])
    p0 = ParamSet([0.0], CovParams(1, [0] * 3, [0.1] * 3, 0.2, [1] * 3, alpha=a))
    imp = ImportanceDensity(data, spec, p0, np.zeros((3, 6)))
    bad = np.array([[1, .9, .9], [.9, 1, -.9], [.9, -.9, 1]])
    assert mcml_objective(p0.beta, p0.cov.replace(alpha=bad), imp) == -np.inf


def test_objective_dimension_checks(toy_imp):
    with pytest.raises(ValueError):
        mcml_objective(np.zeros(3), toy_imp.params0.cov, toy_imp)


# -- profiling ----------------------------------------------------------------

def test_single_sample_profile_is_generalized_least_squares():
    data = make_data((5, 4), (False, True), seed=3, p=2)
    spec = ModelSpec(biased=(False, True))
    psi = np.array([0.4, 0.3, 0.2, 0.25, 0.1])
    p0 = ParamSet(np.zeros(4), spec.cov_from_psi(1.0, psi))
    t1 = np.random.default_rng(0).normal(size=(1, 9))
    imp = ImportanceDensity(data, spec, p0, t1)
    beta, s2, _ = profile_beta_sigma(psi, imp)
    D = build_design_matrix(data)
    Vi = linalg.inv(CovarianceStructure(data.coords, data.survey, spec.biased)
                    .matrix(spec.cov_from_psi(1.0, psi)))
    b_gls = linalg.solve(D.T @ Vi @ D, D.T @ Vi @ t1[0])
    r = t1[0] - D @ b_gls
    np.testing.assert_allclose(beta, b_gls, rtol=1e-8, atol=1e-10)
    assert s2 == pytest.approx(r @ Vi @ r / 9, rel=1e-8)


def test_profile_gradient_vanishes(toy_imp):
    psi = toy_imp.spec.psi_from_cov(toy_imp.params0.cov) * 1.1
    beta, s2, val = profile_beta_sigma(psi, toy_imp)
    v, g, _ = mcml_derivatives(beta, s2, psi, toy_imp)
    assert v == pytest.approx(val)
    f = lambda u: mcml_derivatives(u[:-1], u[-1], psi, toy_imp)[0]
    fd = central_diff(f, np.r_[beta, s2], h=1e-6)
    assert np.max(np.abs(g)) < 1e-7
    assert np.max(np.abs(fd)) < 1e-5


def test_derivatives_match_finite_differences(toy_imp):
    g = np.random.default_rng(8)
    psi0 = toy_imp.spec.psi_from_cov(toy_imp.params0.cov)
    for _ in range(10):
        beta = toy_imp.params0.beta + g.normal(0, 0.3, 2)
        s2 = g.uniform(0.5, 2.0)
        psi = psi0 * np.exp(g.normal(0, 0.2, psi0.size))
        _, grad, H = mcml_derivatives(beta, s2, psi, toy_imp)
        f = lambda u: mcml_derivatives(u[:-1], u[-1], psi, toy_imp)[0]
        fd = central_diff(f, np.r_[beta, s2])
        assert np.all(rel_err(grad, fd, 1e-3 * np.linalg.norm(fd)) < 1e-5)
        fg = lambda u, j: mcml_derivatives(u[:-1], u[-1], psi, toy_imp)[1][j]
        for j in range(3):
            col = central_diff(lambda u: fg(u, j), np.r_[beta, s2])
            np.testing.assert_allclose(H[:, j], col, rtol=1e-4, atol=1e-6 * np.abs(H).max())


def test_identical_surveys_give_zero_bias_coefficient():
    g = np.random.default_rng(2)
    x = g.random((4, 2))
    data = SurveyDataset(np.repeat([0, 1], 4), np.vstack([x, x]), np.full(8, 5),
                         np.tile([1, 2, 3, 4], 2), np.ones((8, 1)), biased=(False, True))
    spec = ModelSpec(biased=(False, True), shared_nugget=True)
    half = g.normal(size=(30, 4))
    imp = ImportanceDensity(data, spec, ParamSet([0.0, 0.0], spec.cov_from_psi(
        1.0, [1e-8, 0.3, 0.2, 0.2])), np.hstack([half, half]))
    beta, _, _ = profile_beta_sigma(np.array([0.0, 0.3, 0.2, 0.2]), imp)
    assert abs(beta[1]) < 1e-8


# -- transforms ---------------------------------------------------------------

def test_transform_examples():
    spec = ModelSpec(biased=(False, False), time=(1, 2), nugget=False)
    v = transform_psi([0.017, 0.859], spec)
    assert v[0] == pytest.approx(np.log(0.017), abs=1e-12) and v[0] == pytest.approx(-4.075,
                                                                                      abs=1e-3)
    assert v[1] == pytest.approx(np.log(1.859 / 0.141), abs=1e-12)
    assert v[1] == pytest.approx(2.579, abs=1e-3)
    assert transform_psi([0.5, 0.0], spec)[1] == 0.0


def test_zero_ratio_is_floored():
    spec = ModelSpec(biased=(False, True), nugget=False)
    assert transform_psi([0.0, 0.1, 0.1], spec)[0] == pytest.approx(np.log(1e-8))


@given(st.floats(1e-6, 1e3), st.floats(1e-6, 1e3), st.floats(1e-4, 1e2), st.floats(-0.999, 0.999))
def test_transform_round_trip(ratio, tau, rng_, a):
    spec = ModelSpec(biased=(False, True), time=(1, 2), shared_nugget=True)
    psi = np.array([ratio, tau, rng_, rng_ / 2, a])
    back = untransform_psi(transform_psi(psi, spec), spec)
    np.testing.assert_allclose(back, psi, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("psi", [[0.1, 0.2, 1.0], [-0.1, 0.2, 0.3], [0.1, 0.0, 0.3]])
def test_transform_rejects_invalid(psi):
    # layout: shared nugget ratio, range, cross-correlation
    spec = ModelSpec(biased=(False, False), time=(1, 2), shared_nugget=True)
    with pytest.raises(ValueError):
        transform_psi(psi, spec)


# -- fitting ------------------------------------------------------------------

def test_fit_is_deterministic(small_fit):
    again = fit(small_fit.importance.data, small_fit.spec, config=SMALL_FIT.replace(seed=7))
    np.testing.assert_array_equal(again.params.beta, small_fit.params.beta)
    np.testing.assert_array_equal(again.spec.natural_values(again.params),
                                  small_fit.spec.natural_values(small_fit.params))
    assert [h["loglik"] for h in again.history] == [h["loglik"] for h in small_fit.history]


def test_fit_reports_and_serializes(small_fit):
    d = small_fit.to_dict()
    assert [r["parameter"] for r in d["parameters"]] == small_fit.names
    assert d["n_samples"] == SMALL_CHAIN.n_samples
    text = format_report(small_fit, {"beta1": (0.1, 0.9)})
    assert "(0.100, 0.900)" in text and "sigma^2" in text


def test_all_zero_counts_diverge():
    data = make_data((20,), (False,), seed=0)
    with pytest.warns(RuntimeWarning, match="separated"):
        res = fit(data, ModelSpec(biased=(False,)), config=SMALL_FIT.replace(seed=1))
    assert not res.converged
    assert res.params.beta[0] < -10


def test_fit_rejects_mismatched_spec(small_fit):
    with pytest.raises(ValueError):
        fit(small_fit.importance.data, ModelSpec(biased=(False, False)), config=SMALL_FIT)


# -- asymptotic covariance ----------------------------------------------------

def test_single_sample_covariance_is_generalized_least_squares():
    data = make_data((6, 5), (False, True), seed=6, p=2)
    spec = ModelSpec(biased=(False, True))
    psi = np.array([0.4, 0.3, 0.2, 0.25, 0.1])
    t1 = np.random.default_rng(1).normal(size=(1, 11))
    imp = ImportanceDensity(data, spec, ParamSet(np.zeros(4), spec.cov_from_psi(1.0, psi)), t1)
    beta, s2, val = profile_beta_sigma(psi, imp)
    res = FitResult(ParamSet(beta, spec.cov_from_psi(s2, psi)), spec, True, 1, val, imp)
    ac = asymptotic_covariance(res, free_psi=False)
    D = build_design_matrix(data)
    V1 = CovarianceStructure(data.coords, data.survey, spec.biased).matrix(
        spec.cov_from_psi(1.0, psi))
    expected = linalg.inv(D.T @ linalg.solve(V1, D)) * s2
    np.testing.assert_allclose(ac.cov[:4, :4], expected, atol=1e-4)
    assert ac.names == ["beta1", "beta2", "beta3", "beta4", "log_sigma2"]


def test_laplace_covariance_matches_quadrature():
    """With large denominators the Laplace surface is close to the exact
    likelihood, so both give the same curvature."""
    data = SurveyDataset([0, 0], [[0.0, 0.0], [0.2, 0.1]], [400, 300], [150, 200],
                         np.ones((2, 1)), biased=(False,))
    spec = ModelSpec(biased=(False,))
    params = ParamSet([0.1], CovParams(0.8, [0], [0.3], 0.25, [1]))
    imp = ImportanceDensity(data, spec, params, np.zeros((1, 2)))
    res = FitResult(params, spec, True, 1, 0.0, imp)
    ac = asymptotic_covariance(res, free_psi=False, method="laplace")
    S = CovarianceStructure(data.coords, data.survey, spec.biased)

    def ll(u):
        s2 = np.exp(u[1])
        # psi holds the ratio tau2 / sigma2 fixed
        cov = params.cov.replace(sigma2=s2, tau2=[0.3 * s2 / 0.8])
        return gh_loglik(data.y, data.m, np.full(2, u[0]), S.matrix(cov), nodes=40)

    u0 = np.array([0.1, np.log(0.8)])
    H = np.array([central_diff(lambda v, i=i: central_diff(ll, v, h=1e-3)[i], u0, h=1e-3)
                  for i in range(2)])
    np.testing.assert_allclose(ac.cov, linalg.inv(-0.5 * (H + H.T)), rtol=0.02)


def test_unknown_covariance_method(small_fit):
    with pytest.raises(ValueError):
        asymptotic_covariance(small_fit, method="exact")


def test_covariance_summaries(small_fit):
    ac = asymptotic_covariance(small_fit)
    free = ac.se > 0
    np.testing.assert_allclose(np.diag(ac.correlation)[free], 1.0, rtol=1e-12)
    ev = ac.eigenvalues
    assert np.all(np.diff(ev) <= 0) and np.all(ev > 0)
    lo, hi = ac.natural_interval("beta1")
    est = small_fit.estimates["beta1"]
    assert lo < est < hi and est - lo == pytest.approx(hi - est)
    lo, hi = ac.natural_interval("sigma2")
    assert 0 < lo < small_fit.estimates["sigma2"] < hi


def test_singular_hessian_reported():
    from multiprev.mcml import SingularHessianError

    err = SingularHessianError([2.0, -1.0])
    assert "eigenvalues" in str(err) and err.eigenvalues[-1] == -1.0


# -- bootstrap ----------------------------------------------------------------

def _gauss_sim(rng, mu=0.0):
    return rng.normal(mu, 1.0, 20)


def _gauss_refit(x, rng):
    return [x.mean()]


def test_bootstrap_two_replicates_give_range():
    b = bootstrap_intervals(_gauss_sim, _gauss_refit, 2, ["mu"], seed=3)
    assert b.lower[0] == b.estimates[:, 0].min() and b.upper[0] == b.estimates[:, 0].max()
    assert b.n_failed == 0


def _flaky_refit(x, rng):
    return None if rng.random() < 0.5 else [x.mean()]


def test_bootstrap_failures_counted_and_warned():
    with pytest.warns(RuntimeWarning, match="failed"):
        b = bootstrap_intervals(_gauss_sim, _flaky_refit, 40, ["mu"], seed=1)
    assert 0 < b.n_failed < 40 and b.estimates.shape[0] == 40 - b.n_failed
    with pytest.raises(RuntimeError):
        bootstrap_intervals(_gauss_sim, lambda x, r: None, 3, ["mu"], seed=1)


def test_bootstrap_independent_of_workers():
    a = bootstrap_intervals(_gauss_sim, _gauss_refit, 30, ["mu"], seed=5, n_jobs=1)
    b = bootstrap_intervals(_gauss_sim, _gauss_refit, 30, ["mu"], seed=5, n_jobs=2)
    np.testing.assert_array_equal(a.estimates, b.estimates)


def test_bootstrap_percentile_coverage():
    """Nested simulation with a Gaussian mean: percentile intervals from
    B=200 refits cover the truth in about 95% of outer replicates."""
    outer = np.random.default_rng(77)
    hits = 0
    n_outer = 400
    for k in range(n_outer):
        x = outer.normal(1.0, 1.0, 20)
        b = bootstrap_intervals(lambda r, mu=x.mean(): _gauss_sim(r, mu), _gauss_refit, 200,
                                ["mu"], seed=k)
        hits += b.lower[0] <= 1.0 <= b.upper[0]
    assert abs(hits / n_outer - 0.95) <= 0.04


def test_parametric_bootstrap_smoke(small_fit):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        b = parametric_bootstrap(small_fit, n_boot=2, config=SMALL_FIT, seed=0)
    assert b.names == small_fit.names
    assert b.estimates.shape[0] + b.n_failed == 2


# -- Monte Carlo consistency ------------------------------------------------

def test_argmax_approaches_quadrature_maximizer():
    """The maximizer of log L_m over the intercept approaches the exact
    maximum likelihood estimate as m grows."""
    data = SurveyDataset([0, 0, 0], [[0, 0], [0.2, 0], [0, 0.3]], [10, 10, 10], [2, 6, 4],
                         np.ones((3, 1)), biased=(False,))
    spec = ModelSpec(biased=(False,))
    cov = CovParams(1.0, [0], [0.2], 0.25, [1])
    V = CovarianceStructure(data.coords, data.survey, spec.biased).matrix(cov)
    exact = optimize.minimize_scalar(lambda b: -gh_loglik(data.y, data.m, np.full(3, b), V, 48),
                                     bounds=(-3, 3), method="bounded",
                                     options={"xatol": 1e-8}).x
    p0 = ParamSet([0.5], cov)
    medians = []
    for m in (100, 1000, 10_000):
        dist = []
        for seed in range(20):
            imp = importance(data, spec, p0, m, seed=seed, thin=2)
            b = optimize.minimize_scalar(lambda b: -mcml_objective(np.array([b]), cov, imp),
                                         bounds=(-3, 3), method="bounded",
                                         options={"xatol": 1e-8}).x
            dist.append(abs(b - exact))
        medians.append(np.median(dist))
    assert medians[0] > medians[1] > medians[2]


# -- Laplace approximation ------------------------------------------------------

def test_laplace_close_to_quadrature_for_informative_counts():
    y, m = np.array([30.0, 55.0]), np.array([100.0, 100.0])
    V = np.array([[1.0, 0.4], [0.4, 1.2]])
    mean = np.array([0.1, -0.2])
    ll, _ = laplace_loglik(y, m, mean, V)
    # the approximation error shrinks like 1/m; about 5e-3 here
    assert ll == pytest.approx(gh_loglik(y, m, mean, V), abs=1e-2)
