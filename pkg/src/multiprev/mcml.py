"""
Monte Carlo maximum likelihood for the multi-survey binomial geostatistical
model.

The likelihood ratio relative to reference parameters ``(beta0, theta0)`` is
approximated by the importance-sampling average

    L_m(beta, theta) = (1/m) sum_h h(t_h | D beta, V(theta)) / h(t_h | D beta0, V(theta0))

over conditional samples ``t_h`` of ``T | y`` drawn at the reference
parameters. Writing ``V(theta) = sigma2 V(psi)``, the regression
coefficients and ``sigma2`` are profiled out by Newton-Raphson with analytic
derivatives, and ``psi`` is optimized numerically on an unconstrained scale.
The reference parameters are refreshed to the new estimates until they stop
moving.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import partial
from types import SimpleNamespace

import numpy as np
from scipy import linalg, optimize
from scipy.special import logsumexp

from ._parallel import pmap
from .covariance import CovarianceStructure, NotPositiveDefinite, factorize
from .model import (
    ConvergenceError,
    ModelSpec,
    ParamSet,
    SurveyDataset,
    build_design_matrix,
    logistic_regression,
    simulate_counts,
)
from .sampler import ChainConfig, run_chain

__all__ = [
    "MCMLConfig",
    "ImportanceDensity",
    "FitResult",
    "AsymptoticCovariance",
    "BootstrapResult",
    "SingularHessianError",
    "transform_psi",
    "untransform_psi",
    "mcml_objective",
    "profile_beta_sigma",
    "mcml_derivatives",
    "default_init",
    "fit",
    "asymptotic_covariance",
    "bootstrap_intervals",
    "parametric_bootstrap",
    "format_report",
]

RATIO_FLOOR = 1e-8
_LOG2PI = np.log(2.0 * np.pi)


class SingularHessianError(np.linalg.LinAlgError):
    def __init__(self, eigenvalues):
        self.eigenvalues = np.asarray(eigenvalues)
        super().__init__(
            "negative Hessian of log L_m is not positive definite; eigenvalues: "
            + np.array2string(self.eigenvalues, precision=4)
        )


@dataclass(frozen=True)
class MCMLConfig:
    """Settings for :func:`fit`.

    Attributes
    ----------
    chain : ChainConfig
        Conditional simulation run per refresh; it fixes the Monte Carlo
        sample size ``m``.
    max_refresh : int
        Cap on importance-density refreshes.
    tol : float
        Convergence when no transformed parameter moves by more than
        ``tol * max(1, |value|)`` between refreshes.
    gain_tol : float or None
        Second stopping rule: stop once the maximized ``log L_m``, which is
        the log likelihood ratio of the new estimate against the current
        reference, is below ``gain_tol`` times the number of free
        parameters. The reference is then at the maximum up to Monte Carlo
        noise, which the parameter-change rule alone cannot detect on flat
        likelihoods. ``None`` disables it.
    laplace_init : bool
        Move the starting values to the maximizer of a Laplace
        approximation of the likelihood before the first refresh. Off by
        default: with binary data the Laplace maximizer can sit at a
        vanishing variance, and samples drawn there cannot reach the MLE.
    n_starts : int
        Starting points for the psi optimization in every refresh: the
        current reference plus ``n_starts - 1`` random perturbations.
    start_spread : float
        Standard deviation of those perturbations on the transformed scale.
    trust : float
        Largest move of any transformed psi entry within one refresh.
    seed : int or None
    """

    chain: ChainConfig = ChainConfig()
    max_refresh: int = 10
    tol: float = 1e-3
    gain_tol: float = 0.5
    laplace_init: bool = False
    n_starts: int = 3
    start_spread: float = 0.5
    trust: float = 3.0
    seed: int = None

    def replace(self, **kw):
        d = self.__dict__.copy()
        d.update(kw)
        return MCMLConfig(**d)


# -- psi reparameterization ---------------------------------------------

def transform_psi(psi, spec: ModelSpec):
    """Unconstrained coordinates: logs for ratios and ranges,
    ``log((1 + a) / (1 - a))`` for cross-correlations.

    Ratios at zero are floored at ``1e-8`` first.
    """
    psi = np.asarray(psi, dtype=float)
    out = np.empty_like(psi)
    for k, kind in enumerate(spec.psi_kinds):
        if kind == "alpha":
            a = psi[k]
            if not -1 < a < 1:
                raise ValueError(f"cross-correlation must lie in (-1, 1), got {a}")
            out[k] = np.log1p(a) - np.log1p(-a)
        elif kind == "ratio":
            if psi[k] < 0:
                raise ValueError("variance ratios must be non-negative")
            out[k] = np.log(max(psi[k], RATIO_FLOOR))
        else:
            if not psi[k] > 0:
                raise ValueError("ranges must be positive")
            out[k] = np.log(psi[k])
    return out


def untransform_psi(v, spec: ModelSpec):
    v = np.asarray(v, dtype=float)
    out = np.exp(v)
    for k, kind in enumerate(spec.psi_kinds):
        if kind == "alpha":
            out[k] = np.tanh(0.5 * v[k])
    return out


def _psi_bounds(spec, dmax):
    lo, hi = [], []
    for kind in spec.psi_kinds:
        if kind == "ratio":
            lo.append(np.log(RATIO_FLOOR))
            hi.append(np.log(1e4))
        elif kind == "range":
            lo.append(np.log(1e-3 * dmax))
            hi.append(np.log(10.0 * dmax))
        else:
            lo.append(-10.0)
            hi.append(10.0)
    return np.array(lo), np.array(hi)


# -- importance density and objective -----------------------------------

class ImportanceDensity:
    """Conditional samples drawn at reference parameters, with the
    reference log densities ``log h(t_h | D beta0, V(theta0))`` cached.

    Parameters
    ----------
    data : SurveyDataset
    spec : ModelSpec
    params0 : ParamSet
        Reference parameters the samples were drawn under.
    samples : ndarray, shape (m, n)
    """

    def __init__(self, data: SurveyDataset, spec: ModelSpec, params0: ParamSet, samples):
        self.data = data
        self.spec = spec
        self.params0 = params0
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if self.samples.shape[1] != len(data):
            raise ValueError("samples do not match the number of records")
        self.design = build_design_matrix(data, spec.bias_covariates)
        if self.design.shape[1] != params0.beta.size:
            raise ValueError("beta length does not match the design matrix")
        self.structure = CovarianceStructure(data.coords, data.survey, spec.biased)
        self.log_h0 = self.log_density(params0.beta, params0.cov)

    @property
    def m(self):
        return self.samples.shape[0]

    @property
    def n(self):
        return self.samples.shape[1]

    def log_density(self, beta, cov):
        """MVN log density of every stored sample under ``(beta, cov)``."""
        L = factorize(self.structure.matrix(cov))
        R = self.samples - self.design @ beta
        Z = linalg.solve_triangular(L, R.T, lower=True, check_finite=False)
        return (-0.5 * np.einsum("ij,ij->j", Z, Z) - np.sum(np.log(np.diag(L)))
                - 0.5 * self.n * _LOG2PI)


def _alpha_values(spec, cov):
    na = len(spec.alpha_pairs)
    return spec.psi_from_cov(cov)[len(spec.psi_kinds) - na:] if na else np.empty(0)


def mcml_objective(beta, cov, imp: ImportanceDensity):
    """``log L_m(beta, theta)``; ``-inf`` when ``V(theta)`` is not positive
    definite."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (imp.design.shape[1],):
        raise ValueError("beta has the wrong length")
    if cov.n_surveys != imp.spec.r:
        raise ValueError("covariance parameters have the wrong survey count")
    if not imp.spec.alpha_valid(_alpha_values(imp.spec, cov)):
        return -np.inf
    try:
        a = imp.log_density(beta, cov) - imp.log_h0
    except NotPositiveDefinite:
        return -np.inf
    return float(logsumexp(a) - np.log(imp.m))


class _Profile:
    """``log L_m`` as a function of ``(beta, sigma2)`` for fixed psi, with
    whitened sample quantities cached per psi."""

    def __init__(self, imp: ImportanceDensity):
        self.imp = imp
        self._cache = {}

    def prepare(self, psi):
        psi = np.asarray(psi, dtype=float)
        key = psi.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        imp = self.imp
        cov1 = imp.spec.cov_from_psi(1.0, psi)
        if not imp.spec.alpha_valid(_alpha_values(imp.spec, cov1)):
            raise NotPositiveDefinite("cross-correlation matrix is not positive definite")
        L = factorize(imp.structure.matrix(cov1))
        X = linalg.solve_triangular(L, imp.design, lower=True, check_finite=False)
        Z = linalg.solve_triangular(L, imp.samples.T, lower=True, check_finite=False)
        prep = SimpleNamespace(
            XtX=X.T @ X, XtZ=X.T @ Z, zz=np.einsum("ij,ij->j", Z, Z),
            logdet=2.0 * np.sum(np.log(np.diag(L))),
        )
        if len(self._cache) > 256:
            self._cache.clear()
        self._cache[key] = prep
        return prep

    def evaluate(self, beta, sigma2, prep, derivs=True):
        imp = self.imp
        n = imp.n
        q = prep.zz - 2.0 * beta @ prep.XtZ + beta @ prep.XtX @ beta
        a = (-0.5 * n * (_LOG2PI + np.log(sigma2)) - 0.5 * prep.logdet
             - 0.5 * q / sigma2 - imp.log_h0)
        lse = logsumexp(a)
        val = lse - np.log(imp.m)
        if not derivs:
            return val
        w = np.exp(a - lse)
        R = prep.XtZ - (prep.XtX @ beta)[:, None]
        s2, s4 = sigma2, sigma2 * sigma2
        gs_h = -0.5 * n / s2 + 0.5 * q / s4
        Rw = R @ w
        gb = Rw / s2
        gs = w @ gs_h
        Hbb = -prep.XtX / s2 + (R * w) @ R.T / s4 - np.outer(gb, gb)
        Hbs = -Rw / s4 + (R * w) @ gs_h / s2 - gb * gs
        Hss = w @ (0.5 * n / s4 - q / (s4 * s2) + gs_h ** 2) - gs ** 2
        k = beta.size
        H = np.empty((k + 1, k + 1))
        H[:k, :k] = Hbb
        H[:k, k] = H[k, :k] = Hbs
        H[k, k] = Hss
        return val, np.append(gb, gs), H

    def maximize(self, psi, tol=1e-8, max_iter=100):
        prep = self.prepare(psi)
        k = prep.XtX.shape[0]
        n = self.imp.n
        beta = linalg.solve(prep.XtX, prep.XtZ.mean(axis=1), assume_a="pos")
        q = prep.zz - 2.0 * beta @ prep.XtZ + beta @ prep.XtX @ beta
        sigma2 = max(np.mean(q) / n, 1e-12)
        val, g, H = self.evaluate(beta, sigma2, prep)
        for _ in range(max_iter):
            scaled = np.append(g[:k], sigma2 * g[k])
            if np.linalg.norm(scaled) < tol:
                return beta, sigma2, val
            evals, evecs = np.linalg.eigh(H)
            if evals[-1] < 0:
                step = -linalg.solve(H, g, assume_a="sym")
            else:
                step = evecs @ ((evecs.T @ g) / np.maximum(np.abs(evals), 1e-8))
            s = 1.0
            while True:
                s2 = sigma2 + s * step[k]
                if s2 > 0:
                    b2 = beta + s * step[:k]
                    v2 = self.evaluate(b2, s2, prep, derivs=False)
                    if v2 >= val - 1e-12 * max(1.0, abs(val)):
                        break
                s *= 0.5
                if s < 1e-12:
                    raise ConvergenceError("profile Newton-Raphson stalled",
                                           last=(beta, sigma2))
            beta, sigma2 = b2, s2
            val, g, H = self.evaluate(beta, sigma2, prep)
            if s * np.linalg.norm(step) < 1e-14 * (1.0 + np.linalg.norm(beta) + sigma2):
                return beta, sigma2, val
        raise ConvergenceError("profile Newton-Raphson hit max_iter", last=(beta, sigma2))


def profile_beta_sigma(psi, imp: ImportanceDensity):
    """Maximize ``log L_m`` over ``(beta, sigma2)`` with psi held fixed.

    Returns
    -------
    beta_hat, sigma2_hat, loglik
    """
    return _Profile(imp).maximize(np.asarray(psi, dtype=float))


def mcml_derivatives(beta, sigma2, psi, imp: ImportanceDensity):
    """Value, gradient and Hessian of ``log L_m`` in ``(beta, sigma2)``."""
    prof = _Profile(imp)
    return prof.evaluate(np.asarray(beta, dtype=float), float(sigma2),
                         prof.prepare(np.asarray(psi, dtype=float)))


# -- fitting --------------------------------------------------------------

def _max_distance(coords):
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    return float(np.hypot(*(hi - lo))) or 1.0


def default_init(data: SurveyDataset, spec: ModelSpec):
    """Starting values: logistic regression on the unbiased surveys for the
    shared coefficients, zero bias coefficients, ``sigma2 = tau2 = 1``,
    ``nu2 = 0.5``, ranges at 10% of the extent and cross-correlation 0.5."""
    D = build_design_matrix(data, spec.bias_covariates)
    p = data.covariates.shape[1]
    gold = ~np.asarray(spec.biased)[data.survey]
    b_shared, _ = logistic_regression(data.y[gold], data.m[gold], data.covariates[gold])
    beta = np.zeros(D.shape[1])
    beta[:p] = np.clip(b_shared, -20, 20)
    rng_ = 0.1 * _max_distance(data.coords)
    psi = []
    for kind, name in zip(spec.psi_kinds, spec.psi_names):
        if kind == "ratio":
            psi.append(0.5 if name.startswith("nu2") else 1.0)
        elif kind == "range":
            psi.append(rng_)
        else:
            psi.append(0.5)
    return ParamSet(beta, spec.cov_from_psi(1.0, psi))


def _pack(params: ParamSet, spec):
    psi = spec.psi_from_cov(params.cov)
    return np.concatenate([params.beta, [np.log(params.cov.sigma2)], transform_psi(psi, spec)])


def _unpack(u, k, spec):
    return ParamSet(u[:k], spec.cov_from_psi(np.exp(u[k]), untransform_psi(u[k + 1:], spec)))


def _central_grad(f, x, h=1e-5):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _maximize_refresh(imp, params0, config, rng, bounds):
    spec = imp.spec
    prof = _Profile(imp)
    v0 = transform_psi(spec.psi_from_cov(params0.cov), spec)
    lo = np.maximum(bounds[0], v0 - config.trust)
    hi = np.minimum(bounds[1], v0 + config.trust)
    v0 = np.clip(v0, lo, hi)

    def negll(v):
        try:
            return -prof.maximize(untransform_psi(v, spec))[2]
        except (NotPositiveDefinite, ConvergenceError):
            return 1e10

    starts = [v0] + [np.clip(v0 + config.start_spread * rng.standard_normal(v0.size), lo, hi)
                     for _ in range(config.n_starts - 1)]
    best = None
    for s in starts:
        res = optimize.minimize(negll, s, jac=partial(_central_grad, negll),
                                method="L-BFGS-B", bounds=list(zip(lo, hi)))
        if best is None or res.fun < best.fun:
            best = res
    psi = untransform_psi(best.x, spec)
    beta, sigma2, val = prof.maximize(psi)
    return ParamSet(beta, spec.cov_from_psi(sigma2, psi)), float(val), best.x, (lo, hi)


@dataclass
class FitResult:
    """Outcome of :func:`fit`.

    Attributes
    ----------
    params : ParamSet
    spec : ModelSpec
    converged : bool
    n_refresh : int
    loglik : float
        Maximized ``log L_m`` in the last refresh, i.e. the log likelihood
        ratio of the estimate against the last reference parameters.
    importance : ImportanceDensity
        Samples of the last refresh.
    history : list of dict
    boundary : list of str
        psi entries that ended within 5% of the width of their
        optimization interval (transformed scale) from a bound.
    acceptance_rate : float
    """

    params: ParamSet
    spec: ModelSpec
    converged: bool
    n_refresh: int
    loglik: float
    importance: ImportanceDensity = field(repr=False)
    history: list = field(default_factory=list, repr=False)
    boundary: list = field(default_factory=list)
    acceptance_rate: float = np.nan

    @property
    def names(self):
        return self.spec.natural_names(self.importance.data.covariates.shape[1])

    @property
    def estimates(self):
        return dict(zip(self.names, self.spec.natural_values(self.params)))

    def to_dict(self, intervals=None):
        rows = []
        for name, est in self.estimates.items():
            row = {"parameter": name, "estimate": float(est)}
            if intervals is not None and name in intervals:
                row["lower"], row["upper"] = (float(v) for v in intervals[name])
            rows.append(row)
        return {
            "parameters": rows,
            "converged": bool(self.converged),
            "n_refresh": int(self.n_refresh),
            "loglik": float(self.loglik),
            "boundary": list(self.boundary),
            "acceptance_rate": float(self.acceptance_rate),
            "n_samples": int(self.importance.m),
        }


def _relative_change(u_old, u_new):
    return float(np.max(np.abs(u_new - u_old) / np.maximum(np.abs(u_old), 1.0)))


def fit(data: SurveyDataset, spec: ModelSpec = None, init: ParamSet = None,
        config: MCMLConfig = MCMLConfig()):
    """Monte Carlo maximum likelihood fit.

    Each refresh draws ``config.chain.n_samples`` conditional samples at the
    current reference parameters, maximizes the profiled ``log L_m`` over
    psi, and moves the reference to the new estimate. See
    :class:`MCMLConfig` for the stopping rules.

    Parameters
    ----------
    data : SurveyDataset
    spec : ModelSpec, optional
        Defaults to the dataset's bias flags and time periods with per-survey
        nuggets.
    init : ParamSet, optional
        Starting reference parameters; :func:`default_init` if omitted.
    config : MCMLConfig

    Returns
    -------
    FitResult
        ``converged`` is False when ``config.max_refresh`` is reached first,
        or when the counts are separated by the design (for example all
        zero), in which case no finite maximum exists.
    """
    spec = spec if spec is not None else ModelSpec.from_dataset(data)
    if tuple(spec.biased) != tuple(data.biased):
        raise ValueError("model spec and dataset disagree on biased surveys")
    rng = np.random.default_rng(config.seed)
    params = init if init is not None else default_init(data, spec)
    structure = CovarianceStructure(data.coords, data.survey, spec.biased)
    D = build_design_matrix(data, spec.bias_covariates)
    if D.shape[1] != params.beta.size:
        raise ValueError("initial beta does not match the design matrix")
    bounds = _psi_bounds(spec, _max_distance(data.coords))
    k = D.shape[1]
    # no finite maximum exists when the counts are separated by the design
    _, finite_mle = logistic_regression(data.y, data.m, D)
    if not finite_mle:
        warnings.warn("counts are separated by the design matrix; regression estimates "
                      "diverge and the fit is flagged as not converged",
                      RuntimeWarning, stacklevel=2)
    if config.laplace_init:
        from .laplace import laplace_fit

        try:
            params, _ = laplace_fit(data, spec, params, bounds)
        except (np.linalg.LinAlgError, ValueError):
            pass
    n_free = k + 1 + len(spec.psi_kinds)
    history = []
    converged = False
    for it in range(1, config.max_refresh + 1):
        chain = run_chain(data.y, data.m, D @ params.beta, structure.matrix(params.cov),
                          config.chain, rng=rng)
        imp = ImportanceDensity(data, spec, params, chain.samples)
        new, value, v, (lo, hi) = _maximize_refresh(imp, params, config, rng, bounds)
        change = _relative_change(_pack(params, spec), _pack(new, spec))
        history.append({"refresh": it, "loglik": value, "change": change,
                        "acceptance_rate": chain.acceptance_rate,
                        "estimate": spec.natural_values(new)})
        params = new
        if change < config.tol or (config.gain_tol is not None
                                   and value < config.gain_tol * n_free):
            converged = finite_mle
            break
    names = spec.psi_names
    # the likelihood is flat near a floor, so the optimizer stops short of it
    margin = 0.05 * (bounds[1] - bounds[0])
    edge = [names[j] for j in range(v.size)
            if v[j] < bounds[0][j] + margin[j] or v[j] > bounds[1][j] - margin[j]]
    return FitResult(params=params, spec=spec, converged=converged, n_refresh=it,
                     loglik=value, importance=imp, history=history, boundary=edge,
                     acceptance_rate=chain.acceptance_rate)


# -- uncertainty ----------------------------------------------------------

@dataclass
class AsymptoticCovariance:
    """Inverse negative Hessian of ``log L_m`` at the estimate.

    ``cov`` is on the optimization scale ``(beta, log sigma2, transformed
    psi)``; ``cov_natural`` is mapped to the reporting parameters by the
    delta method.
    """

    names: list
    estimate: np.ndarray
    cov: np.ndarray
    natural_names: list
    natural_estimate: np.ndarray
    cov_natural: np.ndarray

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))

    @property
    def correlation(self):
        """Correlation matrix of the estimates; rows of parameters held
        fixed are NaN."""
        s = self.se
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.cov / np.outer(s, s)

    @property
    def eigenvalues(self):
        """Eigenvalues of the correlation matrix of the free estimates,
        descending."""
        free = self.se > 0
        return np.linalg.eigvalsh(self.correlation[np.ix_(free, free)])[::-1]

    def wald_interval(self, name, level=0.95):
        """Wald interval on the optimization scale, e.g. for ``log_sigma2``
        or ``t_phi`` (log of the range)."""
        from scipy.stats import norm

        j = self.names.index(name)
        z = norm.ppf(0.5 + level / 2)
        half = z * np.sqrt(self.cov[j, j])
        return self.estimate[j] - half, self.estimate[j] + half

    def natural_interval(self, name, level=0.95):
        """Wald interval for a reporting parameter.

        Regression coefficients use the plain scale, variances and ranges
        the log scale, and cross-correlations the ``atanh`` scale, so the
        bounds respect the parameter space.
        """
        from scipy.stats import norm

        j = self.natural_names.index(name)
        z = norm.ppf(0.5 + level / 2)
        est = self.natural_estimate[j]
        se = np.sqrt(max(self.cov_natural[j, j], 0.0))
        if name.startswith("beta"):
            return est - z * se, est + z * se
        if name.startswith("alpha"):
            c, h = np.arctanh(est), z * se / (1.0 - est ** 2)
            return np.tanh(c - h), np.tanh(c + h)
        h = z * se / est
        # a variance near zero can have an unbounded interval
        with np.errstate(over="ignore"):
            return est * np.exp(-h), est * np.exp(h)


def _hessian(f, x, h):
    d = x.size
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4 * h[i] * h[j])
    return H


def _held_fixed(result: FitResult):
    """psi entries excluded from the Hessian: those at an optimization
    bound, plus the range of any bias field whose variance is at the floor
    (it is not identified there)."""
    spec = result.spec
    fixed = set(result.boundary)
    for name in result.boundary:
        if name.startswith("nu2"):
            fixed.add("delta_" + name.rsplit("_", 1)[1])
    return [j for j, n in enumerate(spec.psi_names) if n in fixed]


def asymptotic_covariance(result: FitResult, imp: ImportanceDensity = None,
                          free_psi=True, step=1e-3, flat_tol=1e-3, method="mcml"):
    """Asymptotic covariance of the estimates from a numerical Hessian of
    the log likelihood at the estimate.

    Parameters
    ----------
    result : FitResult
    imp : ImportanceDensity, optional
        Defaults to the last refresh of `result`.
    method : {'mcml', 'laplace'}
        Differentiate ``log L_m`` built on `imp`, or the Laplace
        approximation of the log likelihood. Without a nugget the
        complete-data information dwarfs the observed information, and the
        Monte Carlo Hessian then needs far more samples than a fit uses;
        the Laplace surface is smooth and deterministic.
    free_psi : bool
        If False only ``(beta, log sigma2)`` are treated as unknown.
    step : float
        Central-difference step on the optimization scale.
    flat_tol : float
        If the Hessian is not negative definite, psi entries whose
        curvature is below this value are held fixed and the Hessian is
        recomputed once.

    Notes
    -----
    psi entries that ended on an optimization bound (see
    ``FitResult.boundary``) are held at their estimate and get zero
    variance, as does the range of a bias field whose variance ratio hit
    the floor. A variance ratio estimated close to zero, but not at the
    floor, leaves the likelihood flat in its logarithm; such entries are
    caught by `flat_tol`.

    Raises
    ------
    SingularHessianError
        If the negative Hessian is not positive definite.
    """
    imp = imp if imp is not None else result.importance
    spec = result.spec
    k = result.params.beta.size
    u_all = _pack(result.params, spec)
    prof = _Profile(imp)
    psi_names = [f"t_{n}" for n in spec.psi_names]
    names = spec.beta_names(imp.data.covariates.shape[1]) + ["log_sigma2"] + psi_names
    if free_psi:
        held = {k + 1 + j for j in _held_fixed(result)}
        free = np.array([j for j in range(u_all.size) if j not in held], dtype=int)
    else:
        free = np.arange(k + 1)

    def full(u):
        uu = u_all.copy()
        uu[free] = u
        return uu

    if method == "mcml":
        def ll(u):
            uu = full(u)
            try:
                prep = prof.prepare(untransform_psi(uu[k + 1:], spec))
            except NotPositiveDefinite:
                return -np.inf
            return prof.evaluate(uu[:k], np.exp(uu[k]), prep, derivs=False)
    elif method == "laplace":
        from .laplace import laplace_loglik

        data = imp.data
        warm = {}

        def ll(u):
            p = _unpack(full(u), k, spec)
            if not spec.alpha_valid(_alpha_values(spec, p.cov)):
                return -np.inf
            V = imp.structure.matrix(p.cov)
            try:
                val, warm["a"] = laplace_loglik(data.y, data.m, imp.design @ p.beta, V,
                                                a0=warm.get("a"))
            except (np.linalg.LinAlgError, ValueError):
                return -np.inf
            return val
    else:
        raise ValueError(f"unknown method {method!r}")

    H = _hessian(ll, u_all[free], np.full(free.size, step))
    negH = -0.5 * (H + H.T)
    evals = np.linalg.eigvalsh(negH)[::-1]
    if free_psi and not evals[-1] > 0:
        # a variance component estimated near zero has no curvature on the
        # log scale; hold such flat psi entries fixed and retry once
        names_psi = spec.psi_names
        curv = np.diag(negH)
        flat = [j for i, j in enumerate(free) if j > k and curv[i] < flat_tol]
        for j in list(flat):
            name = names_psi[j - k - 1]
            if name.startswith("nu2"):
                flat.append(k + 1 + names_psi.index("delta_" + name.rsplit("_", 1)[1]))
        if flat:
            free = np.array([j for j in free if j not in set(flat)], dtype=int)
            H = _hessian(ll, u_all[free], np.full(free.size, step))
            negH = -0.5 * (H + H.T)
            evals = np.linalg.eigvalsh(negH)[::-1]
    if not np.all(np.isfinite(evals)) or evals[-1] <= 0:
        raise SingularHessianError(evals)
    u0 = u_all[free]
    cov_free = linalg.inv(negH)
    cov_free = 0.5 * (cov_free + cov_free.T)
    if not free_psi:
        names = names[:k + 1]
        cov = cov_free
        u_rep = u0
    else:
        cov = np.zeros((u_all.size, u_all.size))
        cov[np.ix_(free, free)] = cov_free
        u_rep = u_all

    def natural(u):
        return spec.natural_values(_unpack(full(u), k, spec))

    nat0 = natural(u0)
    J = np.empty((nat0.size, u0.size))
    for j in range(u0.size):
        e = np.zeros(u0.size)
        e[j] = 1e-6
        J[:, j] = (natural(u0 + e) - natural(u0 - e)) / 2e-6
    return AsymptoticCovariance(
        names=names, estimate=u_rep, cov=cov,
        natural_names=spec.natural_names(imp.data.covariates.shape[1]),
        natural_estimate=nat0, cov_natural=J @ cov_free @ J.T,
    )


@dataclass
class BootstrapResult:
    names: list
    estimates: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_failed: int
    level: float = 0.95

    @property
    def intervals(self):
        return {n: (lo, hi) for n, lo, hi in zip(self.names, self.lower, self.upper)}


def _bootstrap_one(seed_seq, simulate, refit):
    rng = np.random.default_rng(seed_seq)
    return refit(simulate(rng), rng)


def bootstrap_intervals(simulate, refit, n_boot, names, seed=None, n_jobs=1, level=0.95):
    """Percentile intervals from refits to simulated datasets.

    Parameters
    ----------
    simulate : callable
        ``simulate(rng) -> dataset``.
    refit : callable
        ``refit(dataset, rng) -> estimate vector`` or ``None`` for a failed
        replicate, which is excluded and counted.
    n_boot : int
    names : list of str
    seed : int, optional
    n_jobs : int

    Notes
    -----
    Lower bounds use the order statistic at or below the ``(1 - level)/2``
    quantile and upper bounds the one at or above ``(1 + level)/2``, so with
    two replicates the interval is their range.
    """
    seqs = np.random.SeedSequence(seed).spawn(n_boot)
    out = pmap(partial(_bootstrap_one, simulate=simulate, refit=refit), seqs, n_jobs)
    ok = [np.asarray(e, dtype=float) for e in out if e is not None]
    n_failed = n_boot - len(ok)
    if n_failed > 0.1 * n_boot:
        warnings.warn(f"{n_failed} of {n_boot} bootstrap replicates failed",
                      RuntimeWarning, stacklevel=2)
    if not ok:
        raise RuntimeError("every bootstrap replicate failed")
    est = np.vstack(ok)
    a = (1.0 - level) / 2.0
    lower = np.quantile(est, a, axis=0, method="lower")
    upper = np.quantile(est, 1.0 - a, axis=0, method="higher")
    return BootstrapResult(list(names), est, lower, upper, n_failed, level)


def _simulate_at(rng, data, spec, params):
    y, _ = simulate_counts(data, spec, params, rng)
    return data.with_counts(y)


def _refit_mcml(dataset, rng, spec, init, config):
    seed = int(rng.integers(2 ** 31))
    res = fit(dataset, spec, init=init, config=config.replace(seed=seed))
    if not res.converged:
        return None
    return spec.natural_values(res.params)


def parametric_bootstrap(result: FitResult, n_boot=1000, config: MCMLConfig = None,
                         seed=None, n_jobs=1, level=0.95):
    """Parametric bootstrap intervals for every reported parameter.

    Datasets are simulated at the fitted parameters over the observed
    design (locations, denominators, covariates) and refitted starting from
    the estimate. Non-converged refits are dropped and counted.
    """
    data = result.importance.data
    spec = result.spec
    config = config if config is not None else MCMLConfig(chain=ChainConfig())
    simulate = partial(_simulate_at, data=data, spec=spec, params=result.params)
    refit = partial(_refit_mcml, spec=spec, init=result.params, config=config)
    return bootstrap_intervals(simulate, refit, n_boot, result.names, seed=seed,
                               n_jobs=n_jobs, level=level)


_GREEK = {"sigma2": "sigma^2", "tau2": "tau^2", "nu2": "nu^2"}


def _num(x):
    return f"{x:.3f}" if abs(x) < 1e4 or not np.isfinite(x) else f"{x:.3g}"


def format_report(result: FitResult, intervals=None, title="Monte Carlo maximum likelihood estimates"):
    """Plain-text table of estimates and optional confidence intervals."""
    lines = [title, ""]
    pct = "95% confidence interval"
    lines.append(f"{'Term':<12}{'Estimate':>10}   {pct if intervals else ''}".rstrip())
    for name, est in result.estimates.items():
        label = _GREEK.get(name, name)
        row = f"{label:<12}{_num(est):>10}"
        if intervals and name in intervals:
            lo, hi = intervals[name]
            row += f"   ({_num(lo)}, {_num(hi)})"
        lines.append(row)
    lines.append("")
    lines.append(f"converged: {result.converged}  refreshes: {result.n_refresh}  "
                 f"samples: {result.importance.m}")
    return "\n".join(lines)
