"""
Survey data, model layout, design matrix and the binomial-logistic
conditional likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy import linalg
from scipy.special import expit, gammaln, log_expit

from .covariance import CovParams

__all__ = [
    "ConvergenceError",
    "SurveyDataset",
    "ModelSpec",
    "ParamSet",
    "build_design_matrix",
    "binomial_loglik",
    "loglik_derivs",
    "empirical_lambda",
    "find_mode",
    "logistic_regression",
    "simulate_counts",
]


class ConvergenceError(RuntimeError):
    """An iterative solver stopped without meeting its tolerance.

    The last iterate is kept on ``.last`` for inspection.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


@dataclass
class SurveyDataset:
    """Binomial prevalence records from ``r`` surveys, stacked survey by survey.

    Parameters
    ----------
    survey : array_like of int, shape (N,)
        Zero-based survey index per record; non-decreasing.
    coords : array_like, shape (N, 2)
    m : array_like of int, shape (N,)
        Number of individuals tested.
    y : array_like of int, shape (N,)
        Number of positives.
    covariates : array_like, shape (N, p)
        Explanatory variables; include an intercept column explicitly.
    biased : sequence of bool, shape (r,)
        Surveys whose sampling is potentially biased.
    time : sequence of int, shape (r,), optional
        Time period of each survey. Surveys sharing a period share one
        prevalence field. Defaults to a single period.
    covariate_names : sequence of str, optional
    """

    survey: np.ndarray
    coords: np.ndarray
    m: np.ndarray
    y: np.ndarray
    covariates: np.ndarray
    biased: tuple
    time: tuple = None
    covariate_names: tuple = None

    def __post_init__(self):
        self.survey = np.asarray(self.survey, dtype=int)
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        self.m = np.asarray(self.m, dtype=int)
        self.y = np.asarray(self.y, dtype=int)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        self.covariates = cov
        self.biased = tuple(bool(b) for b in self.biased)
        r = len(self.biased)
        self.time = tuple(int(t) for t in self.time) if self.time is not None else (1,) * r
        if self.covariate_names is None:
            self.covariate_names = tuple(f"d{k + 1}" for k in range(cov.shape[1]))
        self.covariate_names = tuple(self.covariate_names)
        self._validate()

    def _validate(self):
        N = self.survey.size
        r = len(self.biased)
        for name in ("coords", "m", "y", "covariates"):
            if getattr(self, name).shape[0] != N:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {N}")
        if len(self.time) != r:
            raise ValueError("need one time index per survey")
        if len(self.covariate_names) != self.covariates.shape[1]:
            raise ValueError("covariate_names does not match covariate columns")
        if N == 0:
            raise ValueError("empty dataset")
        if np.any(np.diff(self.survey) < 0):
            raise ValueError("records must be ordered by survey")
        present = np.unique(self.survey)
        if not np.array_equal(present, np.arange(r)):
            raise ValueError(f"survey indices must cover 0..{r - 1} contiguously")
        if np.any(self.m < 1):
            bad = int(np.flatnonzero(self.m < 1)[0])
            raise ValueError(f"record {bad}: denominator must be >= 1")
        bad = np.flatnonzero((self.y < 0) | (self.y > self.m))
        if bad.size:
            raise ValueError(f"record {int(bad[0])}: count outside [0, m]")
        if not np.all(np.isfinite(self.coords)) or not np.all(np.isfinite(self.covariates)):
            raise ValueError("coordinates and covariates must be finite")
        if all(self.biased):
            raise ValueError("at least one survey must be unbiased (gold standard)")

    @property
    def n_surveys(self):
        return len(self.biased)

    @property
    def sizes(self):
        return np.bincount(self.survey, minlength=self.n_surveys)

    def __len__(self):
        return self.survey.size

    def subset(self, surveys):
        """Keep only the listed surveys, renumbered in the given order."""
        surveys = list(surveys)
        parts = [np.flatnonzero(self.survey == s) for s in surveys]
        idx = np.concatenate(parts)
        new_survey = np.repeat(np.arange(len(surveys)), [p.size for p in parts])
        return SurveyDataset(
            survey=new_survey, coords=self.coords[idx], m=self.m[idx], y=self.y[idx],
            covariates=self.covariates[idx],
            biased=tuple(self.biased[s] for s in surveys),
            time=tuple(self.time[s] for s in surveys),
            covariate_names=self.covariate_names,
        )

    def pooled(self):
        """All records treated as one unbiased survey."""
        return SurveyDataset(
            survey=np.zeros(len(self), dtype=int), coords=self.coords, m=self.m,
            y=self.y, covariates=self.covariates, biased=(False,), time=(self.time[0],),
            covariate_names=self.covariate_names,
        )

    def with_counts(self, y):
        return SurveyDataset(
            survey=self.survey, coords=self.coords, m=self.m, y=y,
            covariates=self.covariates, biased=self.biased, time=self.time,
            covariate_names=self.covariate_names,
        )


@dataclass(frozen=True)
class ModelSpec:
    """Model structure: bias set, time periods and which parameters exist.

    Parameters
    ----------
    biased : tuple of bool
        Bias flag per survey.
    time : tuple of int, optional
        Time period per survey; defaults to a single period.
    bias_covariates : tuple of int, optional
        Covariate columns entering the bias term of biased surveys. ``None``
        means every column.
    nugget : bool
        Whether the model has nugget effects ``Z_ij``. If False, ``tau2 = 0``.
    shared_nugget : bool
        One nugget variance common to all surveys.
    """

    biased: tuple
    time: tuple = None
    bias_covariates: tuple = None
    nugget: bool = True
    shared_nugget: bool = False

    def __post_init__(self):
        object.__setattr__(self, "biased", tuple(bool(b) for b in self.biased))
        t = self.time if self.time is not None else (1,) * len(self.biased)
        object.__setattr__(self, "time", tuple(int(v) for v in t))
        if self.bias_covariates is not None:
            object.__setattr__(self, "bias_covariates",
                               tuple(int(v) for v in self.bias_covariates))
        if len(self.time) != len(self.biased):
            raise ValueError("need one time index per survey")
        if all(self.biased):
            raise ValueError("at least one survey must be unbiased (gold standard)")

    @classmethod
    def from_dataset(cls, data: SurveyDataset, **kw):
        return cls(biased=data.biased, time=data.time, **kw)

    @property
    def r(self):
        return len(self.biased)

    @property
    def biased_surveys(self):
        return [i for i, b in enumerate(self.biased) if b]

    @property
    def periods(self):
        return sorted(set(self.time))

    @property
    def alpha_pairs(self):
        return list(combinations(self.periods, 2))

    def n_bias_columns(self, p):
        return p if self.bias_covariates is None else len(self.bias_covariates)

    def n_beta(self, p):
        return p + len(self.biased_surveys) * self.n_bias_columns(p)

    # -- psi layout -------------------------------------------------------
    @property
    def psi_names(self):
        names = [f"nu2_ratio_{i + 1}" for i in self.biased_surveys]
        if self.nugget:
            if self.shared_nugget:
                names.append("tau2_ratio")
            else:
                names += [f"tau2_ratio_{i + 1}" for i in range(self.r)]
        names.append("phi")
        names += [f"delta_{i + 1}" for i in self.biased_surveys]
        names += [f"alpha_{a}_{b}" for a, b in self.alpha_pairs]
        return names

    @property
    def psi_kinds(self):
        """Per psi entry: 'ratio', 'range' or 'alpha'."""
        kinds = ["ratio"] * len(self.biased_surveys)
        if self.nugget:
            kinds += ["ratio"] * (1 if self.shared_nugget else self.r)
        kinds += ["range"] * (1 + len(self.biased_surveys))
        kinds += ["alpha"] * len(self.alpha_pairs)
        return kinds

    def alpha_matrix(self, pair_values):
        """Survey-level cross-correlation matrix from per-period-pair values."""
        lookup = dict(zip(self.alpha_pairs, np.asarray(pair_values, dtype=float)))
        A = np.ones((self.r, self.r))
        for i in range(self.r):
            for k in range(self.r):
                ti, tk = self.time[i], self.time[k]
                if ti != tk:
                    A[i, k] = lookup[(min(ti, tk), max(ti, tk))]
        return A

    def period_alpha_matrix(self, pair_values):
        P = self.periods
        A = np.eye(len(P))
        for (a, b), v in zip(self.alpha_pairs, np.asarray(pair_values, dtype=float)):
            A[P.index(a), P.index(b)] = A[P.index(b), P.index(a)] = v
        return A

    def cov_from_psi(self, sigma2, psi):
        """CovParams from ``sigma2`` and a psi vector (``V = sigma2 V(psi)``)."""
        psi = np.asarray(psi, dtype=float)
        k = 0
        nu2 = np.zeros(self.r)
        delta = np.ones(self.r)
        nb = len(self.biased_surveys)
        nu2[self.biased_surveys] = sigma2 * psi[k:k + nb]
        k += nb
        tau2 = np.zeros(self.r)
        if self.nugget:
            if self.shared_nugget:
                tau2[:] = sigma2 * psi[k]
                k += 1
            else:
                tau2[:] = sigma2 * psi[k:k + self.r]
                k += self.r
        phi = psi[k]
        k += 1
        delta[self.biased_surveys] = psi[k:k + nb]
        k += nb
        alpha = self.alpha_matrix(psi[k:])
        return CovParams(sigma2=sigma2, nu2=nu2, tau2=tau2, phi=phi, delta=delta, alpha=alpha)

    def psi_from_cov(self, cov: CovParams):
        s2 = cov.sigma2
        if s2 <= 0:
            raise ValueError("psi is undefined when sigma2 is zero")
        out = [cov.nu2[i] / s2 for i in self.biased_surveys]
        if self.nugget:
            if self.shared_nugget:
                out.append(cov.tau2[0] / s2)
            else:
                out += list(cov.tau2 / s2)
        out.append(cov.phi)
        out += [cov.delta[i] for i in self.biased_surveys]
        first = {t: self.time.index(t) for t in self.periods}
        out += [cov.alpha[first[a], first[b]] for a, b in self.alpha_pairs]
        return np.asarray(out, dtype=float)

    def alpha_valid(self, pair_values):
        """True when the period-level cross-correlation matrix is positive
        definite."""
        if not self.alpha_pairs:
            return True
        A = self.period_alpha_matrix(pair_values)
        try:
            linalg.cholesky(A, lower=True)
        except linalg.LinAlgError:
            return False
        return True

    def beta_names(self, p):
        return [f"beta{k + 1}" for k in range(self.n_beta(p))]

    def natural_names(self, p):
        """Reporting order: regression, sigma2, tau2, nu2, alpha, phi, delta."""
        names = self.beta_names(p) + ["sigma2"]
        if self.nugget:
            names += ["tau2"] if self.shared_nugget else [f"tau2_{i + 1}" for i in range(self.r)]
        nb = self.biased_surveys
        names += ["nu2"] if len(nb) == 1 else [f"nu2_{i + 1}" for i in nb]
        names += ["alpha"] if len(self.alpha_pairs) == 1 else \
            [f"alpha_{a}_{b}" for a, b in self.alpha_pairs]
        names.append("phi")
        names += ["delta"] if len(nb) == 1 else [f"delta_{i + 1}" for i in nb]
        return names

    def natural_values(self, params: "ParamSet"):
        c = params.cov
        vals = list(params.beta) + [c.sigma2]
        if self.nugget:
            vals += [c.tau2[0]] if self.shared_nugget else list(c.tau2)
        vals += [c.nu2[i] for i in self.biased_surveys]
        vals += list(self.psi_from_cov(c)[len(self.psi_kinds) - len(self.alpha_pairs):])
        vals.append(c.phi)
        vals += [c.delta[i] for i in self.biased_surveys]
        return np.asarray(vals, dtype=float)


@dataclass(frozen=True)
class ParamSet:
    """Regression coefficients and covariance parameters.

    ``beta`` holds the shared coefficients first, then the bias-term
    coefficients of each biased survey in survey order.
    """

    beta: np.ndarray
    cov: CovParams = field(repr=True)

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.beta, dtype=float)).copy()
        if not np.all(np.isfinite(b)):
            raise ValueError("beta must be finite")
        b.flags.writeable = False
        object.__setattr__(self, "beta", b)


def build_design_matrix(data: SurveyDataset, bias_covariates=None):
    """Stacked design matrix.

    Shared columns carry ``d(x_ij)`` on every row; each biased survey adds a
    block of bias columns that is non-zero only on that survey's rows. With
    ``r = 2`` and survey 2 biased this is ``[[D1, 0], [D2, D2]]``.

    Parameters
    ----------
    data : SurveyDataset
    bias_covariates : sequence of int, optional
        Columns of ``data.covariates`` entering the bias terms; the rest are
        masked out. ``None`` keeps all of them.
    """
    Dfull = data.covariates
    N, p = Dfull.shape
    cols = list(range(p)) if bias_covariates is None else list(bias_covariates)
    if any(c < 0 or c >= p for c in cols):
        raise ValueError(f"bias covariate index out of range for p={p}")
    blocks = [Dfull]
    for i, b in enumerate(data.biased):
        if not b:
            continue
        block = np.zeros((N, len(cols)))
        rows = data.survey == i
        block[rows] = Dfull[np.ix_(rows, cols)]
        blocks.append(block)
    return np.hstack(blocks)


def binomial_loglik(y, m, t):
    """Binomial log-likelihood with logistic link, summed over records."""
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    t = np.asarray(t, dtype=float)
    if y.shape != t.shape or m.shape != t.shape:
        raise ValueError("y, m and t must have the same shape")
    logc = gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)
    return float(np.sum(y * log_expit(t) + (m - y) * log_expit(-t) + logc))


def loglik_derivs(y, m, t):
    """Gradient and negative second derivative (diagonal) of
    :func:`binomial_loglik` with respect to ``t``."""
    p = expit(t)
    return y - m * p, m * p * (1.0 - p)


def empirical_lambda(y, m, clamp=0.5):
    """Diagonal of the plug-in curvature ``y (1 - y/m)``.

    Counts are clamped to ``[clamp, m - clamp]`` first so that records with
    ``y = 0`` or ``y = m`` still contribute curvature.
    """
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    yc = np.clip(y, clamp, m - clamp)
    return yc * (1.0 - yc / m)


def find_mode(y, m, mean, V, max_iter=100, tol=1e-6):
    """Mode of ``h(t | mean, V) f(y | t)`` by damped Newton iterations.

    Raises
    ------
    ConvergenceError
        With the last iterate attached, if the gradient tolerance
        ``tol * sqrt(n)`` is not met within `max_iter` iterations.
    """
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    mean = np.asarray(mean, dtype=float)
    n = mean.size
    cf = linalg.cho_factor(V, lower=True)
    Vinv = linalg.cho_solve(cf, np.eye(n))

    def objective(t):
        r = t - mean
        return -0.5 * r @ Vinv @ r + binomial_loglik(y, m, t)

    t = mean.copy()
    f = objective(t)
    gnorm = np.inf
    for _ in range(max_iter):
        score, w = loglik_derivs(y, m, t)
        g = -Vinv @ (t - mean) + score
        gnorm = np.linalg.norm(g)
        if gnorm < tol * np.sqrt(n):
            return t
        H = Vinv.copy()
        H[np.diag_indices(n)] += w
        step = linalg.cho_solve(linalg.cho_factor(H, lower=True), g)
        if np.linalg.norm(step) < 1e-12 * (1.0 + np.linalg.norm(t)):
            return t
        s = 1.0
        while s > 1e-10:
            t_new = t + s * step
            f_new = objective(t_new)
            if f_new >= f:
                break
            s *= 0.5
        t, f = t_new, f_new
    raise ConvergenceError(f"mode search did not converge (|grad|={gnorm:.3g})", last=t)


def logistic_regression(y, m, X, max_iter=50):
    """Non-spatial binomial logistic regression by Newton-Raphson.

    Returns the coefficient vector and a convergence flag. Under complete
    separation the coefficients drift towards infinity and the flag is
    False.
    """
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    X = np.asarray(X, dtype=float)
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        score, w = loglik_derivs(y, m, eta)
        g = X.T @ score
        H = X.T @ (w[:, None] * X) + 1e-10 * np.eye(X.shape[1])
        step = np.linalg.solve(H, g)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            return beta, True
    return beta, False


def simulate_counts(data: SurveyDataset, spec: ModelSpec, params: ParamSet, rng):
    """Draw ``T ~ MVN(D beta, V(theta))`` over the design of `data`, then
    binomial counts given ``T``.

    Returns
    -------
    y : ndarray of int
    t : ndarray
        The latent linear predictor that generated `y`.
    """
    from .covariance import CovarianceStructure, NotPositiveDefinite, factorize

    D = build_design_matrix(data, spec.bias_covariates)
    if params.beta.size != D.shape[1]:
        raise ValueError(f"beta has length {params.beta.size}, the design matrix has "
                         f"{D.shape[1]} columns")
    V = CovarianceStructure(data.coords, data.survey, spec.biased).matrix(params.cov)
    try:
        L = factorize(V)
    except NotPositiveDefinite:
        # singular but PSD, e.g. coincident sites without a nugget
        w, U = np.linalg.eigh(V)
        if w.min() < -1e-8 * max(1.0, w.max()):
            raise
        L = U * np.sqrt(np.clip(w, 0.0, None))
    t = D @ params.beta + L @ rng.standard_normal(len(data))
    y = rng.binomial(data.m, expit(t))
    return y, t
