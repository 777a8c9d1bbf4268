"""
Spatial prediction of prevalence at unsampled locations.

Given conditional samples ``t_h`` of the stacked linear predictor, the
target ``T*`` at the grid is drawn from its Gaussian conditional law

    T* | T = t_h ~ MVN(D* beta + C' V^{-1} (t_h - D beta), V* - C' V^{-1} C)

and mapped to prevalence with the inverse logit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import expit, logit

from .covariance import CovarianceStructure, NotPositiveDefinite, factorize
from .model import ModelSpec, ParamSet, SurveyDataset, build_design_matrix
from .sampler import ChainConfig, run_chain

__all__ = [
    "PredictionGrid",
    "PredictiveSurface",
    "conditional_mvn_params",
    "sample_predictive_surfaces",
    "predict",
    "summarize",
]

VAR_TOL = 1e-10


@dataclass
class PredictionGrid:
    """Prediction locations.

    Parameters
    ----------
    coords : array_like, shape (q, 2)
    covariates : array_like, shape (q, p)
        Same columns as the data covariates, intercept included.
    target_survey : int
        Zero-based survey whose prevalence field ``S_i`` is predicted. Bias
        fields and bias coefficients are never part of the target.
    include_nugget : bool
        Add the nugget ``Z`` of the target survey to the target. Turn it off
        to map the smooth surface alone.
    """

    coords: np.ndarray
    covariates: np.ndarray
    target_survey: int = 0
    include_nugget: bool = True

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        self.covariates = cov
        if cov.shape[0] != self.coords.shape[0]:
            raise ValueError("need one covariate row per grid location")
        if not np.all(np.isfinite(cov)) or not np.all(np.isfinite(self.coords)):
            raise ValueError("grid coordinates and covariates must be finite")

    def __len__(self):
        return self.coords.shape[0]


@dataclass
class PredictiveSurface:
    """Predictive samples at the grid.

    Attributes
    ----------
    coords : ndarray, shape (q, 2)
    latent : ndarray, shape (m, q)
        Samples of the target ``T*`` on the logit scale.
    offset : ndarray, shape (q,)
        ``D* beta``, so that ``latent - offset`` are samples of the random
        effect alone.
    prevalence : ndarray, shape (m, q)
        ``expit(latent)``, computed if not given.
    """

    coords: np.ndarray
    latent: np.ndarray
    offset: np.ndarray
    prevalence: np.ndarray = None

    def __post_init__(self):
        if self.prevalence is None:
            self.prevalence = expit(self.latent)

    @classmethod
    def from_prevalence(cls, coords, prevalence):
        """Wrap prevalence samples from elsewhere, e.g. for :func:`summarize`."""
        P = np.atleast_2d(np.asarray(prevalence, dtype=float))
        if np.any((P <= 0) | (P >= 1)):
            raise ValueError("prevalence samples must lie in (0, 1)")
        return cls(np.asarray(coords, dtype=float).reshape(-1, 2), logit(P),
                   np.zeros(P.shape[1]), P)

    @property
    def random_effect(self):
        return self.latent - self.offset


class _Conditioner:
    """Data-side factorization shared by every latent sample and tile."""

    def __init__(self, data: SurveyDataset, spec: ModelSpec, params: ParamSet):
        D = build_design_matrix(data, spec.bias_covariates)
        if D.shape[1] != params.beta.size:
            raise ValueError("beta does not match the design matrix")
        self.p = data.covariates.shape[1]
        self.params = params
        self.mean = D @ params.beta
        self.structure = CovarianceStructure(data.coords, data.survey, spec.biased)
        self.L = factorize(self.structure.matrix(params.cov))

    def moments(self, t, grid: PredictionGrid, tile_size=None):
        """Conditional means (one row per sample) and covariance at the grid."""
        if grid.covariates.shape[1] != self.p:
            raise ValueError("grid covariates do not match the data covariates")
        if not 0 <= grid.target_survey < self.params.cov.n_surveys:
            raise ValueError("target_survey out of range")
        t = np.atleast_2d(np.asarray(t, dtype=float))
        if t.shape[1] != self.mean.size:
            raise ValueError("latent sample length does not match the data")
        W = linalg.solve_triangular(self.L, (t - self.mean).T, lower=True)
        q = len(grid)
        offset = grid.covariates @ self.params.beta[: self.p]
        tile = q if not tile_size else int(tile_size)
        blocks = []
        for a in range(0, q, tile):
            C = self.structure.cross(self.params.cov, grid.coords[a:a + tile],
                                     grid.target_survey, grid.include_nugget)
            blocks.append(linalg.solve_triangular(self.L, C, lower=True))
        A = np.hstack(blocks)
        mean = offset + W.T @ A
        Vs = self.structure.target(self.params.cov, grid.coords, grid.target_survey,
                                   grid.include_nugget)
        cov = Vs - A.T @ A
        return mean, 0.5 * (cov + cov.T), offset


def _clean_covariance(cov):
    d = np.diag(cov).copy()
    if np.any(d < -VAR_TOL):
        j = int(np.argmin(d))
        raise NotPositiveDefinite(f"negative conditional variance {d[j]:.3g} at grid point {j}")
    zero = d <= VAR_TOL
    if zero.any():
        cov = cov.copy()
        cov[zero, :] = 0.0
        cov[:, zero] = 0.0
    return cov, zero


def conditional_mvn_params(t, grid: PredictionGrid, data: SurveyDataset, spec: ModelSpec,
                           params: ParamSet, tile_size=None):
    """Conditional mean and covariance of the target given ``T = t``.

    Parameters
    ----------
    t : array_like, shape (n,) or (m, n)
        Latent sample(s) on the linear-predictor scale.
    grid : PredictionGrid
    data, spec, params
        Fitted model.
    tile_size : int, optional
        Process the grid in blocks of this many points when forming the
        cross-covariances. Results agree with the untiled computation up to
        rounding.

    Returns
    -------
    mean : ndarray, shape (q,) or (m, q)
    cov : ndarray, shape (q, q)
        Variances within ``1e-10`` of zero are set to exactly zero together
        with their covariances.

    Raises
    ------
    NotPositiveDefinite
        If the data covariance is not positive definite or a conditional
        variance is below ``-1e-10``.
    """
    cond = _Conditioner(data, spec, params)
    mean, cov, _ = cond.moments(t, grid, tile_size)
    cov, _ = _clean_covariance(cov)
    return (mean[0] if np.ndim(t) == 1 else mean), cov


def _root(cov):
    """Lower factor ``R`` with ``R R' = cov`` for a PSD matrix whose
    zero-variance rows are exactly zero."""
    cov, zero = _clean_covariance(cov)
    R = np.zeros_like(cov)
    keep = np.flatnonzero(~zero)
    if keep.size:
        sub = cov[np.ix_(keep, keep)]
        for jitter in (0.0, 1e-12, 1e-10, 1e-8):
            try:
                R[np.ix_(keep, keep)] = factorize(sub, jitter)
                break
            except NotPositiveDefinite:
                continue
        else:
            raise NotPositiveDefinite("conditional covariance could not be factorized")
    return R


def sample_predictive_surfaces(samples, grid: PredictionGrid, data: SurveyDataset,
                               spec: ModelSpec, params: ParamSet, seed=None, tile_size=None):
    """One conditional draw of the target per latent sample.

    Parameters
    ----------
    samples : array_like, shape (m, n)
        Conditional samples of the stacked linear predictor.
    grid : PredictionGrid
    data, spec, params
        Fitted model.
    seed : int or numpy.random.Generator, optional
    tile_size : int, optional
        See :func:`conditional_mvn_params`.

    Returns
    -------
    PredictiveSurface
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] < 1:
        raise ValueError("need at least one latent sample")
    rng = np.random.default_rng(seed)
    cond = _Conditioner(data, spec, params)
    mean, cov, offset = cond.moments(samples, grid, tile_size)
    R = _root(cov)
    z = rng.standard_normal((samples.shape[0], len(grid)))
    return PredictiveSurface(coords=grid.coords, latent=mean + z @ R.T, offset=offset)


def predict(result, grid: PredictionGrid, chain: ChainConfig = None, seed=None,
            tile_size=None):
    """Predictive surface from a :class:`~multiprev.mcml.FitResult`.

    Conditional samples are drawn afresh at the estimate (the samples kept
    in the fit were drawn at the previous reference parameters).
    """
    data = result.importance.data
    spec = result.spec
    params = result.params
    chain = chain if chain is not None else ChainConfig()
    rng = np.random.default_rng(seed)
    D = build_design_matrix(data, spec.bias_covariates)
    V = CovarianceStructure(data.coords, data.survey, spec.biased).matrix(params.cov)
    res = run_chain(data.y, data.m, D @ params.beta, V, chain, rng=rng)
    return sample_predictive_surfaces(res.samples, grid, data, spec, params, rng, tile_size)


def _fmt(v):
    return f"{v:g}"


def summarize(surface: PredictiveSurface, thresholds=(), quantiles=(0.025, 0.5, 0.975)):
    """Pointwise summaries of predictive prevalence.

    Quantiles use linear interpolation between order statistics (the
    ``'linear'`` rule of :func:`numpy.quantile`). Exceedance probabilities
    are the fractions of samples strictly above each threshold.

    Returns
    -------
    pandas.DataFrame
        Columns ``x, y, mean``, then ``q<100 * level>`` per quantile and
        ``exceed_<threshold>`` per threshold.
    """
    P = surface.prevalence
    if P.shape[0] < 2:
        raise ValueError("need at least two samples per point")
    out = {"x": surface.coords[:, 0], "y": surface.coords[:, 1], "mean": P.mean(axis=0)}
    for a in quantiles:
        if not 0 <= a <= 1:
            raise ValueError("quantile levels must lie in [0, 1]")
        out[f"q{_fmt(100 * a)}"] = np.quantile(P, a, axis=0, method="linear")
    for c in sorted(float(c) for c in thresholds):
        out[f"exceed_{_fmt(c)}"] = np.mean(P > c, axis=0)
    return pd.DataFrame(out)
