"""
Exponential correlation, joint covariance assembly and Cholesky factorization
for the stacked latent vector of a multi-survey geostatistical model.

Coordinates are treated as planar and distances are Euclidean, in whatever
units the locations are supplied in. Project geographic coordinates upstream
if that matters for the application.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

__all__ = [
    "NotPositiveDefinite",
    "CovParams",
    "corr",
    "CovarianceStructure",
    "build_joint_covariance",
    "factorize",
]


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a covariance matrix has no Cholesky factor.

    For covariance parameters this is an expected outcome (some
    cross-correlation combinations are not valid when there are more than
    two time periods) and callers translate it into a zero likelihood.
    """


def corr(u, range_):
    """Exponential correlation ``exp(-u / range_)``.

    Parameters
    ----------
    u : float or array_like
        Non-negative distances.
    range_ : float
        Positive range parameter, in the same units as `u`.
    """
    u = np.asarray(u, dtype=float)
    range_ = float(range_)
    if not np.isfinite(range_) or range_ <= 0:
        raise ValueError(f"range must be positive and finite, got {range_}")
    if not np.all(np.isfinite(u)) or np.any(u < 0):
        raise ValueError("distances must be finite and non-negative")
    out = np.exp(-u / range_)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CovParams:
    """Covariance parameters for ``r`` surveys.

    Parameters
    ----------
    sigma2 : float
        Variance of the prevalence fields ``S_i``. Zero is accepted so that
        degenerate truths can be simulated; fitting needs it positive.
    nu2 : array_like, shape (r,)
        Bias-field variances. Entries for unbiased surveys are ignored.
    tau2 : array_like, shape (r,)
        Nugget variances, one per survey.
    phi : float
        Range of the prevalence fields.
    delta : array_like, shape (r,)
        Bias-field ranges. Entries for unbiased surveys are ignored.
    alpha : array_like, shape (r, r)
        Survey-level cross-correlation of the prevalence fields. Unit
        diagonal; surveys taken at the same time carry ``alpha = 1``.
    """

    sigma2: float
    nu2: np.ndarray
    tau2: np.ndarray
    phi: float
    delta: np.ndarray
    alpha: np.ndarray = field(default=None)

    def __post_init__(self):
        nu2 = np.atleast_1d(np.asarray(self.nu2, dtype=float))
        r = nu2.size
        tau2 = np.broadcast_to(np.asarray(self.tau2, dtype=float), (r,)).copy()
        delta = np.broadcast_to(np.asarray(self.delta, dtype=float), (r,)).copy()
        if self.alpha is None:
            alpha = np.ones((r, r))
        else:
            alpha = np.asarray(self.alpha, dtype=float).reshape(r, r).copy()
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "phi", float(self.phi))
        object.__setattr__(self, "nu2", nu2)
        object.__setattr__(self, "tau2", tau2)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "alpha", alpha)
        for arr in (nu2, tau2, delta, alpha):
            arr.flags.writeable = False
        self.validate()

    @property
    def n_surveys(self):
        return self.nu2.size

    def validate(self):
        if not (np.isfinite(self.sigma2) and self.sigma2 >= 0):
            raise ValueError(f"sigma2 must be non-negative, got {self.sigma2}")
        if not (np.isfinite(self.phi) and self.phi > 0):
            raise ValueError(f"phi must be positive, got {self.phi}")
        if np.any(~np.isfinite(self.nu2)) or np.any(self.nu2 < 0):
            raise ValueError("nu2 entries must be non-negative")
        if np.any(~np.isfinite(self.tau2)) or np.any(self.tau2 < 0):
            raise ValueError("tau2 entries must be non-negative")
        if np.any(~(self.delta > 0)) or np.any(~np.isfinite(self.delta)):
            raise ValueError("delta entries must be positive")
        a = self.alpha
        if not np.array_equal(a, a.T):
            raise ValueError("alpha must be symmetric")
        if not np.all(np.diag(a) == 1.0):
            raise ValueError("alpha must have a unit diagonal")
        if np.any(np.abs(a) > 1):
            raise ValueError("alpha entries must lie in [-1, 1]")

    def replace(self, **changes):
        kw = dict(sigma2=self.sigma2, nu2=self.nu2, tau2=self.tau2,
                  phi=self.phi, delta=self.delta, alpha=self.alpha)
        kw.update(changes)
        return CovParams(**kw)


class CovarianceStructure:
    """Precomputed geometry for repeated assembly of ``V(theta)``.

    Distances between every pair of stacked locations are computed once;
    each call to :meth:`matrix` only exponentiates and combines them, which
    is what an optimizer over the covariance parameters needs.

    Parameters
    ----------
    coords : ndarray, shape (n, 2)
        Stacked locations, survey by survey.
    survey : ndarray of int, shape (n,)
        Zero-based survey index of each row.
    biased : sequence of bool, shape (r,)
        Which surveys carry a bias field.
    """

    def __init__(self, coords, survey, biased):
        coords = np.asarray(coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError("coords must have shape (n, 2)")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coordinates must be finite")
        self.coords = coords
        self.survey = np.asarray(survey, dtype=int)
        self.biased = np.asarray(biased, dtype=bool)
        self.n = coords.shape[0]
        self.r = self.biased.size
        self.dist = cdist(coords, coords)
        same = self.survey[:, None] == self.survey[None, :]
        self._bias_blocks = [
            (i, np.ix_(self.survey == i, self.survey == i))
            for i in range(self.r) if self.biased[i]
        ]
        self._same = same

    def matrix(self, params: CovParams):
        """Return the dense joint covariance matrix for `params`."""
        if params.n_surveys != self.r:
            raise ValueError("parameter dimension does not match survey count")
        s = self.survey
        amat = params.alpha[s[:, None], s[None, :]]
        V = params.sigma2 * amat * np.exp(-self.dist / params.phi)
        for i, idx in self._bias_blocks:
            if params.nu2[i] > 0:
                V[idx] += params.nu2[i] * np.exp(-self.dist[idx] / params.delta[i])
        V[np.diag_indices(self.n)] += params.tau2[s]
        return V

    def cross(self, params: CovParams, coords, target_survey, include_nugget=False):
        """Covariance between the stacked data vector and ``S_target`` (plus
        optionally the nugget ``Z_target``) at new locations.

        A new location coinciding exactly with a data location of the target
        survey shares that record's nugget when `include_nugget` is set.
        """
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        d = cdist(self.coords, coords)
        a = params.alpha[self.survey, target_survey]
        C = params.sigma2 * a[:, None] * np.exp(-d / params.phi)
        if include_nugget:
            hit = (d == 0) & (self.survey == target_survey)[:, None]
            C[hit] += params.tau2[target_survey]
        return C

    def target(self, params: CovParams, coords, target_survey, include_nugget=False):
        """Covariance matrix of ``S_target`` (plus optional nugget) at new
        locations."""
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        d = cdist(coords, coords)
        V = params.sigma2 * np.exp(-d / params.phi)
        if include_nugget:
            V[d == 0] += params.tau2[target_survey]
        return V


def build_joint_covariance(params: CovParams, locations, biased):
    """Assemble ``V(theta)`` for the stacked latent vector.

    Parameters
    ----------
    params : CovParams
    locations : list of array_like
        One ``(n_i, 2)`` array of coordinates per survey.
    biased : sequence of bool
        Bias flag per survey.

    Returns
    -------
    ndarray, shape (sum n_i, sum n_i)
        Block ``(i, i)`` is ``sigma2 R_ii(phi) + nu2_i R_b(delta_i) [i biased]
        + tau2_i I``; block ``(i, k)`` is ``sigma2 alpha_ik R_ik(phi)``.
    """
    locs = [np.asarray(x, dtype=float).reshape(-1, 2) for x in locations]
    if len(locs) != len(biased):
        raise ValueError("need one location array per survey")
    coords = np.vstack(locs)
    survey = np.repeat(np.arange(len(locs)), [len(x) for x in locs])
    return CovarianceStructure(coords, survey, biased).matrix(params)


def factorize(V, jitter=0.0):
    """Lower Cholesky factor of `V`.

    Parameters
    ----------
    V : ndarray
        Symmetric matrix.
    jitter : float, optional
        Relative diagonal inflation, ``jitter * mean(diag(V))``. Off by
        default; only meant for rescuing numerically borderline prediction
        covariances.

    Raises
    ------
    NotPositiveDefinite
        If `V` is not numerically positive definite.
    """
    V = np.asarray(V, dtype=float)
    if jitter:
        V = V + jitter * np.mean(np.diag(V)) * np.eye(V.shape[0])
    try:
        L = linalg.cholesky(V, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.isfinite(L)):
        raise NotPositiveDefinite("non-finite Cholesky factor")
    return L
