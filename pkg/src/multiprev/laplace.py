"""
Laplace approximation to the marginal likelihood, used to find starting
values close to the maximum likelihood estimate before the Monte Carlo
refreshes begin.
"""
from __future__ import annotations

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, gammaln

from .covariance import CovarianceStructure
from .model import ModelSpec, ParamSet, SurveyDataset, build_design_matrix

__all__ = ["laplace_loglik", "laplace_fit"]


def laplace_loglik(y, m, mean, V, a0=None, tol=1e-9, max_iter=100):
    """Laplace approximation of ``log int h(t | mean, V) f(y | t) dt``.

    Newton iterations on ``f = t - mean`` written in terms of
    ``a = V^{-1} f`` so that ``V`` is never inverted.

    Parameters
    ----------
    y, m : ndarray
    mean : ndarray
    V : ndarray
    a0 : ndarray, optional
        Warm start for ``a``.

    Returns
    -------
    loglik : float
    a : ndarray
        Final ``V^{-1} (t_hat - mean)``, reusable as a warm start.
    """
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    n = mean.size
    a = np.zeros(n) if a0 is None else np.asarray(a0, dtype=float)
    f = V @ a

    def psi(f, a):
        t = mean + f
        return -0.5 * a @ f + np.sum(y * t - m * np.logaddexp(0.0, t))

    obj = psi(f, a)
    for _ in range(max_iter):
        p = expit(mean + f)
        W = m * p * (1.0 - p)
        sw = np.sqrt(W)
        L = linalg.cholesky(np.eye(n) + sw[:, None] * V * sw[None, :], lower=True)
        b = W * f + (y - m * p)
        c = linalg.solve_triangular(L, sw * (V @ b), lower=True)
        a_new = b - sw * linalg.solve_triangular(L.T, c, lower=False)
        f_new = V @ a_new
        obj_new = psi(f_new, a_new)
        s = 1.0
        while obj_new < obj and s > 1e-8:
            s *= 0.5
            a_try = a + s * (a_new - a)
            f_try = f + s * (f_new - f)
            obj_new = psi(f_try, a_try)
            a_new, f_new = a_try, f_try
        done = abs(obj_new - obj) < tol * (1.0 + abs(obj))
        a, f, obj = a_new, f_new, obj_new
        if done:
            break
    p = expit(mean + f)
    sw = np.sqrt(m * p * (1.0 - p))
    L = linalg.cholesky(np.eye(n) + sw[:, None] * V * sw[None, :], lower=True)
    logc = np.sum(gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1))
    return float(obj + logc - np.sum(np.log(np.diag(L)))), a


def laplace_fit(data: SurveyDataset, spec: ModelSpec, init: ParamSet, bounds=None):
    """Maximize the Laplace likelihood over ``(beta, log sigma2,
    transformed psi)``, starting from `init`.

    Returns
    -------
    ParamSet, float
        Estimate and its approximate log likelihood.
    """
    from .mcml import _alpha_values, _pack, _unpack

    D = build_design_matrix(data, spec.bias_covariates)
    S = CovarianceStructure(data.coords, data.survey, spec.biased)
    k = D.shape[1]
    u0 = _pack(init, spec)
    state = {"a": None}

    def negll(u):
        try:
            p = _unpack(u, k, spec)
            if not spec.alpha_valid(_alpha_values(spec, p.cov)):
                return 1e10
            val, a = laplace_loglik(data.y, data.m, D @ p.beta, S.matrix(p.cov), state["a"])
        except (np.linalg.LinAlgError, ValueError):
            return 1e10
        state["a"] = a
        return -val

    def jac(u):
        g = np.empty_like(u)
        for i in range(u.size):
            e = np.zeros_like(u)
            e[i] = 1e-5
            g[i] = (negll(u + e) - negll(u - e)) / 2e-5
        return g

    if bounds is not None:
        lo = np.concatenate([np.full(k, -50.0), [np.log(1e-4)], bounds[0]])
        hi = np.concatenate([np.full(k, 50.0), [np.log(1e3)], bounds[1]])
        u0 = np.clip(u0, lo, hi)
        bnds = list(zip(lo, hi))
    else:
        bnds = None
    res = optimize.minimize(negll, u0, jac=jac, method="L-BFGS-B", bounds=bnds)
    return _unpack(res.x, k, spec), -float(res.fun)
