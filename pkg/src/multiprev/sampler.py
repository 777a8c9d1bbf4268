"""
Centred Langevin-Hastings (MALA) sampling of the stacked linear predictor
given binomial data.

The chain runs on ``x = F^{-1} (t - mean)`` where ``F F' = V~`` is the
Cholesky factor of a Gaussian approximation to ``var(T | y)``. In these
coordinates the target is close to a standard normal, so a single scalar
step size works for every component.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .covariance import factorize
from .model import empirical_lambda, find_mode, loglik_derivs

__all__ = [
    "ChainConfig",
    "ChainResult",
    "gaussian_approx",
    "center",
    "uncenter",
    "log_acceptance_ratio",
    "langevin_step",
    "run_chain",
    "chain_diagnostics",
    "diagnostics_table",
]

OPTIMAL_ACCEPT = 0.574


@dataclass(frozen=True)
class ChainConfig:
    """MCMC run settings.

    The defaults reproduce 110000 iterations, a burn-in of 10000 and
    thinning by 20, i.e. 5000 retained samples.

    Attributes
    ----------
    n_iter, burnin, thin : int
    step_size : float or None
        Initial Langevin step ``h``; ``None`` uses ``1.65**2 / n**(1/3)``.
    target_accept : float
        Acceptance rate the step size is tuned towards during burn-in.
    adapt : bool
        Tune ``h`` during burn-in. It is frozen afterwards.
    seed : int or None
    approx : {'laplace', 'literal'}
        ``'laplace'`` uses ``(V^{-1} + Lambda)^{-1}``; ``'literal'`` uses
        ``(V + Lambda)^{-1}``.
    curvature : {'empirical', 'mode'}
        ``Lambda`` from the clamped counts ``y(1 - y/m)`` or from
        ``m p (1 - p)`` at the conditional mode.
    """

    n_iter: int = 110_000
    burnin: int = 10_000
    thin: int = 20
    step_size: float = None
    target_accept: float = OPTIMAL_ACCEPT
    adapt: bool = True
    seed: int = None
    approx: str = "laplace"
    curvature: str = "empirical"

    def __post_init__(self):
        if self.burnin < 0 or self.burnin >= self.n_iter:
            raise ValueError("need 0 <= burnin < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.approx not in ("laplace", "literal"):
            raise ValueError(f"unknown approx {self.approx!r}")
        if self.curvature not in ("empirical", "mode"):
            raise ValueError(f"unknown curvature {self.curvature!r}")

    @property
    def n_samples(self):
        return (self.n_iter - self.burnin) // self.thin

    def replace(self, **kw):
        d = self.__dict__.copy()
        d.update(kw)
        return ChainConfig(**d)


@dataclass
class ChainResult:
    samples: np.ndarray
    acceptance_rate: float
    step_size: float
    mean: np.ndarray
    factor: np.ndarray


def gaussian_approx(V, lam, form="laplace"):
    """Gaussian approximation to ``var(T | y)`` and its Cholesky factor.

    Parameters
    ----------
    V : ndarray
        Prior covariance of ``T``.
    lam : array_like
        Diagonal of the data curvature ``Lambda``.
    form : {'laplace', 'literal'}

    Returns
    -------
    Vt, F : ndarray
        The approximate covariance and its lower Cholesky factor.
    """
    V = np.asarray(V, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("curvature entries must be non-negative")
    n = V.shape[0]
    if form == "laplace":
        # V - V W (I + W V W)^{-1} W V with W = sqrt(Lambda); avoids inverting V
        w = np.sqrt(lam)
        B = np.eye(n) + w[:, None] * V * w[None, :]
        LB = factorize(B)
        G = linalg.solve_triangular(LB, w[:, None] * V, lower=True)
        Vt = V - G.T @ G
    elif form == "literal":
        M = V.copy()
        M[np.diag_indices(n)] += lam
        L = factorize(M)
        Li = linalg.solve_triangular(L, np.eye(n), lower=True)
        Vt = Li.T @ Li
    else:
        raise ValueError(f"unknown form {form!r}")
    Vt = 0.5 * (Vt + Vt.T)
    return Vt, factorize(Vt)


def center(t, mean, F):
    """Map linear-predictor values to centred coordinates."""
    return linalg.solve_triangular(F, (np.asarray(t) - mean).T, lower=True).T


def uncenter(x, mean, F):
    return mean + np.asarray(x) @ F.T


def log_acceptance_ratio(x, x_new, logp, logp_new, grad, grad_new, h):
    """Metropolis-Hastings log ratio for a Langevin move ``x -> x_new``."""
    fwd = x_new - x - 0.5 * h * grad
    bwd = x - x_new - 0.5 * h * grad_new
    return logp_new - logp - (bwd @ bwd - fwd @ fwd) / (2.0 * h)


def langevin_step(x, logp, grad, target, h, rng):
    """One MALA transition.

    Parameters
    ----------
    x : ndarray
        Current state, with its log density `logp` and gradient `grad`.
    target : callable
        ``target(x) -> (logp, grad)``.
    h : float
        Step size; the proposal is ``x + h/2 grad + sqrt(h) xi``.
    rng : numpy.random.Generator

    Returns
    -------
    x, logp, grad, log_ratio, accepted
    """
    x_new = x + 0.5 * h * grad + np.sqrt(h) * rng.standard_normal(x.shape)
    logp_new, grad_new = target(x_new)
    if not np.all(np.isfinite(grad_new)):
        raise FloatingPointError(f"non-finite gradient at proposal {x_new!r}")
    log_ratio = log_acceptance_ratio(x, x_new, logp, logp_new, grad, grad_new, h)
    if np.log(rng.random()) < log_ratio:
        return x_new, logp_new, grad_new, log_ratio, True
    return x, logp, grad, log_ratio, False


def _centred_target(y, m, mean, F, A):
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)

    def target(x):
        t = mean + F @ x
        Ax = A @ x
        logp = -0.5 * x @ Ax + np.sum(y * t - m * np.logaddexp(0.0, t))
        score, _ = loglik_derivs(y, m, t)
        return logp, F.T @ score - Ax

    return target


def run_chain(y, m, mean, V, config: ChainConfig = ChainConfig(), rng=None):
    """Sample ``T | y`` for ``T ~ MVN(mean, V)`` and binomial-logistic ``y``.

    Parameters
    ----------
    y, m : array_like
        Counts and denominators, stacked like `mean`.
    mean : ndarray
        ``D beta`` at the reference parameters.
    V : ndarray
        ``V(theta)`` at the reference parameters.
    config : ChainConfig
    rng : numpy.random.Generator, optional
        Overrides ``config.seed``.

    Returns
    -------
    ChainResult
        ``samples`` has shape ``(config.n_samples, n)`` on the
        linear-predictor scale.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    mean = np.asarray(mean, dtype=float)
    n = mean.size
    L = factorize(V)
    t_hat = find_mode(y, m, mean, V)
    if config.curvature == "empirical":
        lam = empirical_lambda(y, m)
    else:
        lam = loglik_derivs(y, m, t_hat)[1]
    _, F = gaussian_approx(V, lam, config.approx)
    G = linalg.solve_triangular(L, F, lower=True)
    A = G.T @ G
    target = _centred_target(y, m, mean, F, A)

    x = center(t_hat, mean, F)
    logp, grad = target(x)
    h = config.step_size or 1.65 ** 2 / n ** (1.0 / 3.0)
    log_h = np.log(h)
    kept = np.empty((config.n_samples, n))
    k = 0
    n_acc = 0
    for it in range(config.n_iter):
        x, logp, grad, lr, acc = langevin_step(x, logp, grad, target, h, rng)
        if it < config.burnin:
            if config.adapt:
                a = np.exp(min(0.0, lr))
                log_h += (a - config.target_accept) / (it + 1) ** 0.6
                log_h = min(log_h, np.log(10.0))
                h = np.exp(log_h)
            continue
        n_acc += acc
        if (it + 1 - config.burnin) % config.thin == 0 and k < kept.shape[0]:
            kept[k] = x
            k += 1
    rate = n_acc / (config.n_iter - config.burnin)
    if not 0.3 <= rate <= 0.8:
        warnings.warn(f"Langevin acceptance rate {rate:.3f} outside [0.3, 0.8]",
                      RuntimeWarning, stacklevel=2)
    return ChainResult(samples=uncenter(kept, mean, F), acceptance_rate=rate,
                       step_size=h, mean=mean, factor=F)


def chain_diagnostics(samples, max_lag=50):
    """Autocorrelation and half-vs-half KS distance of the per-iteration
    average random effect.

    Parameters
    ----------
    samples : array_like, shape (k,) or (k, n)
        Retained samples. For 2-D input the row average is used; pass
        ``samples - mean`` to diagnose the random effect only.
    max_lag : int

    Returns
    -------
    dict with keys ``lag``, ``acf`` (NaN for a constant chain) and ``ks``.
    """
    s = np.asarray(samples, dtype=float)
    avg = s.mean(axis=1) if s.ndim == 2 else s
    k = avg.size
    if k < 4:
        raise ValueError("need at least 4 samples")
    max_lag = min(max_lag, k - 1)
    c = avg - avg.mean()
    c0 = c @ c / k
    lags = np.arange(max_lag + 1)
    if np.ptp(avg) > 0:
        acf = np.array([c[: k - j] @ c[j:] / k for j in lags]) / c0
    else:
        acf = np.full(lags.size, np.nan)
    half = k // 2
    ks = stats.ks_2samp(avg[:half], avg[half: 2 * half]).statistic
    return {"lag": lags, "acf": acf, "ks": float(ks)}


def diagnostics_table(diag):
    """Diagnostics as a ``(lag, autocorrelation)`` DataFrame for CSV export."""
    import pandas as pd

    return pd.DataFrame({"lag": diag["lag"], "autocorrelation": diag["acf"]})
