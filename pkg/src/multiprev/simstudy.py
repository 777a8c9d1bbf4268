"""
Simulation studies: synthetic multi-survey data and the joint (J),
first-survey-only (FSO) and naive (N) analyses scored by RMSE, relative
bias and interval coverage.

Scenario presets
----------------
``ident(k)``
    Two surveys, the second biased, at the covariance estimates of the
    Chikhwawa application. Unbiased locations are uniform in the study
    rectangle; biased locations follow a Poisson process concentrated on
    the rectangle centre (``k=1``), its lower-left corner (``k=2``) or a
    point outside it (``k=3``).
``qv(nu2)``
    Quality variation: one unbiased and one biased survey sharing a single
    prevalence field, with bias variance `nu2`.
``tv(alpha)``
    Temporal variation: two unbiased surveys whose fields have
    cross-correlation `alpha`.
``application()``
    Three surveys laid out like the application (two randomized surveys in
    consecutive years and a convenience survey in the second year), with
    synthetic covariates.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from functools import partial

import numpy as np
import pandas as pd
from scipy.stats import norm

from ._parallel import pmap
from .covariance import CovParams
from .mcml import MCMLConfig, SingularHessianError, asymptotic_covariance, fit
from .model import ModelSpec, ParamSet, SurveyDataset, simulate_counts
from .predict import PredictionGrid, predict, sample_predictive_surfaces
from .sampler import ChainConfig

__all__ = [
    "SurveyDesign",
    "Scenario",
    "MetricsTable",
    "sample_uniform_locations",
    "sample_ipp_locations",
    "simulate_dataset",
    "naive_analysis",
    "first_survey_only",
    "joint_analysis",
    "run_scenario",
    "aggregate",
    "ident",
    "qv",
    "tv",
    "application",
    "scenario_from_dict",
    "DESK_CHAIN",
    "DESK_MCML",
]

log = logging.getLogger(__name__)

STUDY_RECTANGLE = (34.700, 34.900, -16.170, -15.880)
UNIT_SQUARE = (0.0, 1.0, 0.0, 1.0)

DESK_CHAIN = ChainConfig(n_iter=42_000, burnin=2_000, thin=20)
DESK_MCML = MCMLConfig(chain=DESK_CHAIN, n_starts=1)


# -- locations ------------------------------------------------------------

def _check_rectangle(rect):
    x0, x1, y0, y1 = (float(v) for v in rect)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"invalid rectangle {rect!r}")
    return x0, x1, y0, y1


def sample_uniform_locations(n, rectangle=UNIT_SQUARE, seed=None):
    """`n` independent uniform points in ``(xmin, xmax, ymin, ymax)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x0, x1, y0, y1 = _check_rectangle(rectangle)
    rng = np.random.default_rng(seed)
    u = rng.random((n, 2))
    return np.column_stack([x0 + (x1 - x0) * u[:, 0], y0 + (y1 - y0) * u[:, 1]])


def sample_ipp_locations(n, center, decay, rectangle=UNIT_SQUARE, seed=None):
    """`n` points from the Poisson process with intensity
    ``exp(-||x - center|| / decay)`` on a rectangle, conditioned on the count.

    Rejection sampling: uniform proposals are accepted with probability
    ``lambda(x) / max lambda`` where the maximum is over the rectangle, so
    `center` may lie outside it.

    Raises
    ------
    ValueError
        If the acceptance rate falls below ``1e-4``, which means the decay
        is tiny relative to the region.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not decay > 0:
        raise ValueError("decay must be positive")
    x0, x1, y0, y1 = _check_rectangle(rectangle)
    c = np.asarray(center, dtype=float)
    rng = np.random.default_rng(seed)
    nearest = np.array([np.clip(c[0], x0, x1), np.clip(c[1], y0, y1)])
    d_min = np.hypot(*(nearest - c))
    out = []
    got = proposed = 0
    batch = max(1000, 4 * n)
    while got < n:
        u = rng.random((batch, 2))
        pts = np.column_stack([x0 + (x1 - x0) * u[:, 0], y0 + (y1 - y0) * u[:, 1]])
        d = np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1])
        acc = rng.random(batch) < np.exp(-(d - d_min) / decay)
        out.append(pts[acc])
        got += int(acc.sum())
        proposed += batch
        if proposed >= 100_000 and got / proposed < 1e-4:
            raise ValueError(
                f"acceptance rate {got / proposed:.2e} below 1e-4; the intensity "
                "centre or decay does not match the sampling region")
    return np.vstack(out)[:n]


# -- scenarios ------------------------------------------------------------

@dataclass(frozen=True)
class SurveyDesign:
    """Sampling design of one survey.

    Parameters
    ----------
    n : int
    sampler : {'uniform', 'ipp'}
    center : tuple of float, optional
        Intensity centre for ``'ipp'``.
    decay : float, optional
        Intensity decay scale for ``'ipp'``.
    """

    n: int
    sampler: str = "uniform"
    center: tuple = None
    decay: float = None

    def sample(self, rectangle, rng):
        if self.sampler == "uniform":
            return sample_uniform_locations(self.n, rectangle, rng)
        if self.sampler == "ipp":
            return sample_ipp_locations(self.n, self.center, self.decay, rectangle, rng)
        raise ValueError(f"unknown sampler {self.sampler!r}")


@dataclass(frozen=True)
class Scenario:
    """A simulation scenario.

    Parameters
    ----------
    kind : {'IDENT', 'QV', 'TV', 'APPLICATION'}
    truth : ParamSet
    designs : tuple of SurveyDesign
        One per survey.
    biased, time : tuple
        Bias flag and time period per survey.
    rectangle : tuple
        Sampling region ``(xmin, xmax, ymin, ymax)``.
    denominators : int or (values, probabilities)
        Binomial denominators, fixed or drawn per record.
    n_rep : int
    analyses : tuple of str
        Subset of ``('J', 'FSO', 'N')``.
    x0 : tuple
        Prediction location for ``S_1(x0)``.
    nugget, shared_nugget : bool
        Nugget structure of both the truth and the fitted models.
    bias_covariates : tuple of int, optional
    covariates : {'intercept', 'application'}
    name : str
    """

    kind: str
    truth: ParamSet
    designs: tuple
    biased: tuple
    time: tuple = None
    rectangle: tuple = UNIT_SQUARE
    denominators: object = 1
    n_rep: int = 100
    analyses: tuple = ("J", "FSO", "N")
    x0: tuple = (0.5, 0.5)
    nugget: bool = False
    shared_nugget: bool = False
    bias_covariates: tuple = None
    covariates: str = "intercept"
    name: str = ""

    def __post_init__(self):
        r = len(self.designs)
        if len(self.biased) != r:
            raise ValueError("need one bias flag per survey")
        if self.time is None:
            object.__setattr__(self, "time", (1,) * r)
        bad = set(self.analyses) - {"J", "FSO", "N"}
        if bad:
            raise ValueError(f"unknown analyses {sorted(bad)}")
        c = self.truth.cov
        if c.n_surveys != r:
            raise ValueError("truth has the wrong number of surveys")
        if self.kind == "QV" and not np.allclose(c.alpha, 1.0):
            raise ValueError("QV scenarios share one prevalence field (alpha = 1)")
        if self.kind == "TV" and np.any(c.nu2 != 0):
            raise ValueError("TV scenarios have no bias field (nu2 = 0)")

    @property
    def spec(self):
        return ModelSpec(biased=self.biased, time=self.time,
                         bias_covariates=self.bias_covariates, nugget=self.nugget,
                         shared_nugget=self.shared_nugget)

    def replace(self, **kw):
        return replace(self, **kw)


def ident(k=1, n1=150, n2=90, n_rep=100):
    """Identifiability scenario ``k`` in {1, 2, 3}."""
    centers = {1: (34.800, -16.025), 2: (34.700, -16.170), 3: (34.600, -16.315)}
    if k not in centers:
        raise ValueError("identifiability scenario must be 1, 2 or 3")
    truth = ParamSet([1.0, -1.0], CovParams(
        sigma2=2.186, nu2=[0.0, 0.672], tau2=[0.558, 0.558], phi=0.017,
        delta=[1.0, 0.004]))
    return Scenario(
        kind="IDENT", truth=truth,
        designs=(SurveyDesign(n1), SurveyDesign(n2, "ipp", centers[k], 0.02)),
        biased=(False, True), rectangle=STUDY_RECTANGLE,
        denominators=((1, 2, 3), (0.55, 0.35, 0.10)), n_rep=n_rep, analyses=("J",),
        x0=centers[1], nugget=True, shared_nugget=True, name=f"ident{k}",
    )


def qv(nu2=1.0, n=150, n_rep=100):
    """Quality-variation scenario with bias variance `nu2`."""
    truth = ParamSet([1.0, -1.0], CovParams(
        sigma2=1.0, nu2=[0.0, nu2], tau2=[0.0, 0.0], phi=0.15, delta=[1.0, 0.15]))
    return Scenario(
        kind="QV", truth=truth,
        designs=(SurveyDesign(n), SurveyDesign(n, "ipp", (0.5, 0.5), 0.15)),
        biased=(False, True), n_rep=n_rep, name=f"qv_nu2_{nu2:g}",
    )


def tv(alpha=0.8, n=150, n_rep=100):
    """Temporal-variation scenario with cross-correlation `alpha`."""
    A = np.array([[1.0, alpha], [alpha, 1.0]])
    truth = ParamSet([1.0], CovParams(
        sigma2=1.0, nu2=[0.0, 0.0], tau2=[0.0, 0.0], phi=0.15, delta=[1.0, 1.0], alpha=A))
    return Scenario(
        kind="TV", truth=truth, designs=(SurveyDesign(n), SurveyDesign(n)),
        biased=(False, False), time=(1, 2), n_rep=n_rep, name=f"tv_alpha_{alpha:g}",
    )


APPLICATION_COVARIATES = ("intercept", "bednet", "irs", "high_season", "waterway_km", "ses")


def application(sizes=(475, 425, 249), n_rep=1):
    """Three-survey layout of the application at its reported estimates.

    Covariates are synthetic: bed-net ownership, recent indoor spraying and
    season are Bernoulli, distance to the closest waterway is uniform on
    ``[0, 3]`` km and SES is a rounded normal on ``1..5`` with the survey
    means and standard deviations observed in the application. SES alone
    enters the bias term of the convenience survey.
    """
    A = np.array([[1.0, 0.859, 0.859], [0.859, 1.0, 1.0], [0.859, 1.0, 1.0]])
    truth = ParamSet(
        [-0.272, -0.439, -0.399, 0.415, -0.373, -0.151, -0.096],
        CovParams(sigma2=2.186, nu2=[0.0, 0.0, 0.672], tau2=[0.558] * 3, phi=0.017,
                  delta=[1.0, 1.0, 0.004], alpha=A))
    cx = (STUDY_RECTANGLE[0] + STUDY_RECTANGLE[1]) / 2
    cy = (STUDY_RECTANGLE[2] + STUDY_RECTANGLE[3]) / 2
    return Scenario(
        kind="APPLICATION", truth=truth,
        designs=(SurveyDesign(sizes[0]), SurveyDesign(sizes[1]),
                 SurveyDesign(sizes[2], "ipp", (cx, cy), 0.02)),
        biased=(False, False, True), time=(1, 2, 2), rectangle=STUDY_RECTANGLE,
        denominators=((1, 2, 3), (0.55, 0.35, 0.10)), n_rep=n_rep, analyses=("J",),
        x0=(cx, cy), nugget=True, shared_nugget=True, bias_covariates=(5,),
        covariates="application", name="application",
    )


_PRESETS = {"IDENT": ident, "QV": qv, "TV": tv, "APPLICATION": application}


def scenario_from_dict(cfg):
    """Scenario from a configuration mapping.

    Recognized keys: ``kind`` (IDENT, QV, TV or APPLICATION), ``level``
    (the scenario number for IDENT, ``nu2`` for QV, ``alpha`` for TV),
    ``n_rep``, ``sizes`` (per-survey sample sizes) and ``analyses``.
    """
    cfg = dict(cfg)
    kind = str(cfg.pop("kind", "QV")).upper()
    if kind not in _PRESETS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    level = cfg.pop("level", None)
    n_rep = int(cfg.pop("n_rep", 100))
    sizes = cfg.pop("sizes", None)
    analyses = cfg.pop("analyses", None)
    if cfg:
        raise ValueError(f"unknown simstudy keys {sorted(cfg)}")
    if kind == "IDENT":
        kw = {} if sizes is None else {"n1": int(sizes[0]), "n2": int(sizes[1])}
        sc = ident(int(level or 1), n_rep=n_rep, **kw)
    elif kind == "QV":
        sc = qv(float(1.0 if level is None else level), n_rep=n_rep,
                **({} if sizes is None else {"n": int(sizes[0])}))
    elif kind == "TV":
        sc = tv(float(0.8 if level is None else level), n_rep=n_rep,
                **({} if sizes is None else {"n": int(sizes[0])}))
    else:
        sc = application(**({} if sizes is None else {"sizes": tuple(int(v) for v in sizes)}),
                         n_rep=n_rep)
    if analyses is not None:
        sc = sc.replace(analyses=tuple(analyses))
    return sc


# -- simulation -----------------------------------------------------------

def _denominators(spec, n, rng):
    if np.isscalar(spec):
        return np.full(n, int(spec))
    values, probs = spec
    return rng.choice(np.asarray(values, dtype=int), size=n, p=np.asarray(probs, dtype=float))


def _application_covariates(survey, rng):
    n = survey.size
    ses_mean = np.array([2.76, 2.50, 3.45])[survey]
    ses_sd = np.array([1.45, 1.37, 1.39])[survey]
    ses = np.clip(np.rint(rng.normal(ses_mean, ses_sd)), 1, 5)
    return np.column_stack([
        np.ones(n),
        rng.random(n) < 0.6,
        rng.random(n) < 0.25,
        rng.random(n) < 0.5,
        rng.uniform(0.0, 3.0, n),
        ses,
    ]).astype(float)


def simulate_dataset(scenario: Scenario, rng, targets=None):
    """Draw one dataset from `scenario`.

    Parameters
    ----------
    scenario : Scenario
    rng : numpy.random.Generator or int
    targets : array_like, shape (q, 2), optional
        Locations at which the realized ``S_1`` is also returned.

    Returns
    -------
    data : SurveyDataset
    s_target : ndarray, shape (q,) or None
        ``S_1`` at `targets`, drawn jointly with the data.
    """
    rng = np.random.default_rng(rng)
    coords = [d.sample(scenario.rectangle, rng) for d in scenario.designs]
    survey = np.repeat(np.arange(len(coords)), [len(c) for c in coords])
    coords = np.vstack(coords)
    m = _denominators(scenario.denominators, survey.size, rng)
    if scenario.covariates == "application":
        X = _application_covariates(survey, rng)
        names = APPLICATION_COVARIATES
    else:
        X = np.ones((survey.size, 1))
        names = ("intercept",)
    design = SurveyDataset(survey, coords, m, np.zeros_like(m), X, biased=scenario.biased,
                           time=scenario.time, covariate_names=names)
    spec = scenario.spec
    y, t = simulate_counts(design, spec, scenario.truth, rng)
    data = design.with_counts(y)
    if targets is None:
        return data, None
    pts = np.asarray(targets, dtype=float).reshape(-1, 2)
    grid = PredictionGrid(pts, np.zeros((len(pts), X.shape[1])), target_survey=0,
                          include_nugget=False)
    surf = sample_predictive_surfaces(t[None, :], grid, data, spec, scenario.truth, rng)
    return data, surf.random_effect[0]


# -- analyses -------------------------------------------------------------

def joint_analysis(data: SurveyDataset, scenario: Scenario, config: MCMLConfig = DESK_MCML):
    return fit(data, scenario.spec, config=config)


def first_survey_only(data: SurveyDataset, scenario: Scenario, config: MCMLConfig = DESK_MCML):
    sub = data.subset([0])
    spec = ModelSpec(biased=(False,), nugget=scenario.nugget)
    return fit(sub, spec, config=config)


def naive_analysis(data: SurveyDataset, config: MCMLConfig = DESK_MCML, nugget=False):
    """Single-field model fitted to the pooled records, ignoring bias and
    temporal variation. With one survey this is the first-survey-only fit."""
    spec = ModelSpec(biased=(False,), nugget=nugget)
    return fit(data.pooled(), spec, config=config)


_Z95 = norm.ppf(0.975)
_PARAM_TARGETS = ("beta1", "log_sigma2", "log_phi")


def _score_fit(res, scenario, x0, chain, rng, predict_target=True):
    """Estimates and 95% intervals for the reported targets of one fit."""
    out = {}
    ac = None
    # the covariance parameters can leave the Hessian singular; intervals
    # for (beta, sigma2) then come from that block alone
    for free_psi in (True, False):
        try:
            ac = asymptotic_covariance(res, method="laplace", free_psi=free_psi)
            break
        except SingularHessianError:
            pass
    if scenario.kind in ("IDENT", "APPLICATION"):
        for name, est in res.estimates.items():
            lo = hi = np.nan
            if ac is not None:
                j = ac.natural_names.index(name)
                if ac.cov_natural[j, j] > 0:
                    lo, hi = ac.natural_interval(name)
            out[name] = (float(est), float(lo), float(hi))
        return out
    u = {"beta1": res.params.beta[0], "log_sigma2": np.log(res.params.cov.sigma2),
         "log_phi": np.log(res.params.cov.phi)}
    opt = {"beta1": "beta1", "log_sigma2": "log_sigma2", "log_phi": "t_phi"}
    for name in _PARAM_TARGETS:
        lo = hi = np.nan
        if ac is not None and opt[name] in ac.names:
            j = ac.names.index(opt[name])
            if ac.cov[j, j] > 0:
                lo, hi = ac.wald_interval(opt[name])
        out[name] = (float(u[name]), float(lo), float(hi))
    if predict_target:
        p = res.importance.data.covariates.shape[1]
        grid = PredictionGrid(np.asarray([x0], dtype=float), np.ones((1, p)), target_survey=0,
                              include_nugget=False)
        surf = predict(res, grid, chain=chain, seed=rng)
        s = surf.random_effect[:, 0]
        eta = surf.latent[:, 0]
        for name, v in (("S1(x0)", s), ("beta1+S1(x0)", eta)):
            lo, hi = np.quantile(v, [0.025, 0.975])
            out[name] = (float(v.mean()), float(lo), float(hi))
    return out


def _truths(scenario, s0):
    t = scenario.truth
    if scenario.kind in ("IDENT", "APPLICATION"):
        p = 1 if scenario.covariates == "intercept" else len(APPLICATION_COVARIATES)
        return dict(zip(scenario.spec.natural_names(p), scenario.spec.natural_values(t)))
    return {"beta1": t.beta[0], "log_sigma2": np.log(t.cov.sigma2),
            "log_phi": np.log(t.cov.phi), "S1(x0)": s0, "beta1+S1(x0)": t.beta[0] + s0}


def _run_replicate(rep, scenario: Scenario, seed, config: MCMLConfig, chain: ChainConfig):
    ss = np.random.SeedSequence([int(seed), int(rep)])
    data_ss, *fit_ss = ss.spawn(1 + 3)
    rng = np.random.default_rng(data_ss)
    data, s_x0 = simulate_dataset(scenario, rng, targets=[scenario.x0])
    s0 = float(s_x0[0])
    truths = _truths(scenario, s0)
    record = {"rep": rep, "truth": truths, "results": {}, "errors": {}, "converged": {}}
    runners = {
        "J": lambda c: joint_analysis(data, scenario, c),
        "FSO": lambda c: first_survey_only(data, scenario, c),
        "N": lambda c: naive_analysis(data, c, nugget=scenario.nugget),
    }
    for k, name in enumerate(("J", "FSO", "N")):
        if name not in scenario.analyses:
            continue
        frng = np.random.default_rng(fit_ss[k])
        cfg = config.replace(seed=int(frng.integers(2 ** 31)))
        try:
            res = runners[name](cfg)
            record["results"][name] = _score_fit(res, scenario, scenario.x0, chain, frng)
            record["converged"][name] = bool(res.converged)
        except Exception as exc:  # a failed replicate is logged and excluded
            record["errors"][name] = f"{type(exc).__name__}: {exc}"
    return record


@dataclass
class MetricsTable:
    """Aggregated simulation metrics.

    Attributes
    ----------
    table : pandas.DataFrame
        One row per (analysis, target) with columns ``analysis, target,
        truth, mean, bias, rb, sd, rmse, cic, n, n_ci``. ``truth`` and
        ``rb`` are NaN for prediction targets, whose truth changes between
        replicates.
    eigenvalues : dict
        Per analysis, descending eigenvalues of the correlation matrix of
        the parameter estimates across replicates (identifiability
        scenarios only).
    replicates : pandas.DataFrame
        Long table of per-replicate estimates, intervals and truths.
    n_failed : dict
        Failed fits per analysis.
    n_unconverged : dict
        Fits that stopped at the refresh cap, per analysis. They are kept.
    """

    scenario: str
    table: pd.DataFrame
    eigenvalues: dict = field(default_factory=dict)
    replicates: pd.DataFrame = None
    n_failed: dict = field(default_factory=dict)
    n_unconverged: dict = field(default_factory=dict)

    def get(self, analysis, target, column):
        row = self.table[(self.table.analysis == analysis) & (self.table.target == target)]
        if row.empty:
            raise KeyError((analysis, target))
        return float(row[column].iloc[0])

    def eigen_table(self):
        rows = []
        for a, ev in self.eigenvalues.items():
            rows += [{"analysis": a, "order": k + 1, "eigenvalue": float(v)}
                     for k, v in enumerate(ev)]
        return pd.DataFrame(rows, columns=["analysis", "order", "eigenvalue"])

    def to_csv(self, path, **kw):
        self.table.to_csv(path, index=False, **kw)


def aggregate(records, analyses=("J", "FSO", "N"), eigen=False):
    """Summarize per-replicate records.

    Each record is a dict with keys ``rep``, ``truth`` (target -> value) and
    ``results`` (analysis -> target -> ``(estimate, lower, upper)``).
    Records are sorted by replicate before any reduction, so the output
    does not depend on the order in which they arrive.

    Returns
    -------
    table : pandas.DataFrame
    eigenvalues : dict
        Filled only when `eigen` is true.
    long : pandas.DataFrame
    """
    rows = []
    for rec in records:
        for a, res in rec["results"].items():
            for target, (est, lo, hi) in res.items():
                rows.append({"rep": rec["rep"], "analysis": a, "target": target,
                             "estimate": est, "lower": lo, "upper": hi,
                             "truth": float(rec["truth"][target])})
    long = pd.DataFrame(rows, columns=["rep", "analysis", "target", "estimate", "lower",
                                       "upper", "truth"])
    long = long.sort_values(["analysis", "target", "rep"], kind="mergesort",
                            ignore_index=True)
    out = []
    order = [a for a in ("J", "FSO", "N") if a in analyses]
    targets = list(dict.fromkeys(long["target"]))
    eig = {}
    for a in order:
        sub_a = long[long.analysis == a]
        for t in targets:
            s = sub_a[sub_a.target == t]
            if s.empty:
                continue
            est, tr = s["estimate"].to_numpy(), s["truth"].to_numpy()
            fixed = np.allclose(tr, tr[0])
            err = est - tr
            has_ci = np.isfinite(s["lower"].to_numpy()) & np.isfinite(s["upper"].to_numpy())
            cover = (s["lower"].to_numpy() <= tr) & (tr <= s["upper"].to_numpy())
            truth = tr[0] if fixed else np.nan
            mean = est.mean()
            out.append({
                "analysis": a, "target": t, "truth": truth, "mean": mean,
                "bias": err.mean(),
                "rb": (mean - truth) / truth if fixed and truth != 0 else np.nan,
                "sd": est.std(ddof=1) if est.size > 1 else np.nan,
                "rmse": np.sqrt(np.mean(err ** 2)),
                "cic": cover[has_ci].mean() if has_ci.any() else np.nan,
                "n": int(est.size), "n_ci": int(has_ci.sum()),
            })
        if eigen and not sub_a.empty:
            wide = sub_a.pivot(index="rep", columns="target", values="estimate")
            wide = wide[[t for t in targets if t in wide.columns]].dropna()
            if len(wide) > 2:
                C = np.atleast_2d(np.corrcoef(wide.to_numpy(), rowvar=False))
                eig[a] = np.sort(np.linalg.eigvalsh(C))[::-1]
    return pd.DataFrame(out), eig, long


def run_scenario(scenario: Scenario, n_jobs=1, seed=0, config: MCMLConfig = DESK_MCML,
                 chain: ChainConfig = DESK_CHAIN, reps=None):
    """Simulate and analyse every replicate of `scenario`.

    Replicate ``k`` draws all of its randomness from
    ``SeedSequence([seed, k])``, so any subset of replicates can be rerun
    and the result does not depend on `n_jobs`.

    Parameters
    ----------
    scenario : Scenario
    n_jobs : int
        Worker processes.
    seed : int
    config : MCMLConfig
        Fitting settings; its seed is overridden per replicate.
    chain : ChainConfig
        Conditional simulation for the predictive distribution at ``x0``.
    reps : iterable of int, optional
        Replicate indices; defaults to ``range(scenario.n_rep)``.

    Returns
    -------
    MetricsTable
    """
    reps = list(range(scenario.n_rep)) if reps is None else list(reps)
    job = partial(_run_replicate, scenario=scenario, seed=seed, config=config, chain=chain)
    records = pmap(job, reps, n_jobs)
    n_failed = {a: 0 for a in scenario.analyses}
    n_unconv = {a: 0 for a in scenario.analyses}
    for rec in records:
        for a, msg in rec["errors"].items():
            n_failed[a] += 1
            log.warning("replicate %d, analysis %s failed: %s", rec["rep"], a, msg)
        for a, ok in rec["converged"].items():
            n_unconv[a] += not ok
    total = sum(n_failed.values())
    if total:
        warnings.warn(f"{total} fits failed and were excluded", RuntimeWarning, stacklevel=2)
    table, eig, long = aggregate(records, scenario.analyses, eigen=scenario.kind == "IDENT")
    return MetricsTable(scenario=scenario.name, table=table, eigenvalues=eig,
                        replicates=long, n_failed=n_failed, n_unconverged=n_unconv)
