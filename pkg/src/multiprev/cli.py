"""
Command-line interface.

Commands::

    multiprev simulate  --config CFG --out data.csv [--seed S]
    multiprev fit       --data data.csv [--config CFG] --out fit.json [--seed S]
    multiprev predict   --data data.csv --fit fit.json --grid grid.csv --out pred.csv
                        [--thresholds 0.2,0.4] [--config CFG] [--seed S]
    multiprev bootstrap --data data.csv --fit fit.json [--config CFG] --out boot.json
                        [--seed S] [--threads K]
    multiprev simstudy  --config CFG --out metrics.csv [--seed S] [--threads K]

Data files are CSV with the header ``survey_id, time_index, x, y, m, count``
followed by covariate columns. Survey ids run from 1; an intercept is added
automatically. Configuration files are TOML with the sections
``[model]``, ``[chain]``, ``[mcml]``, ``[bootstrap]``, ``[simstudy]`` and
``[predict]``; see :data:`DEFAULTS`.

Every output records the seed, a hash of the resolved configuration and the
package version. Failures print a JSON error document on stderr and exit
with a nonzero status.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .covariance import CovParams
from .mcml import (
    MCMLConfig,
    SingularHessianError,
    asymptotic_covariance,
    fit,
    format_report,
    parametric_bootstrap,
)
from .model import ModelSpec, ParamSet, SurveyDataset
from .predict import PredictionGrid, predict, summarize
from .sampler import ChainConfig, chain_diagnostics, diagnostics_table
from .simstudy import run_scenario, scenario_from_dict, simulate_dataset

REQUIRED_COLUMNS = ["survey_id", "time_index", "x", "y", "m", "count"]

DEFAULTS = {
    "model": {
        "biased": [],              # 1-based survey ids of biased surveys
        "covariates": None,        # covariate names to use; None = all data columns
        "bias_covariates": None,   # names entering the bias term; None = intercept + all
        "nugget": True,
        "shared_nugget": False,
        "standardize": False,
    },
    "chain": {
        "n_iter": 110_000, "burnin": 10_000, "thin": 20, "step_size": None,
        "target_accept": 0.574, "adapt": True, "approx": "laplace",
        "curvature": "empirical",
    },
    "mcml": {
        "max_refresh": 10, "tol": 1e-3, "gain_tol": 0.5, "laplace_init": False,
        "n_starts": 3, "start_spread": 0.5, "trust": 3.0, "intervals": True,
        "hessian": "laplace",      # likelihood differentiated for intervals: laplace | mcml
    },
    "bootstrap": {"n_boot": 1000, "level": 0.95},
    "simstudy": {"kind": "QV", "level": None, "n_rep": 100, "sizes": None,
                 "analyses": None},
    "predict": {"target_survey": 1, "include_nugget": True,
                "quantiles": [0.025, 0.5, 0.975], "thresholds": []},
}


class CLIError(Exception):
    """Invalid input detected by the command-line layer."""


# -- configuration ----------------------------------------------------------

def load_config(path=None):
    """Read a TOML file and merge it over :data:`DEFAULTS`.

    Unknown sections or keys are rejected so that typos do not pass
    silently.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            user = tomllib.load(fh)
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise CLIError(f"config file {path}: {exc}") from None
    for section, values in user.items():
        if section not in cfg:
            raise CLIError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise CLIError(f"config section [{section}] must be a table")
        for key, val in values.items():
            if key not in cfg[section]:
                raise CLIError(f"unknown key '{key}' in config section [{section}]")
            cfg[section][key] = val
    if cfg["mcml"]["hessian"] not in ("laplace", "mcml"):
        raise CLIError("[mcml] hessian must be 'laplace' or 'mcml'")
    return cfg


def config_hash(cfg):
    """SHA-256 of the resolved configuration in canonical JSON form."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def chain_config(cfg):
    return ChainConfig(**cfg["chain"])


def mcml_config(cfg, seed):
    m = dict(cfg["mcml"])
    m.pop("intervals")
    m.pop("hessian")
    return MCMLConfig(chain=chain_config(cfg), seed=seed, **m)


# -- data -------------------------------------------------------------------

def read_data(path):
    """Read and validate a data CSV; returns a DataFrame."""
    try:
        df = pd.read_csv(path, comment="#")
    except FileNotFoundError:
        raise CLIError(f"data file not found: {path}") from None
    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise CLIError(f"data file {path}: missing column(s) {missing}")
    if list(df.columns[:6]) != REQUIRED_COLUMNS:
        raise CLIError(f"data file {path}: the first columns must be {REQUIRED_COLUMNS}")
    if df.empty:
        raise CLIError(f"data file {path}: no rows")
    for col in df.columns:
        if not pd.api.types.is_numeric_dtype(df[col]):
            raise CLIError(f"data file {path}: column '{col}' is not numeric")
        bad = np.flatnonzero(~np.isfinite(df[col].to_numpy(dtype=float)))
        if bad.size:
            raise CLIError(f"data file {path}: row {bad[0] + 1}, column '{col}': missing "
                           "or non-finite value")
    for col in ("survey_id", "time_index", "m", "count"):
        v = df[col].to_numpy(dtype=float)
        bad = np.flatnonzero(v != np.round(v))
        if bad.size:
            raise CLIError(f"data file {path}: row {bad[0] + 1}, column '{col}': not an integer")
    m, y = df["m"].to_numpy(), df["count"].to_numpy()
    for cond, msg in ((m < 1, "m must be >= 1"), (y < 0, "count must be >= 0"),
                      (y > m, "count exceeds m")):
        bad = np.flatnonzero(cond)
        if bad.size:
            raise CLIError(f"data file {path}: row {bad[0] + 1}: {msg}")
    ids = np.unique(df["survey_id"].to_numpy(dtype=int))
    if not np.array_equal(ids, np.arange(1, ids.size + 1)):
        raise CLIError(f"data file {path}: survey_id values must be contiguous from 1, "
                       f"found {ids.tolist()}")
    for s in ids:
        t = np.unique(df.loc[df.survey_id == s, "time_index"])
        if t.size != 1:
            raise CLIError(f"data file {path}: survey {s} has more than one time_index")
    return df


def ingest(data_path, cfg):
    """Build the dataset and ModelSpec from a data file and a
    resolved configuration.

    Returns
    -------
    data : SurveyDataset
    spec : ModelSpec
    transform : dict
        Covariate names and, if requested, standardization constants.
    """
    df = read_data(data_path)
    df = df.sort_values("survey_id", kind="mergesort", ignore_index=True)
    mc = cfg["model"]
    avail = list(df.columns[6:])
    names = avail if mc["covariates"] is None else list(mc["covariates"])
    for n in names:
        if n not in avail:
            raise CLIError(f"covariate '{n}' is not a column of {data_path}")
    X = df[names].to_numpy(dtype=float)
    means = X.mean(axis=0) if names else np.zeros(0)
    sds = X.std(axis=0) if names else np.zeros(0)
    if mc["standardize"] and names:
        if np.any(sds == 0):
            raise CLIError("cannot standardize a constant covariate")
        X = (X - means) / sds
    else:
        means, sds = np.zeros(len(names)), np.ones(len(names))
    X = np.column_stack([np.ones(len(df)), X])
    all_names = ["intercept"] + names
    r = int(df["survey_id"].max())
    biased = [False] * r
    for s in mc["biased"]:
        if not 1 <= int(s) <= r:
            raise CLIError(f"biased survey {s} does not exist (surveys 1..{r})")
        biased[int(s) - 1] = True
    if all(biased):
        raise CLIError("every survey is marked biased; the model needs at least one "
                       "unbiased (gold-standard) survey to identify the prevalence surface")
    time = [int(df.loc[df.survey_id == s, "time_index"].iloc[0]) for s in range(1, r + 1)]
    bias_cols = None
    if mc["bias_covariates"] is not None:
        bias_cols = []
        for n in mc["bias_covariates"]:
            if n not in all_names:
                raise CLIError(f"bias covariate '{n}' is not a data column")
            bias_cols.append(all_names.index(n))
    data = SurveyDataset(
        survey=df["survey_id"].to_numpy(dtype=int) - 1,
        coords=df[["x", "y"]].to_numpy(dtype=float),
        m=df["m"].to_numpy(dtype=int), y=df["count"].to_numpy(dtype=int),
        covariates=X, biased=tuple(biased), time=tuple(time), covariate_names=all_names,
    )
    spec = ModelSpec(biased=tuple(biased), time=tuple(time), bias_covariates=bias_cols,
                     nugget=bool(mc["nugget"]), shared_nugget=bool(mc["shared_nugget"]))
    transform = {"covariates": names, "mean": means.tolist(), "sd": sds.tolist()}
    return data, spec, transform


def dataset_to_frame(data: SurveyDataset):
    """Inverse of :func:`ingest` for the data columns (intercept dropped)."""
    cols = {
        "survey_id": data.survey + 1,
        "time_index": np.asarray(data.time)[data.survey],
        "x": data.coords[:, 0], "y": data.coords[:, 1],
        "m": data.m, "count": data.y,
    }
    for j, n in enumerate(data.covariate_names):
        if n == "intercept":
            continue
        cols[n] = data.covariates[:, j]
    return pd.DataFrame(cols)


# -- serialization ----------------------------------------------------------

def _header(command, seed, chash):
    return {"software": "multiprev", "version": __version__, "command": command,
            "seed": seed, "config_hash": chash}


def _csv_text(df, meta):
    buf = io.StringIO()
    buf.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
    df.to_csv(buf, index=False, lineterminator="\n", float_format="%.10g")
    return buf.getvalue()


def _write(path, text):
    Path(path).write_text(text)


def _json_text(doc):
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def params_to_dict(params: ParamSet):
    c = params.cov
    return {"beta": params.beta.tolist(), "sigma2": float(c.sigma2), "nu2": c.nu2.tolist(),
            "tau2": c.tau2.tolist(), "phi": float(c.phi), "delta": c.delta.tolist(),
            "alpha": c.alpha.tolist()}


def params_from_dict(d):
    return ParamSet(d["beta"], CovParams(sigma2=d["sigma2"], nu2=d["nu2"], tau2=d["tau2"],
                                         phi=d["phi"], delta=d["delta"], alpha=d["alpha"]))


def _read_fit(path):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CLIError(f"fit file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"fit file {path}: {exc}") from None
    if doc.get("command") != "fit" or "params" not in doc:
        raise CLIError(f"{path} is not a fit report")
    return doc


# -- commands -----------------------------------------------------------------

def command_simulate(args, cfg):
    scenario = scenario_from_dict(cfg["simstudy"])
    data, _ = simulate_dataset(scenario, np.random.default_rng(args.seed))
    meta = _header("simulate", args.seed, config_hash(cfg))
    meta["scenario"] = scenario.name
    _write(args.out, _csv_text(dataset_to_frame(data), meta))
    if args.truth:
        doc = dict(meta, params=params_to_dict(scenario.truth))
        _write(args.truth, _json_text(doc))


def _fit_document(result, cfg, args, transform, intervals, method):
    doc = _header("fit", args.seed, config_hash(cfg))
    doc.update(result.to_dict(intervals))
    doc["interval_method"] = method if intervals else None
    doc["params"] = params_to_dict(result.params)
    doc["model"] = {"biased": list(result.spec.biased), "time": list(result.spec.time),
                    "bias_covariates": (None if result.spec.bias_covariates is None
                                        else list(result.spec.bias_covariates)),
                    "nugget": result.spec.nugget,
                    "shared_nugget": result.spec.shared_nugget}
    doc["covariates"] = transform
    doc["history"] = [{"refresh": h["refresh"], "loglik": h["loglik"], "change": h["change"],
                       "acceptance_rate": h["acceptance_rate"]} for h in result.history]
    return doc


def command_fit(args, cfg):
    data, spec, transform = ingest(args.data, cfg)
    result = fit(data, spec, config=mcml_config(cfg, args.seed))
    intervals = None
    if cfg["mcml"]["intervals"]:
        try:
            ac = asymptotic_covariance(result, method=cfg["mcml"]["hessian"])
            # parameters held fixed in the Hessian get no interval
            intervals = {n: ac.natural_interval(n) for j, n in enumerate(ac.natural_names)
                         if ac.cov_natural[j, j] > 0}
        except SingularHessianError:
            intervals = None
    doc = _fit_document(result, cfg, args, transform, intervals, "wald")
    _write(args.out, _json_text(doc))
    if args.diagnostics:
        diag = chain_diagnostics(result.importance.samples - result.importance.samples.mean(0))
        meta = _header("fit", args.seed, config_hash(cfg))
        meta["ks"] = f"{diag['ks']:.6g}"
        _write(args.diagnostics, _csv_text(diagnostics_table(diag), meta))
    print(format_report(result, intervals))


def _result_from_doc(doc, data, spec):
    """A FitResult-like object carrying what prediction and the bootstrap
    need."""
    from types import SimpleNamespace

    from .mcml import FitResult

    params = params_from_dict(doc["params"])
    imp = SimpleNamespace(data=data, m=int(doc.get("n_samples", 0)))
    return FitResult(params=params, spec=spec, converged=bool(doc["converged"]),
                     n_refresh=int(doc["n_refresh"]), loglik=float(doc["loglik"]),
                     importance=imp)


def _check_model(doc, spec):
    m = doc["model"]
    same = (tuple(m["biased"]) == spec.biased and tuple(m["time"]) == spec.time
            and m["nugget"] == spec.nugget and m["shared_nugget"] == spec.shared_nugget
            and (m["bias_covariates"] is None) == (spec.bias_covariates is None)
            and (m["bias_covariates"] is None
                 or tuple(m["bias_covariates"]) == spec.bias_covariates))
    if not same:
        raise CLIError("the fit report was produced with a different model configuration")


def read_grid(path, transform):
    try:
        g = pd.read_csv(path, comment="#")
    except FileNotFoundError:
        raise CLIError(f"grid file not found: {path}") from None
    for c in ["x", "y"] + transform["covariates"]:
        if c not in g.columns:
            raise CLIError(f"grid file {path}: missing column '{c}'")
    X = g[transform["covariates"]].to_numpy(dtype=float)
    if not np.all(np.isfinite(X)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
        raise CLIError(f"grid file {path}: row {bad + 1}: missing covariate value")
    X = (X - np.asarray(transform["mean"])) / np.asarray(transform["sd"])
    return g[["x", "y"]].to_numpy(dtype=float), np.column_stack([np.ones(len(g)), X])


def _parse_thresholds(text):
    if text is None:
        return None
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CLIError(f"invalid --thresholds {text!r}") from None
    if any(not 0 <= v <= 1 for v in vals):
        raise CLIError("thresholds must lie in [0, 1]")
    return vals


def command_predict(args, cfg):
    if args.fit is None or args.grid is None:
        raise CLIError("predict needs --fit and --grid")
    doc = _read_fit(args.fit)
    data, spec, _ = ingest(args.data, cfg)
    _check_model(doc, spec)
    coords, X = read_grid(args.grid, doc["covariates"])
    pc = cfg["predict"]
    target = int(pc["target_survey"])
    if not 1 <= target <= spec.r:
        raise CLIError(f"target_survey {target} does not exist")
    grid = PredictionGrid(coords, X, target_survey=target - 1,
                          include_nugget=bool(pc["include_nugget"]))
    result = _result_from_doc(doc, data, spec)
    surface = predict(result, grid, chain=chain_config(cfg), seed=args.seed)
    thresholds = _parse_thresholds(args.thresholds)
    if thresholds is None:
        thresholds = [float(v) for v in pc["thresholds"]]
    table = summarize(surface, thresholds, pc["quantiles"])
    _write(args.out, _csv_text(table, _header("predict", args.seed, config_hash(cfg))))


def command_bootstrap(args, cfg):
    if args.fit is None:
        raise CLIError("bootstrap needs --fit")
    doc = _read_fit(args.fit)
    data, spec, _ = ingest(args.data, cfg)
    _check_model(doc, spec)
    result = _result_from_doc(doc, data, spec)
    bc = cfg["bootstrap"]
    boot = parametric_bootstrap(result, n_boot=int(bc["n_boot"]),
                                config=mcml_config(cfg, None), seed=args.seed,
                                n_jobs=args.threads, level=float(bc["level"]))
    out = _header("bootstrap", args.seed, config_hash(cfg))
    out["level"] = boot.level
    out["n_boot"] = int(bc["n_boot"])
    out["n_failed"] = boot.n_failed
    est = dict(zip(result.names, result.spec.natural_values(result.params)))
    out["parameters"] = [{"parameter": n, "estimate": float(est[n]), "lower": float(lo),
                          "upper": float(hi)}
                         for n, lo, hi in zip(boot.names, boot.lower, boot.upper)]
    _write(args.out, _json_text(out))
    print(format_report(result, boot.intervals))


def command_simstudy(args, cfg):
    scenario = scenario_from_dict(cfg["simstudy"])
    mt = run_scenario(scenario, n_jobs=args.threads, seed=args.seed,
                      config=mcml_config(cfg, None), chain=chain_config(cfg))
    meta = _header("simstudy", args.seed, config_hash(cfg))
    meta["scenario"] = scenario.name
    _write(args.out, _csv_text(mt.table, meta))
    if mt.eigenvalues:
        p = Path(args.out)
        _write(p.with_name(p.stem + "_eigenvalues" + p.suffix),
               _csv_text(mt.eigen_table(), meta))


COMMANDS = {
    "simulate": command_simulate,
    "fit": command_fit,
    "predict": command_predict,
    "bootstrap": command_bootstrap,
    "simstudy": command_simstudy,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", message, status=2)


def _fail(kind, message, status=1):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    sys.exit(status)


def build_parser():
    p = _Parser(prog="multiprev", description="Multi-survey geostatistical prevalence mapping")
    p.add_argument("--version", action="version", version=f"multiprev {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    needs_data = {"fit", "predict", "bootstrap"}
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--data", required=name in needs_data, help="data CSV")
        s.add_argument("--config", help="TOML configuration file")
        s.add_argument("--out", required=True, help="output path")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--threads", type=int, default=1,
                       help="worker processes for bootstrap and simstudy")
        if name in ("predict", "bootstrap"):
            s.add_argument("--fit", help="fit report JSON from the fit command")
        if name == "predict":
            s.add_argument("--grid", help="prediction locations CSV with covariates")
            s.add_argument("--thresholds", help="comma-separated prevalence thresholds")
        if name == "fit":
            s.add_argument("--diagnostics", help="write chain autocorrelations to this CSV")
        if name == "simulate":
            s.add_argument("--truth", help="also write the true parameters as JSON")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        _fail("UsageError", "--threads must be >= 1", status=2)
    try:
        cfg = load_config(args.config)
        # BLAS stays single-threaded so results never depend on --threads
        with threadpool_limits(limits=1):
            COMMANDS[args.command](args, cfg)
    except CLIError as exc:
        _fail("InputError", exc)
    except (ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        _fail(type(exc).__name__, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
