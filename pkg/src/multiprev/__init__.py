"""
Multi-survey geostatistical prevalence mapping.

Fits a binomial generalized linear geostatistical model to data pooled from
several surveys, some of which may be biased or collected at different
times, by Monte Carlo maximum likelihood, and predicts prevalence surfaces.
"""
from .covariance import CovParams, CovarianceStructure, NotPositiveDefinite, corr
from .mcml import (
    FitResult,
    MCMLConfig,
    asymptotic_covariance,
    fit,
    format_report,
    parametric_bootstrap,
)
from .model import ModelSpec, ParamSet, SurveyDataset
from .predict import PredictionGrid, predict, summarize
from .sampler import ChainConfig, run_chain

__version__ = "0.1.0"

__all__ = [
    "CovParams",
    "CovarianceStructure",
    "NotPositiveDefinite",
    "corr",
    "FitResult",
    "MCMLConfig",
    "asymptotic_covariance",
    "fit",
    "format_report",
    "parametric_bootstrap",
    "ModelSpec",
    "ParamSet",
    "SurveyDataset",
    "PredictionGrid",
    "predict",
    "summarize",
    "ChainConfig",
    "run_chain",
]
