"""Bayesian and likelihood inference for beta mixed regression.

Responses in (0, 1) are modeled with a beta law in the mean/precision
parametrization; the mean follows a link-transformed linear predictor with
optional group-level random intercepts or intercept+slope pairs.

Three inference engines share one model core: a nested Laplace
approximation on a hyperparameter grid (fast, deterministic), an adaptive
Metropolis-within-Gibbs sampler (the simulation cross-check), and maximum
likelihood via per-group Laplace integration with profile intervals.
Model choice uses the log marginal likelihood, DIC and cross-validatory
CPO; prior robustness is quantified with calibrated Hellinger scans.
"""

from .config import AnalysisConfig, load_csv
from .density import MarginalDensity, kde_density
from .distributions import (
    BetaMeanPrecision,
    DomainError,
    GammaShapeRate,
    StudentTParams,
)
from .laplace import FitResult, LaplaceOptions, ThetaGrid, fit_laplace, grid_log_evidence
from .likelihood import (
    MLFit,
    ProfileInterval,
    marginal_loglik,
    ml_fit,
    profile_interval,
)
from .mcmc import ChainOutput, McmcConfig, run_mcmc
from .model import Dataset, HyperPoint, ModelContext, ModelSpec
from .priors import (
    ElicitationInput,
    PriorSpec,
    WishartPrior,
    default_priors,
    elicit_gamma_prior,
    elicited_range_roundtrip,
)
from .selection import CpoResult, ModelComparison, compare_models, cpo, dic, log_marginal_likelihood
from .sensitivity import (
    SensitivityReport,
    calibrate_prior,
    gamma_hellinger_closed,
    hellinger,
    sensitivity_ratio,
    sensitivity_scan,
)
from .simulate import SimulatedStudy, SimulationTruth, simulate_study

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig",
    "BetaMeanPrecision",
    "ChainOutput",
    "CpoResult",
    "Dataset",
    "DomainError",
    "ElicitationInput",
    "FitResult",
    "GammaShapeRate",
    "HyperPoint",
    "LaplaceOptions",
    "MLFit",
    "MarginalDensity",
    "McmcConfig",
    "ModelComparison",
    "ModelContext",
    "ModelSpec",
    "PriorSpec",
    "ProfileInterval",
    "SensitivityReport",
    "SimulatedStudy",
    "SimulationTruth",
    "StudentTParams",
    "ThetaGrid",
    "WishartPrior",
    "calibrate_prior",
    "compare_models",
    "cpo",
    "default_priors",
    "dic",
    "elicit_gamma_prior",
    "elicited_range_roundtrip",
    "fit_laplace",
    "gamma_hellinger_closed",
    "grid_log_evidence",
    "hellinger",
    "kde_density",
    "load_csv",
    "log_marginal_likelihood",
    "marginal_loglik",
    "ml_fit",
    "profile_interval",
    "run_mcmc",
    "sensitivity_ratio",
    "sensitivity_scan",
    "simulate_study",
    "__version__",
]
