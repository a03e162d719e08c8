"""Shared fixtures: one synthetic study and one fit per engine, session-wide.

The expensive artifacts (Laplace fits, the reduced-protocol MCMC run, the
ML fit) are computed once and shared across test modules; everything is
seeded so reruns are bit-for-bit identical.
"""

import numpy as np
import pytest

from betamix.laplace import LaplaceOptions, fit_laplace
from betamix.likelihood import ml_fit
from betamix.mcmc import McmcConfig, run_mcmc
from betamix.simulate import simulate_study

PARAM_NAMES = (
    "beta_intercept",
    "beta_size_Medium",
    "beta_size_Small",
    "beta_income",
    "phi",
    "tau1_sq",
)


@pytest.fixture(scope="session")
def default_study():
    """The default synthetic scenario: 365 rows, 8 groups, random intercept."""
    return simulate_study(seed=0)


@pytest.fixture(scope="session")
def default_fit(default_study):
    return fit_laplace(
        default_study.data,
        default_study.spec,
        options=LaplaceOptions(compute_gof=False),
    )


@pytest.fixture(scope="session")
def fine_fit(default_study):
    """Finer hyper grid; used where marginal densities are compared pointwise."""
    return fit_laplace(
        default_study.data,
        default_study.spec,
        options=LaplaceOptions(step=0.35, compute_gof=False),
    )


@pytest.fixture(scope="session")
def reduced_mcmc(default_study):
    """Reduced sampling protocol: 3 chains x 50k sweeps, thin 8."""
    cfg = McmcConfig(n_chains=3, iterations=50_000, burn_in=10_000, thin=8, seed=0)
    return run_mcmc(default_study.data, default_study.spec, config=cfg)


@pytest.fixture(scope="session")
def default_ml(default_study):
    return ml_fit(default_study.data, default_study.spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260819)
