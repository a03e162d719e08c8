"""Nested-grid posterior engine: analytic oracles, stability, invariances."""

from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from betamix.density import MarginalDensity
from betamix.distributions import GammaShapeRate, gamma_logpdf
from betamix.laplace import (
    LaplaceOptions,
    ThetaGrid,
    explore_theta,
    find_conditional_mode,
    fit_laplace,
    grid_log_evidence,
    marginal_hyper,
)
from betamix.model import Dataset, HyperPoint, ModelContext, ModelSpec
from betamix.priors import default_priors
from betamix.sensitivity import hellinger
from betamix.simulate import simulate_study

PARAMS = ("beta_intercept", "beta_size_Medium", "beta_size_Small", "beta_income", "phi", "tau1_sq")


# -- grid explorer on closed-form targets -------------------------------------


def test_gaussian_target_recovers_marginals_and_evidence():
    """A correlated 2-d Gaussian in identity coordinates is an exact oracle:
    the axis marginals are known and the evidence offset is planted."""
    mean = np.array([1.2, -0.7])
    cov = np.array([[1.9, 0.8], [0.8, 0.9]])
    prec = np.linalg.inv(cov)
    offset = 3.25
    norm_const = -0.5 * np.linalg.slogdet(2 * np.pi * cov)[1]

    def logpost(th):
        d = th - mean
        return offset + norm_const - 0.5 * d @ prec @ d

    coarse = explore_theta(logpost, mean + 0.9, ("a", "b"), ("identity", "identity"))
    assert grid_log_evidence(coarse) == pytest.approx(offset, abs=1e-2)
    # a wider cutoff removes the tail-truncation floor on full-support oracles
    grid = explore_theta(
        logpost, mean + 0.9, ("a", "b"), ("identity", "identity"), step=0.35, cutoff=12.0
    )
    assert grid_log_evidence(grid) == pytest.approx(offset, abs=1e-2)
    for j in range(2):
        sd = np.sqrt(cov[j, j])
        xs = np.linspace(mean[j] - 8 * sd, mean[j] + 8 * sd, 2001)
        exact = MarginalDensity(xs, stats.norm.pdf(xs, mean[j], sd))
        h_fine = hellinger(exact, marginal_hyper(grid, j))
        assert h_fine < 0.01
        # the finer, wider grid beats the default on a correlated target
        assert h_fine < hellinger(exact, marginal_hyper(coarse, j))
        assert grid.hyper_mean(j) == pytest.approx(mean[j], abs=5e-3 * sd)


def test_gamma_target_on_log_axis():
    """Planting a Gamma law for tau = exp(u) checks the exp back-transform."""
    g = GammaShapeRate(30.0, 0.5)
    offset = -4.0

    def logpost(u):
        tau = np.exp(u[0])
        return offset + gamma_logpdf(tau, g) + u[0]

    grid = explore_theta(logpost, [np.log(55.0)], ("tau",), ("exp",), step=0.35, cutoff=12.0)
    assert grid_log_evidence(grid) == pytest.approx(offset, abs=1e-2)
    got = marginal_hyper(grid, 0)
    xs = np.linspace(stats.gamma.ppf(1e-7, 30.0, scale=2.0), stats.gamma.ppf(1 - 1e-9, 30.0, scale=2.0), 3001)
    exact = MarginalDensity(xs, stats.gamma.pdf(xs, 30.0, scale=2.0))
    assert hellinger(exact, got) < 0.01
    assert grid.hyper_mean(0) == pytest.approx(60.0, rel=5e-3)


def test_explorer_grid_grows_with_finer_step_and_wider_cutoff():
    def logpost(th):
        return -0.5 * float(th[0] ** 2 + th[1] ** 2)

    names, tr = ("a", "b"), ("identity", "identity")
    base = explore_theta(logpost, np.zeros(2), names, tr, step=0.5, cutoff=4.0)
    finer = explore_theta(logpost, np.zeros(2), names, tr, step=0.25, cutoff=4.0)
    wider = explore_theta(logpost, np.zeros(2), names, tr, step=0.5, cutoff=8.0)
    assert base.size < finer.size
    assert base.size < wider.size
    # weights are a proper distribution over retained points
    for g in (base, finer, wider):
        assert g.weights.min() >= 0.0
        assert np.sum(g.weights) == pytest.approx(1.0, abs=1e-12)


# -- exact-quadrature oracle for a fixed-effects-only fit ----------------------


def test_no_random_effects_evidence_matches_quadrature():
    """Intercept-only beta regression: the evidence is a 2-d integral."""
    rng = np.random.default_rng(12)
    n = 25
    y = np.clip(rng.beta(0.55 * 70, 0.45 * 70, size=n), 1e-4, 1 - 1e-4)
    data = Dataset(y, ["all"] * n)
    spec = ModelSpec(fixed=(), random="none")
    priors = default_priors(spec)
    fit = fit_laplace(data, spec, options=LaplaceOptions(step=0.35, cutoff=10.0))

    from betamix.distributions import beta_logpdf_arrays

    def integrand(b0, phi):
        mu = 1.0 / (1.0 + np.exp(-b0))
        ll = float(np.sum(beta_logpdf_arrays(y, np.full(n, mu), np.full(n, phi))))
        return np.exp(ll + gamma_logpdf(phi, priors.phi))

    val, err = integrate.dblquad(integrand, 1.0, 3000.0, -2.0, 2.0)
    assert err < 1e-6 * val
    assert fit.gof["lml"] == pytest.approx(np.log(val), abs=1e-3)
    # the phi marginal agrees with the quadrature posterior too

    def phi_post(phi):
        v, _ = integrate.quad(lambda b0: integrand(b0, phi), -2.0, 2.0)
        return v

    xs = np.linspace(25.0, 400.0, 376)
    exact = MarginalDensity(xs, np.array([phi_post(x) for x in xs]))
    assert hellinger(exact, fit.marginal("phi")) < 0.01


# -- conditional mode ----------------------------------------------------------


def test_conditional_mode_matches_generic_optimizer():
    study = simulate_study(seed=4, n_groups=5, n_total=50)
    ctx = ModelContext(study.data, study.spec, default_priors(study.spec))
    theta = HyperPoint.from_natural(90.0, 40.0)
    res = find_conditional_mode(ctx, theta)
    assert res.grad_norm < 1e-7

    dim = res.x.size
    opt = optimize.minimize(
        lambda x: -ctx.joint_log_posterior(x, theta),
        np.zeros(dim),
        method="BFGS",
        options={"gtol": 1e-9, "maxiter": 2000},
    )
    np.testing.assert_allclose(res.x, opt.x, rtol=2e-5, atol=2e-6)
    assert res.logpost == pytest.approx(-opt.fun, rel=1e-10)


# -- full-fit properties -------------------------------------------------------


def test_fit_marginal_names_and_summary(default_fit):
    assert set(PARAMS) <= set(default_fit.param_names)
    s = default_fit.summary()
    for name in PARAMS:
        row = s[name]
        assert row["sd"] > 0.0
        assert row["q0.025"] < row["mean"] < row["q0.975"]
    lo, hi = default_fit.interval("phi")
    assert lo < default_fit.posterior_mean("phi") < hi


def test_fit_is_deterministic(default_study, default_fit):
    again = fit_laplace(
        default_study.data,
        default_study.spec,
        options=LaplaceOptions(compute_gof=False),
    )
    a, b = default_fit.summary(), again.summary()
    assert a == b
    np.testing.assert_array_equal(
        default_fit.marginal("phi").pdf, again.marginal("phi").pdf
    )


def test_fit_invariant_to_row_order(default_study, default_fit, rng):
    y = default_study.data.y
    labels = np.asarray(default_study.data.group_labels)[default_study.data.groups]
    cols = {k: np.asarray(v) for k, v in default_study.data.columns.items()}
    perm = rng.permutation(y.size)
    data2 = Dataset(y[perm], labels[perm], {k: v[perm] for k, v in cols.items()})
    fit2 = fit_laplace(data2, default_study.spec, options=LaplaceOptions(compute_gof=False))
    assert fit2.summary() == default_fit.summary()


def test_grid_step_halving_moves_means_little(default_study, default_fit, fine_fit):
    for name in PARAMS:
        a = default_fit.posterior_mean(name)
        b = fine_fit.posterior_mean(name)
        scale = max(abs(a), default_fit.marginal(name).sd())
        assert abs(a - b) / scale < 5e-3, name


def test_posterior_means_near_truth(default_fit, default_study):
    truth = default_study.truth
    for name, val in truth.beta.items():
        m = default_fit.marginal(f"beta_{name}")
        assert abs(m.mean() - val) < 4.0 * m.sd()


def test_constant_column_is_dropped_not_fatal(default_study, default_fit):
    data = default_study.data
    labels = np.asarray(data.group_labels)[data.groups]
    cols = {k: np.asarray(v) for k, v in data.columns.items()}
    cols["ones"] = np.ones(data.n)
    data2 = Dataset(data.y, labels, cols)
    spec2 = replace(default_study.spec, fixed=("size", "income", "ones"))
    with pytest.warns(UserWarning):
        fit2 = fit_laplace(data2, spec2, options=LaplaceOptions(compute_gof=False))
    for name in PARAMS:
        assert fit2.posterior_mean(name) == pytest.approx(
            default_fit.posterior_mean(name), rel=1e-8
        )


@pytest.mark.parametrize("link", ["logit", "probit", "cloglog"])
def test_link_ladder_fits(link):
    study = simulate_study(seed=9, n_groups=6, n_total=90, link=link)
    fit = fit_laplace(study.data, study.spec, options=LaplaceOptions(compute_gof=False))
    assert fit.spec.link == link
    mu_scale = fit.posterior_mean("beta_intercept")
    assert np.isfinite(mu_scale)
    lo, hi = fit.interval("tau1_sq")
    assert 0.0 < lo < hi


def test_random_slope_fit_has_correlation_marginals():
    study = simulate_study(seed=2, n_groups=8, n_total=120, random="intercept+slope")
    fit = fit_laplace(study.data, study.spec, options=LaplaceOptions(compute_gof=False))
    for name in ("tau1_sq", "tau2_sq", "rho_corr"):
        assert name in fit.param_names
        m = fit.marginal(name)
        assert np.all(np.isfinite(m.pdf))
    lo, hi = fit.interval("rho_corr")
    assert -1.0 <= lo < hi <= 1.0


def test_interval_mass_is_nominal(default_fit):
    for name in PARAMS:
        lo, hi = default_fit.interval(name, 0.95)
        assert default_fit.marginal(name).prob_interval(lo, hi) == pytest.approx(0.95, abs=1e-9)


def test_unknown_parameter_raises(default_fit):
    with pytest.raises(KeyError):
        default_fit.marginal("beta_wealth")
