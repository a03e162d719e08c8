"""Model core: links, design expansion, joint posterior derivatives."""

import warnings

import numpy as np
import pytest
from scipy import stats

from betamix.distributions import DomainError
from betamix.model import (
    LINKS,
    Dataset,
    HyperPoint,
    ModelContext,
    ModelSpec,
    build_design,
    joint_grad_hessian,
    joint_log_posterior,
)
from betamix.priors import default_priors
from betamix.simulate import simulate_study


# -- links -------------------------------------------------------------------


@pytest.mark.parametrize("name", ["logit", "probit", "cloglog"])
def test_link_roundtrip_and_derivatives(name, rng):
    link = LINKS[name]
    mu = rng.uniform(0.02, 0.98, size=50)
    eta = link.fwd(mu)
    np.testing.assert_allclose(link.inv(eta), mu, rtol=1e-10, atol=1e-12)
    h = 1e-6
    fd1 = (link.inv(eta + h) - link.inv(eta - h)) / (2 * h)
    np.testing.assert_allclose(link.dmu_deta(eta, link.inv(eta)), fd1, rtol=5e-5, atol=1e-8)
    h2 = 1e-4
    fd2 = (link.inv(eta + h2) - 2 * link.inv(eta) + link.inv(eta - h2)) / (h2 * h2)
    np.testing.assert_allclose(link.d2mu_deta2(eta, link.inv(eta)), fd2, rtol=5e-4, atol=1e-6)


def test_probit_matches_normal_cdf():
    eta = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(LINKS["probit"].inv(eta), stats.norm.cdf(eta), rtol=1e-12)


# -- dataset validation ------------------------------------------------------


def test_dataset_rejects_boundary_response():
    with pytest.raises(DomainError, match=r"rows \[2\]"):
        Dataset([0.5, 1.0, 0.25], ["a", "a", "b"])
    with pytest.raises(DomainError, match=r"rows \[1, 3\]"):
        Dataset([0.0, 0.5, -0.1], ["a", "a", "b"])


def test_dataset_rejects_missing_values():
    with pytest.raises(DomainError, match="rows"):
        Dataset([0.5, np.nan, 0.25], ["a", "a", "b"])
    with pytest.raises(DomainError, match="income"):
        Dataset([0.5, 0.5], ["a", "b"], {"income": [1.0, np.inf]})
    with pytest.raises(DomainError, match="length"):
        Dataset([0.5, 0.5], ["a"])


# -- design expansion --------------------------------------------------------


def test_categorical_expansion_against_baseline():
    data = Dataset(
        [0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
        ["g1", "g1", "g2", "g2", "g3", "g3"],
        {
            "size": ["Large", "Medium", "Small", "Large", "Medium", "Small"],
            "income": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        },
    )
    spec = ModelSpec(fixed=("size", "income"), random="intercept")
    info = build_design(data, spec)
    assert info.labels == ("intercept", "beta_size_Medium", "beta_size_Small", "beta_income") or all(
        lab in " ".join(info.labels) for lab in ("size_Medium", "size_Small", "income")
    )
    x = info.X
    assert x.shape == (6, 4)
    np.testing.assert_allclose(x[:, 0], 1.0)
    # rows are in canonical order; identify dummies via the original values
    size = data.columns["size"]
    med = [i for i, v in enumerate(size) if v == "Medium"]
    np.testing.assert_allclose(x[med, 1], 1.0)
    large = [i for i, v in enumerate(size) if v == "Large"]
    np.testing.assert_allclose(x[large, 1:3], 0.0)


def test_explicit_baseline_changes_contrasts():
    data = Dataset(
        [0.2, 0.3, 0.4, 0.5],
        ["g1", "g1", "g2", "g2"],
        {"size": ["Large", "Medium", "Small", "Medium"]},
    )
    spec = ModelSpec(fixed=("size",), random="none", baselines={"size": "Small"})
    info = build_design(data, spec)
    joined = " ".join(info.labels)
    assert "Small" not in joined
    assert "Large" in joined and "Medium" in joined


def test_constant_and_duplicate_columns_dropped():
    data = Dataset(
        [0.2, 0.3, 0.4, 0.5],
        ["g1", "g1", "g2", "g2"],
        {"flat": [2.0, 2.0, 2.0, 2.0], "income": [0.1, 0.2, 0.3, 0.4], "copy": [0.1, 0.2, 0.3, 0.4]},
    )
    spec = ModelSpec(fixed=("flat", "income", "copy"), random="none")
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        info = build_design(data, spec)
    assert len(info.dropped) == 2
    assert info.X.shape[1] == 2  # intercept + income
    assert len(rec) >= 1


def test_unknown_column_raises():
    data = Dataset([0.2, 0.3], ["a", "b"], {"income": [0.0, 1.0]})
    spec = ModelSpec(fixed=("wealth",), random="none")
    with pytest.raises(DomainError, match="wealth"):
        build_design(data, spec)


# -- hyperparameter coordinates ----------------------------------------------


def test_hyperpoint_natural_roundtrip():
    hp0 = HyperPoint.from_natural(93.0)
    assert hp0.q == 0 and hp0.natural() == {"phi": pytest.approx(93.0)}
    hp1 = HyperPoint.from_natural(93.0, 64.0)
    nat = hp1.natural()
    assert nat["tau1_sq"] == pytest.approx(64.0)
    hp2 = HyperPoint.from_natural(93.0, 64.0, 533.0, 0.75)
    nat2 = hp2.natural()
    assert nat2["tau2_sq"] == pytest.approx(533.0)
    assert nat2["rho_corr"] == pytest.approx(0.75)
    back = HyperPoint.from_array(hp2.as_array())
    assert back == hp2


def test_hyperpoint_precision_matrix_inverts_the_covariance():
    """(tau1_sq, tau2_sq, rho_corr) describe the inverse of the b covariance."""
    t1, t2, c = 64.0, 533.0, 0.75
    hp = HyperPoint.from_natural(93.0, t1, t2, c)
    q_mat = hp.precision_matrix()
    cov = np.array(
        [
            [1.0 / t1, c / np.sqrt(t1 * t2)],
            [c / np.sqrt(t1 * t2), 1.0 / t2],
        ]
    )
    np.testing.assert_allclose(q_mat @ cov, np.eye(2), atol=1e-12)
    # positive definite even at extreme correlation coordinates
    hp_ext = HyperPoint(0.0, (0.0, 0.0, 8.0))
    assert np.all(np.linalg.eigvalsh(hp_ext.precision_matrix()) > 0.0)


@pytest.mark.parametrize(
    "hp",
    [
        HyperPoint.from_natural(93.0),
        HyperPoint.from_natural(93.0, 64.0),
        HyperPoint.from_natural(20.0, 5.0, 80.0, -0.4),
    ],
)
def test_hyperpoint_log_jacobian_matches_finite_differences(hp):
    """|d(natural)/d(unconstrained)| where natural = (phi, Q entries)."""

    def natural_vec(arr):
        h = HyperPoint.from_array(arr)
        out = [h.phi]
        q_mat = h.precision_matrix()
        if q_mat is not None:
            if h.q == 1:
                out.append(q_mat[0, 0])
            else:
                out.extend([q_mat[0, 0], q_mat[0, 1], q_mat[1, 1]])
        return np.array(out)

    arr = hp.as_array()
    eps = 1e-6
    jac = np.empty((arr.size, arr.size))
    for j in range(arr.size):
        up, dn = arr.copy(), arr.copy()
        up[j] += eps
        dn[j] -= eps
        jac[:, j] = (natural_vec(up) - natural_vec(dn)) / (2 * eps)
    fd_logdet = np.log(abs(np.linalg.det(jac)))
    assert hp.log_jacobian() == pytest.approx(fd_logdet, rel=1e-6, abs=1e-6)


def test_hyperpoint_validation():
    with pytest.raises(DomainError):
        HyperPoint.from_natural(-1.0)
    with pytest.raises(DomainError):
        HyperPoint.from_natural(1.0, -2.0)
    with pytest.raises(DomainError):
        HyperPoint.from_natural(1.0, 2.0, 3.0, 1.0)
    with pytest.raises(DomainError):
        HyperPoint(0.0, (1.0, 2.0))


# -- joint posterior ---------------------------------------------------------


def _toy(seed=5, q=1):
    random = {0: "none", 1: "intercept", 2: "intercept+slope"}[q]
    s = simulate_study(seed=seed, n_groups=5, n_total=40, random=random)
    return s.data, s.spec, default_priors(s.spec)


@pytest.mark.parametrize("q", [0, 1, 2])
def test_joint_gradient_hessian_match_finite_differences(q, rng):
    data, spec, priors = _toy(q=q)
    ctx = ModelContext(data, spec, priors)
    dim = len(ctx.latent_names)
    theta = {
        0: HyperPoint.from_natural(80.0),
        1: HyperPoint.from_natural(80.0, 40.0),
        2: HyperPoint.from_natural(80.0, 40.0, 300.0, 0.3),
    }[q]
    for _ in range(4):
        x = rng.normal(scale=0.3, size=dim)
        g, h_block = joint_grad_hessian(x, theta, data, spec, priors)
        dense = h_block.to_dense()
        np.testing.assert_allclose(dense, dense.T, atol=1e-10)
        eps = 1e-6
        fd_g = np.empty(dim)
        fd_h = np.empty((dim, dim))
        for j in range(dim):
            up, dn = x.copy(), x.copy()
            up[j] += eps
            dn[j] -= eps
            fd_g[j] = (
                joint_log_posterior(up, theta, data, spec, priors)
                - joint_log_posterior(dn, theta, data, spec, priors)
            ) / (2 * eps)
            gu, _ = joint_grad_hessian(up, theta, data, spec, priors)
            gd, _ = joint_grad_hessian(dn, theta, data, spec, priors)
            fd_h[:, j] = (gu - gd) / (2 * eps)
        np.testing.assert_allclose(g, fd_g, rtol=2e-5, atol=2e-5)
        np.testing.assert_allclose(dense, 0.5 * (fd_h + fd_h.T), rtol=5e-4, atol=5e-4)


def test_joint_log_posterior_invariant_to_row_order(rng):
    n = 30
    y = rng.uniform(0.1, 0.9, size=n)
    group = rng.choice(["u1", "u2", "u3", "u4"], size=n)
    income = rng.normal(size=n)
    spec = ModelSpec(fixed=("income",), random="intercept")
    priors = default_priors(spec)
    data = Dataset(y, group, {"income": income})
    perm = rng.permutation(n)
    shuffled = Dataset(y[perm], group[perm], {"income": income[perm]})
    ctx = ModelContext(data, spec, priors)
    theta = HyperPoint.from_natural(90.0, 30.0)
    x = rng.normal(scale=0.2, size=len(ctx.latent_names))
    a = joint_log_posterior(x, theta, data, spec, priors)
    b = joint_log_posterior(x, theta, shuffled, spec, priors)
    assert a == b


def test_block_hessian_cholesky_matches_dense(rng):
    data, spec, priors = _toy(q=1)
    ctx = ModelContext(data, spec, priors)
    theta = HyperPoint.from_natural(60.0, 20.0)
    x = rng.normal(scale=0.2, size=len(ctx.latent_names))
    _, h_block = joint_grad_hessian(x, theta, data, spec, priors)
    dense = h_block.to_dense()
    # negative Hessian of a log-concave target is positive definite
    chol = (-h_block).cholesky()
    logdet_dense = np.linalg.slogdet(-dense)[1]
    assert chol.logdet() == pytest.approx(logdet_dense, rel=1e-10)


def test_flat_intercept_prior_translation_invariance():
    """With a flat intercept prior, shifting intercept and counter-shifting
    the latent effects leaves only the likelihood + raneff terms; verify the
    beta prior contributes nothing for the intercept direction."""
    data, spec, priors = _toy(q=1)
    ctx = ModelContext(data, spec, priors)
    theta = HyperPoint.from_natural(80.0, 40.0)
    dim = len(ctx.latent_names)
    x = np.zeros(dim)
    base = joint_log_posterior(x, theta, data, spec, priors)
    x2 = x.copy()
    i_int = ctx.latent_names.index("beta_intercept")
    x2[i_int] += 123.0
    moved = joint_log_posterior(x2, theta, data, spec, priors)
    # likelihood changes, but the prior share of the change is zero; compare
    # against a spec with a proper intercept prior to see the difference
    from dataclasses import replace

    priors_prop = replace(priors, intercept_precision=1.0)
    base_p = joint_log_posterior(x, theta, data, spec, priors_prop)
    moved_p = joint_log_posterior(x2, theta, data, spec, priors_prop)
    flat_diff = moved - base
    prop_diff = moved_p - base_p
    assert prop_diff == pytest.approx(flat_diff - 0.5 * 123.0**2, rel=1e-9)
