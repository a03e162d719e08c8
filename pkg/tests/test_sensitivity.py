"""Hellinger machinery, prior calibration, and the sensitivity scan driver."""

import numpy as np
import pytest
from scipy import stats

import betamix.sensitivity as sens_mod
from betamix.density import MarginalDensity
from betamix.distributions import DomainError, GammaShapeRate
from betamix.model import Dataset, ModelSpec
from betamix.sensitivity import (
    PHI_SCAN_DEFAULT,
    calibrate_prior,
    gamma_hellinger_closed,
    hellinger,
    sensitivity_ratio,
    sensitivity_scan,
)

TAU_BASE = GammaShapeRate(0.5, 0.001487)


def _gamma_pdf(g: GammaShapeRate):
    return stats.gamma(a=g.shape, scale=1.0 / g.rate).pdf


# -- Hellinger distance --------------------------------------------------------


def test_quadrature_matches_closed_form_on_random_gamma_pairs():
    rng = np.random.default_rng(3)
    for _ in range(50):
        g1 = GammaShapeRate(rng.uniform(0.5, 10.0), rng.uniform(0.01, 20.0))
        g2 = GammaShapeRate(rng.uniform(0.5, 10.0), rng.uniform(0.01, 20.0))
        num = hellinger(_gamma_pdf(g1), _gamma_pdf(g2), support=(0.0, np.inf))
        assert num == pytest.approx(gamma_hellinger_closed(g1, g2), abs=1e-6)


def test_hellinger_is_symmetric():
    g1 = GammaShapeRate(1.0, 0.01)
    g2 = GammaShapeRate(1.0, 0.0338)
    a = hellinger(_gamma_pdf(g1), _gamma_pdf(g2), support=(0.0, np.inf))
    b = hellinger(_gamma_pdf(g2), _gamma_pdf(g1), support=(0.0, np.inf))
    assert abs(a - b) <= 1e-10
    assert gamma_hellinger_closed(g1, g2) == gamma_hellinger_closed(g2, g1)


def test_identical_densities_have_zero_distance():
    g = GammaShapeRate(2.0, 0.5)
    assert gamma_hellinger_closed(g, g) == 0.0
    xs = np.linspace(0.01, 30.0, 1200)
    d = MarginalDensity(xs, _gamma_pdf(g)(xs))
    # sqrt(1 - bc) turns float roundoff in bc into ~1e-7
    assert hellinger(d, d) <= 1e-6


def test_disjoint_supports_have_distance_one():
    a = MarginalDensity(np.linspace(0.0, 1.0, 200), np.ones(200))
    b = MarginalDensity(np.linspace(5.0, 6.0, 200), np.ones(200))
    assert hellinger(a, b) == pytest.approx(1.0, abs=1e-12)


def test_gridded_path_matches_closed_form():
    g1 = GammaShapeRate(1.0, 0.01)
    g2 = GammaShapeRate(1.0, 0.05)
    lo = min(stats.gamma.ppf(1e-7, g1.shape, scale=1 / g1.rate),
             stats.gamma.ppf(1e-7, g2.shape, scale=1 / g2.rate))
    hi = max(stats.gamma.ppf(1 - 1e-7, g1.shape, scale=1 / g1.rate),
             stats.gamma.ppf(1 - 1e-7, g2.shape, scale=1 / g2.rate))
    xs = np.linspace(max(lo, 1e-9), hi, 3001)
    d1 = MarginalDensity(xs, _gamma_pdf(g1)(xs))
    d2 = MarginalDensity(xs, _gamma_pdf(g2)(xs))
    assert hellinger(d1, d2) == pytest.approx(gamma_hellinger_closed(g1, g2), abs=1e-3)


def test_callable_without_support_is_rejected():
    with pytest.raises(DomainError, match="support"):
        hellinger(_gamma_pdf(TAU_BASE), _gamma_pdf(PHI_SCAN_DEFAULT))


# -- published calibration tables ----------------------------------------------

PHI_TABLE = [
    # (rate of the shifted prior, Hellinger distance from Gamma(1, 0.01))
    (0.0135, 0.1058),
    (0.0178, 0.2005),
    (0.0242, 0.3005),
    (0.0338, 0.4006),
    (0.0500, 0.5046),
    (0.0765, 0.6004),
]

TAU_TABLE = [
    # (rate of the shifted prior, Hellinger distance from Gamma(0.5, 0.001487))
    (0.00225, 0.1030),
    (0.00350, 0.2086),
    (0.00550, 0.3085),
    (0.00880, 0.4017),
    (0.01600, 0.5031),
    (0.03300, 0.6022),
]


@pytest.mark.parametrize("rate, expected", PHI_TABLE)
def test_precision_scan_table(rate, expected):
    h = gamma_hellinger_closed(PHI_SCAN_DEFAULT, GammaShapeRate(1.0, rate))
    tol = 5e-3 if expected == 0.1058 else 1e-3
    assert h == pytest.approx(expected, abs=tol)


@pytest.mark.parametrize("rate, expected", TAU_TABLE)
def test_variance_scan_table(rate, expected):
    h = gamma_hellinger_closed(TAU_BASE, GammaShapeRate(0.5, rate))
    assert h == pytest.approx(expected, abs=1e-3)


def test_calibrate_prior_reproduces_published_rates():
    # invert the table rows: calibrating to the tabulated distance recovers
    # the tabulated rate
    phi_cal = calibrate_prior(PHI_SCAN_DEFAULT, 0.3005)
    assert phi_cal.shape == 1.0
    assert phi_cal.rate == pytest.approx(0.0242, abs=5e-5)
    assert gamma_hellinger_closed(PHI_SCAN_DEFAULT, phi_cal) == pytest.approx(0.3005, abs=1e-6)

    tau_cal = calibrate_prior(TAU_BASE, 0.4017)
    assert tau_cal.shape == 0.5
    assert tau_cal.rate == pytest.approx(0.0088, abs=5e-5)
    assert gamma_hellinger_closed(TAU_BASE, tau_cal) == pytest.approx(0.4017, abs=1e-6)


def test_calibrate_prior_rejects_bad_targets():
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(DomainError):
            calibrate_prior(PHI_SCAN_DEFAULT, bad)


def test_calibrated_rate_monotone_in_target():
    rates = [calibrate_prior(PHI_SCAN_DEFAULT, t).rate for t in (0.1, 0.3, 0.5, 0.7)]
    assert all(b > a for a, b in zip(rates, rates[1:]))


def test_sensitivity_ratio_guards_zero_prior_shift():
    xs = np.linspace(0.0, 1.0, 50)
    d = MarginalDensity(xs, np.ones(50))
    with pytest.raises(DomainError):
        sensitivity_ratio(d, d, 0.0)


# -- the scan driver -----------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_data():
    rng = np.random.default_rng(31)
    mu = 0.55
    y = np.clip(rng.beta(mu * 80, (1 - mu) * 80, size=40), 1e-4, 1 - 1e-4)
    return Dataset(y, ["g1"] * 20 + ["g2"] * 20)


@pytest.fixture(scope="module")
def tiny_scan(tiny_data):
    spec = ModelSpec(fixed=(), random="none")
    return sensitivity_scan(tiny_data, spec, param="phi", targets=(0.2, 0.4))


def test_scan_rows_hit_their_targets(tiny_scan):
    assert tiny_scan.param == "phi"
    assert tiny_scan.marginal_name == "phi"
    assert tiny_scan.base_prior == PHI_SCAN_DEFAULT
    assert len(tiny_scan.rows) == 2
    for row, t in zip(tiny_scan.rows, (0.2, 0.4)):
        assert row.ok
        assert row.prior_h == pytest.approx(t, abs=1e-6)
        assert row.prior.rate > PHI_SCAN_DEFAULT.rate
        assert "phi" in row.summary


def test_scan_posterior_moves_less_than_prior(tiny_scan):
    hs = [row.posterior_h for row in tiny_scan.rows]
    assert hs[0] < hs[1]
    for row in tiny_scan.rows:
        assert 0.0 < row.posterior_h < row.prior_h
        assert row.ratio == pytest.approx(row.posterior_h / row.prior_h, rel=1e-12)
        assert row.ratio < 1.0


def test_scan_validates_targets(tiny_data):
    spec = ModelSpec(fixed=(), random="none")
    with pytest.raises(DomainError, match="strictly increasing"):
        sensitivity_scan(tiny_data, spec, targets=(0.3, 0.3))
    with pytest.raises(DomainError, match="strictly in"):
        sensitivity_scan(tiny_data, spec, targets=(0.2, 1.0))
    with pytest.raises(DomainError):
        sensitivity_scan(tiny_data, spec, targets=())


def test_scan_validates_parameter(tiny_data):
    spec = ModelSpec(fixed=(), random="none")
    with pytest.raises(DomainError, match="'phi' or 'tau'"):
        sensitivity_scan(tiny_data, spec, param="sigma")
    with pytest.raises(DomainError, match="random-effect"):
        sensitivity_scan(tiny_data, spec, param="tau")


def test_failed_refit_is_recorded_not_raised(tiny_data, monkeypatch, tmp_path):
    spec = ModelSpec(fixed=(), random="none")
    real = sens_mod.fit_laplace
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:  # default fit and first target succeed
            raise RuntimeError("boom")
        return real(*args, **kwargs)

    monkeypatch.setattr(sens_mod, "fit_laplace", flaky)
    report = sensitivity_scan(tiny_data, spec, param="phi", targets=(0.2, 0.4))
    assert report.rows[0].ok
    assert not report.rows[1].ok
    assert report.rows[1].error == "RuntimeError: boom"
    assert np.isnan(report.rows[1].ratio)
    assert len(report.ok_rows()) == 1

    out = tmp_path / "scan.csv"
    report.write_csv(out)
    text = out.read_text()
    assert "RuntimeError: boom" in text


def test_report_csv_layout(tiny_scan, tmp_path):
    out = tmp_path / "scan.csv"
    tiny_scan.write_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == (
        "target,shape,rate,prior_hellinger,posterior_hellinger,sensitivity_ratio,error"
    )
    assert len(lines) == 3

    wide = tmp_path / "scan_summary.csv"
    tiny_scan.write_summary_csv(wide)
    rows = wide.read_text().strip().splitlines()
    header = rows[0].split(",")
    assert header[:3] == ["parameter", "default_mean", "default_sd"]
    assert "H0.2_mean" in header and "H0.4_sd" in header
    # one body row per parameter in the default summary
    assert len(rows) == 1 + len(tiny_scan.default_summary)
