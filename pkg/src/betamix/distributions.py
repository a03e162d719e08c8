"""Log densities, score functions and quantile routines shared by every engine.

The beta distribution is handled exclusively in its mean/precision
parametrization: for mean ``mu`` in (0, 1) and precision ``phi > 0`` the
density is

    f(y) = Gamma(phi) / (Gamma(mu phi) Gamma((1 - mu) phi))
           * y^(mu phi - 1) * (1 - y)^((1 - mu) phi - 1),

i.e. classical shape parameters ``a = mu * phi`` and ``b = (1 - mu) * phi``.
All gamma-family densities are shape/rate.  Everything is evaluated in log
space; the beta function never appears un-logged.

Functions accept scalars or numpy arrays and broadcast elementwise unless
stated otherwise.  Support violations raise :class:`DomainError` rather than
returning ``-inf`` so that engine bugs surface early.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.optimize import brentq

__all__ = [
    "DomainError",
    "BetaMeanPrecision",
    "GammaShapeRate",
    "StudentTParams",
    "beta_logpdf",
    "beta_logpdf_grad",
    "beta_logpdf_arrays",
    "beta_score_mu",
    "beta_curv_mu",
    "gamma_logpdf",
    "gaussian_logpdf_prec",
    "wishart_logpdf",
    "student_t_cdf",
    "student_t_quantile",
    "scaled_t_logpdf",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class DomainError(ValueError):
    """An argument left the support of the distribution."""


@dataclass(frozen=True)
class BetaMeanPrecision:
    """Beta distribution by mean ``mu`` in (0, 1) and precision ``phi > 0``."""

    mu: float
    phi: float

    def __post_init__(self) -> None:
        if not (0.0 < self.mu < 1.0):
            raise DomainError(f"mu must lie strictly in (0, 1), got {self.mu}")
        if not self.phi > 0.0:
            raise DomainError(f"phi must be positive, got {self.phi}")

    @property
    def shape1(self) -> float:
        return self.mu * self.phi

    @property
    def shape2(self) -> float:
        return (1.0 - self.mu) * self.phi

    @property
    def variance(self) -> float:
        return self.mu * (1.0 - self.mu) / (1.0 + self.phi)


@dataclass(frozen=True)
class GammaShapeRate:
    """Gamma distribution with shape ``shape`` and rate ``rate`` (mean shape/rate)."""

    shape: float
    rate: float

    def __post_init__(self) -> None:
        if not self.shape > 0.0:
            raise DomainError(f"shape must be positive, got {self.shape}")
        if not self.rate > 0.0:
            raise DomainError(f"rate must be positive, got {self.rate}")

    @property
    def mean(self) -> float:
        return self.shape / self.rate


@dataclass(frozen=True)
class StudentTParams:
    """Location-scale Student t.

    ``scale`` is the *squared* scale (variance-like) parameter: the marginal
    of ``b`` with ``b | tau ~ N(0, 1/tau)`` and ``tau ~ Gamma(a1, a2)`` is a
    ``StudentTParams(0, a2 / a1, 2 * a1)``.  As ``df -> inf`` the density
    approaches a ``N(location, scale)`` (scale read as variance).
    """

    location: float
    scale: float
    df: float

    def __post_init__(self) -> None:
        if not self.scale > 0.0:
            raise DomainError(f"scale must be positive, got {self.scale}")
        if not self.df > 0.0:
            raise DomainError(f"df must be positive, got {self.df}")


def beta_logpdf_arrays(y, mu, phi):
    """Vectorized beta log density; ``y``/``mu`` arrays, ``phi`` scalar or array.

    This is the engine-facing form; it validates supports but skips the
    dataclass wrapper.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(y <= 0.0) or np.any(y >= 1.0):
        raise DomainError("y must lie strictly in (0, 1)")
    if np.any(mu <= 0.0) or np.any(mu >= 1.0):
        raise DomainError("mu must lie strictly in (0, 1)")
    if np.any(phi <= 0.0):
        raise DomainError("phi must be positive")
    a = mu * phi
    b = (1.0 - mu) * phi
    return (
        special.gammaln(phi)
        - special.gammaln(a)
        - special.gammaln(b)
        + (a - 1.0) * np.log(y)
        + (b - 1.0) * np.log1p(-y)
    )


def beta_logpdf(y, p: BetaMeanPrecision):
    """Log density of the mean/precision beta at ``y`` (scalar or array)."""
    return beta_logpdf_arrays(y, p.mu, p.phi)


def beta_score_mu(y, mu, phi):
    """d/dmu of the beta log density (array form)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    a = mu * phi
    b = (1.0 - mu) * phi
    return phi * (special.digamma(b) - special.digamma(a) + np.log(y) - np.log1p(-y))


def beta_curv_mu(mu, phi):
    """d^2/dmu^2 of the beta log density; free of ``y``."""
    mu = np.asarray(mu, dtype=float)
    a = mu * phi
    b = (1.0 - mu) * phi
    return -(phi**2) * (special.polygamma(1, a) + special.polygamma(1, b))


def beta_logpdf_grad(y, p: BetaMeanPrecision):
    """Gradient of the beta log density in (mu, phi).

    Returns a pair ``(d/dmu, d/dphi)``, each shaped like ``y``.
    """
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0) or np.any(y >= 1.0):
        raise DomainError("y must lie strictly in (0, 1)")
    mu, phi = p.mu, p.phi
    a = mu * phi
    b = (1.0 - mu) * phi
    dmu = beta_score_mu(y, mu, phi)
    dphi = (
        special.digamma(phi)
        - mu * special.digamma(a)
        - (1.0 - mu) * special.digamma(b)
        + mu * np.log(y)
        + (1.0 - mu) * np.log1p(-y)
    )
    return dmu, dphi


def gamma_logpdf(x, g: GammaShapeRate):
    """Shape/rate gamma log density at ``x > 0``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0.0):
        raise DomainError("x must be positive")
    return (
        g.shape * np.log(g.rate)
        - special.gammaln(g.shape)
        + (g.shape - 1.0) * np.log(x)
        - g.rate * x
    )


def gaussian_logpdf_prec(x, mean, prec):
    """Multivariate normal log density parametrized by the precision matrix.

    ``prec`` may be a scalar (dimension 1) or a symmetric positive definite
    matrix; the log determinant comes from its Cholesky factor.  Raises
    :class:`DomainError` if the factorization fails.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.broadcast_to(np.asarray(mean, dtype=float), x.shape)
    prec = np.atleast_2d(np.asarray(prec, dtype=float))
    d = x.shape[0]
    if prec.shape != (d, d):
        raise DomainError(f"precision must be {d}x{d}, got {prec.shape}")
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise DomainError("precision matrix is not positive definite") from exc
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    r = x - mean
    quad = float(r @ prec @ r)
    return -0.5 * d * LOG_2PI + 0.5 * logdet - 0.5 * quad


def wishart_logpdf(q_mat, df: float, scale):
    """Wishart log density under the convention ``E[Q] = df * scale``.

    With that convention the dimension-1 case reduces exactly to
    ``gamma_logpdf(q, GammaShapeRate(df / 2, 1 / (2 * scale)))``.  Requires
    ``df > dim - 1`` and both matrices symmetric positive definite.
    """
    q_mat = np.atleast_2d(np.asarray(q_mat, dtype=float))
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    d = q_mat.shape[0]
    if q_mat.shape != (d, d) or scale.shape != (d, d):
        raise DomainError("Q and scale must be square matrices of equal size")
    if not df > d - 1:
        raise DomainError(f"df must exceed dim - 1 = {d - 1}, got {df}")
    try:
        chol_q = np.linalg.cholesky(q_mat)
        chol_s = np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise DomainError("Q and scale must be positive definite") from exc
    logdet_q = 2.0 * np.sum(np.log(np.diag(chol_q)))
    logdet_s = 2.0 * np.sum(np.log(np.diag(chol_s)))
    # tr(S^-1 Q) via triangular solves against the Cholesky factor of S.
    half = np.linalg.solve(chol_s, q_mat)
    trace = float(np.trace(np.linalg.solve(chol_s, half.T)))
    return (
        0.5 * (df - d - 1.0) * logdet_q
        - 0.5 * trace
        - 0.5 * df * d * np.log(2.0)
        - 0.5 * df * logdet_s
        - special.multigammaln(0.5 * df, d)
    )


def student_t_cdf(x: float, df: float) -> float:
    """CDF of the standard Student t via the regularized incomplete beta."""
    if not df > 0.0:
        raise DomainError(f"df must be positive, got {df}")
    x = float(x)
    if x == 0.0:
        return 0.5
    tail = 0.5 * special.betainc(0.5 * df, 0.5, df / (df + x * x))
    return tail if x < 0.0 else 1.0 - tail


def student_t_quantile(prob: float, df: float) -> float:
    """Quantile of the standard Student t by bracketed root finding.

    Robustness over speed: expand a bracket geometrically, then Brent on the
    incomplete-beta CDF.  ``prob`` must lie strictly in (0, 1).
    """
    if not (0.0 < prob < 1.0):
        raise DomainError(f"prob must lie strictly in (0, 1), got {prob}")
    if prob == 0.5:
        return 0.0

    def f(x: float) -> float:
        return student_t_cdf(x, df) - prob

    lo, hi = -1.0, 1.0
    while f(lo) > 0.0:
        lo *= 2.0
        if not np.isfinite(lo):
            raise DomainError("failed to bracket the t quantile")
    while f(hi) < 0.0:
        hi *= 2.0
        if not np.isfinite(hi):
            raise DomainError("failed to bracket the t quantile")
    return float(brentq(f, lo, hi, xtol=1e-13, rtol=8.9e-16))


def scaled_t_logpdf(x, p: StudentTParams):
    """Log density of the location/squared-scale Student t (see StudentTParams)."""
    x = np.asarray(x, dtype=float)
    z = x - p.location
    d, s2 = p.df, p.scale
    return (
        special.gammaln(0.5 * (d + 1.0))
        - special.gammaln(0.5 * d)
        - 0.5 * np.log(d * np.pi * s2)
        - 0.5 * (d + 1.0) * np.log1p(z * z / (d * s2))
    )
