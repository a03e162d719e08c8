"""Maximum likelihood estimation with profile likelihood intervals.

The frequentist companion to the Bayesian engines: the random effects are
integrated out of the likelihood rather than sampled or gridded.  For a
model without random effects the marginal likelihood is a plain product of
beta densities; with random effects each group contributes a low dimensional
integral that is approximated by Laplace's method around the group's own
conditional mode (a one or two dimensional Newton search, warm started
between evaluations because the optimizer visits nearby parameter values).

``ml_fit`` maximizes the marginal log likelihood over the unconstrained
vector (fixed effects, log phi, log tau, and atanh rho when present) with a
quasi-Newton method and reports natural-scale estimates with delta-method
standard errors from the finite-difference observed information.

``profile_interval`` inverts the likelihood ratio statistic: it profiles the
log likelihood along one coordinate, re-optimizing the nuisance parameters
at every probe, brackets the points where the profile has dropped by
``chi2.ppf(level, 1) / 2`` below the maximum, and polishes the crossing with
Brent's method.  The bracketing and root finding live in
``profile_bounds``, which only sees a one dimensional callable and is
therefore easy to validate on problems with known answers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq, minimize
from scipy.stats import chi2, norm

from .distributions import DomainError, LOG_2PI, beta_logpdf_arrays, beta_score_mu, beta_curv_mu
from .model import Dataset, HyperPoint, LINKS, ModelSpec, MU_EPS, build_design

__all__ = [
    "MLFit",
    "ProfileInterval",
    "marginal_loglik",
    "ml_fit",
    "profile_bounds",
    "profile_interval",
]

_PENALTY = -1.0e10
_COORD_CAP = 50.0


class _MarginalLoglik:
    """Marginal log likelihood of (beta, hyper) with warm-started group modes.

    Callable on the unconstrained vector ``[beta, log_phi, raneff...]``.
    Instances hold per-group design slices and the previous conditional
    modes, so repeated evaluations at nearby points cost one or two Newton
    steps per group.
    """

    def __init__(self, data: Dataset, spec: ModelSpec):
        design = build_design(data, spec)
        self.spec = spec
        self.link = LINKS[spec.link]
        self.X = design.X
        self.y = data.y
        self.p = design.X.shape[1]
        self.q = spec.q
        self.n_groups = data.n_groups
        self.beta_names = tuple(f"beta_{lab}" for lab in design.labels)
        if self.q == 0:
            self.hyper_names: tuple[str, ...] = ("phi",)
            self.hyper_transforms: tuple[str, ...] = ("exp",)
        elif self.q == 1:
            self.hyper_names = ("phi", "tau1_sq")
            self.hyper_transforms = ("exp", "exp")
        else:
            self.hyper_names = ("phi", "tau1_sq", "tau2_sq", "rho_corr")
            self.hyper_transforms = ("exp", "exp", "exp", "tanh")
        self.names = self.beta_names + self.hyper_names
        self.transforms = ("identity",) * self.p + self.hyper_transforms
        self.dim = self.p + len(self.hyper_names)
        starts = data.group_starts
        ends = np.append(starts[1:], data.n)
        self._starts = np.asarray(starts)
        self._groups = data.groups
        self._slices = [slice(int(a), int(b)) for a, b in zip(starts, ends)]
        if self.q:
            self.Z = design.Z
            self._warm = np.zeros((self.n_groups, self.q))
        self.n_calls = 0

    # -- pieces ----------------------------------------------------------------

    def _eta_derivs(self, eta, y, phi):
        mu = np.clip(self.link.inv(eta), MU_EPS, 1.0 - MU_EPS)
        d1 = self.link.dmu_deta(eta, mu)
        d2 = self.link.d2mu_deta2(eta, mu)
        s_mu = beta_score_mu(y, mu, phi)
        c_mu = beta_curv_mu(mu, phi)
        return s_mu * d1, c_mu * d1 * d1 + s_mu * d2

    def _loglik_rows(self, eta, y, phi):
        mu = np.clip(self.link.inv(eta), MU_EPS, 1.0 - MU_EPS)
        return beta_logpdf_arrays(y, mu, phi)

    def _group_contribution(self, i, eta0, q_mat, half_logdet_q, phi):
        """Laplace-integrated likelihood of one group's observations."""
        sl = self._slices[i]
        y_i = self.y[sl]
        z_i = self.Z[sl]
        eta0_i = eta0[sl]
        b = self._warm[i].copy()

        def value(bvec):
            eta = eta0_i + z_i @ bvec
            return float(np.sum(self._loglik_rows(eta, y_i, phi))) - 0.5 * float(
                bvec @ q_mat @ bvec
            )

        f = value(b)
        gnorm = np.inf
        for _ in range(100):
            eta = eta0_i + z_i @ b
            s, w = self._eta_derivs(eta, y_i, phi)
            grad = z_i.T @ s - q_mat @ b
            neg_hess = q_mat - (z_i * w[:, None]).T @ z_i
            gnorm = float(np.max(np.abs(grad)))
            if gnorm < 1.0e-8 * (1.0 + abs(f)):
                break
            ridge = 0.0
            while True:
                try:
                    chol = np.linalg.cholesky(neg_hess + ridge * np.eye(self.q))
                    break
                except np.linalg.LinAlgError:
                    ridge = max(2.0 * ridge, 1.0e-8 * float(np.trace(neg_hess)), 1.0e-10)
            step = np.linalg.solve(chol.T, np.linalg.solve(chol, grad))
            # Improvement below the floating floor of the value means the
            # mode is found as precisely as the arithmetic allows.
            if 0.5 * float(grad @ step) < 1.0e-13 * (1.0 + abs(f)):
                break
            accepted = False
            for _ in range(30):
                cand = b + step
                f_cand = value(cand)
                if f_cand > f:
                    b, f = cand, f_cand
                    accepted = True
                    break
                step = 0.5 * step
            if not accepted:
                break
        if gnorm > 1.0e-3:
            # Rare stall far from stationarity: polish with a simplex search
            # so one stubborn group cannot void the whole evaluation.
            res = minimize(lambda bb: -value(bb), b, method="Nelder-Mead",
                           options={"xatol": 1.0e-10, "fatol": 1.0e-12, "maxiter": 500})
            if -res.fun >= f:
                b = np.asarray(res.x, dtype=float)
            eta = eta0_i + z_i @ b
            s, w = self._eta_derivs(eta, y_i, phi)
            grad = z_i.T @ s - q_mat @ b
            neg_hess = q_mat - (z_i * w[:, None]).T @ z_i
            if float(np.max(np.abs(grad))) > 1.0e-2:
                raise DomainError("group mode search did not converge")
        f = value(b)
        self._warm[i] = b
        sign, logdet = np.linalg.slogdet(neg_hess)
        if sign <= 0.0:
            raise DomainError("negative curvature at a group mode")
        return f + half_logdet_q - 0.5 * logdet

    def _all_groups_q1(self, eta0: np.ndarray, tau: float, phi: float) -> float:
        """All q = 1 group integrals at once: the Newton searches share every
        full-length vector pass instead of looping over groups in Python.
        Falls back to the per-group path for any group that stalls."""
        z = self.Z[:, 0]
        gidx = self._groups
        starts = self._starts
        b = self._warm[:, 0].copy()
        n_g = self.n_groups

        def values(bvec):
            eta = eta0 + z * bvec[gidx]
            rows = self._loglik_rows(eta, self.y, phi)
            return np.add.reduceat(rows, starts) - 0.5 * tau * bvec * bvec

        f = values(b)
        for _ in range(100):
            eta = eta0 + z * b[gidx]
            s, w = self._eta_derivs(eta, self.y, phi)
            grad = np.add.reduceat(z * s, starts) - tau * b
            curv = tau - np.add.reduceat(w * z * z, starts)
            scale = 1.0 + np.abs(f)
            conv = np.abs(grad) < 1.0e-8 * scale
            step = grad / np.maximum(curv, 1.0e-10)
            conv |= 0.5 * grad * step < 1.0e-13 * scale
            if conv.all():
                break
            active = ~conv
            step[conv] = 0.0
            progressed = False
            for _ in range(30):
                cand = b + step
                f_cand = values(cand)
                improve = (f_cand > f) & active
                if improve.any():
                    b[improve] = cand[improve]
                    f[improve] = f_cand[improve]
                    progressed = True
                active &= ~improve
                if not active.any():
                    break
                step[~active] = 0.0
                step[active] *= 0.5
            if not progressed:
                break

        eta = eta0 + z * b[gidx]
        s, w = self._eta_derivs(eta, self.y, phi)
        grad = np.add.reduceat(z * s, starts) - tau * b
        curv = tau - np.add.reduceat(w * z * z, starts)
        ok = (np.abs(grad) <= 1.0e-3) & (curv > 0.0)
        self._warm[:, 0] = b
        total = float(
            np.sum(f[ok]) + ok.sum() * 0.5 * np.log(tau) - 0.5 * np.sum(np.log(curv[ok]))
        )
        if not ok.all():
            q_mat = np.array([[tau]])
            half_logdet_q = 0.5 * float(np.log(tau))
            for i in np.flatnonzero(~ok):
                total += self._group_contribution(int(i), eta0, q_mat, half_logdet_q, phi)
        return total

    # -- evaluation --------------------------------------------------------------

    def __call__(self, v: np.ndarray) -> float:
        self.n_calls += 1
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise DomainError(f"expected a vector of length {self.dim}")
        if not np.all(np.isfinite(v)) or float(np.max(np.abs(v))) > _COORD_CAP:
            finite = v[np.isfinite(v)]
            return _PENALTY * (1.0 + float(np.sum(np.abs(finite))))
        beta = v[: self.p]
        hp = HyperPoint.from_array(v[self.p :])
        phi = hp.phi
        eta0 = self.X @ beta
        if self.q == 0:
            return float(np.sum(self._loglik_rows(eta0, self.y, phi)))
        q_mat = hp.precision_matrix()
        half_logdet_q = 0.5 * float(np.linalg.slogdet(q_mat)[1])
        warm_backup = self._warm.copy()
        try:
            if self.q == 1:
                return self._all_groups_q1(eta0, float(q_mat[0, 0]), phi)
            total = 0.0
            for i in range(self.n_groups):
                total += self._group_contribution(i, eta0, q_mat, half_logdet_q, phi)
        except (DomainError, np.linalg.LinAlgError):
            self._warm = warm_backup
            return _PENALTY * (1.0 + float(np.sum(np.abs(v))))
        return total

    def start_vector(self) -> np.ndarray:
        ybar = float(np.mean(self.y))
        yvar = float(np.var(self.y))
        phi0 = max(ybar * (1.0 - ybar) / max(yvar, 1.0e-12) - 1.0, 1.0)
        beta0 = np.zeros(self.p)
        beta0[0] = float(self.link.fwd(np.clip(ybar, 0.01, 0.99)))
        coords = [np.log(phi0)]
        if self.q >= 1:
            coords.append(np.log(10.0))
        if self.q == 2:
            coords.extend([np.log(10.0), 0.0])
        return np.concatenate([beta0, coords])


def marginal_loglik(beta, theta: HyperPoint, data: Dataset, spec: ModelSpec) -> float:
    """Log likelihood of (beta, theta) with the random effects integrated out.

    Exact for models without random effects; otherwise each group is
    integrated by Laplace's method around its conditional mode.  No prior
    enters anywhere.
    """
    lik = _MarginalLoglik(data, spec)
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (lik.p,):
        raise DomainError(f"beta must have length {lik.p}")
    if theta.q != spec.q:
        raise DomainError(f"theta has {theta.q} random terms but the model has {spec.q}")
    return lik(np.concatenate([beta, theta.as_array()]))


@dataclass(frozen=True)
class ProfileInterval:
    """One profile likelihood interval on the natural scale."""

    name: str
    level: float
    lower: float
    upper: float
    drop: float
    n_eval: int

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower


@dataclass
class MLFit:
    """Maximum likelihood estimates with observed-information uncertainty.

    ``params`` and ``se`` are on the natural scale (delta method);
    ``vector`` and ``se_unconstrained`` describe the same optimum in the
    unconstrained coordinates the optimizer worked in.
    """

    params: np.ndarray
    se: np.ndarray
    names: tuple[str, ...]
    transforms: tuple[str, ...]
    loglik: float
    vector: np.ndarray
    se_unconstrained: np.ndarray
    vcov_unconstrained: np.ndarray
    converged: bool
    n_obs: int
    n_groups: int
    spec: ModelSpec
    data_fingerprint: str
    n_eval: int
    message: str = ""
    _lik: _MarginalLoglik | None = field(default=None, repr=False)

    def index(self, param: str | int) -> int:
        if isinstance(param, str):
            try:
                return self.names.index(param)
            except ValueError:
                raise KeyError(f"unknown parameter {param!r}") from None
        return int(param)

    def estimate(self, param: str | int) -> float:
        return float(self.params[self.index(param)])

    def se_of(self, param: str | int) -> float:
        return float(self.se[self.index(param)])

    def wald_interval(self, param: str | int, level: float = 0.95) -> tuple[float, float]:
        """Normal-theory interval on the unconstrained scale, transformed back."""
        j = self.index(param)
        z = float(norm.ppf(0.5 * (1.0 + level)))
        lo = self.vector[j] - z * self.se_unconstrained[j]
        hi = self.vector[j] + z * self.se_unconstrained[j]
        f = _NATURAL[self.transforms[j]]
        return (f(lo), f(hi))

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for j, name in enumerate(self.names):
            lo, hi = self.wald_interval(j)
            out[name] = {
                "estimate": float(self.params[j]),
                "se": float(self.se[j]),
                "wald_lower": lo,
                "wald_upper": hi,
            }
        return out


_NATURAL: dict[str, Callable[[float], float]] = {
    "identity": lambda u: float(u),
    "exp": lambda u: float(np.exp(u)),
    "tanh": lambda u: float(np.tanh(u)),
}

_DERIV: dict[str, Callable[[float], float]] = {
    "identity": lambda u: 1.0,
    "exp": lambda u: float(np.exp(u)),
    "tanh": lambda u: float(1.0 - np.tanh(u) ** 2),
}


def _fd_hessian(fn: Callable[[np.ndarray], float], x0: np.ndarray, h: np.ndarray) -> np.ndarray:
    d = x0.size
    hess = np.empty((d, d))
    f0 = fn(x0)
    for a in range(d):
        ea = np.zeros(d)
        ea[a] = h[a]
        fpp = fn(x0 + ea)
        fmm = fn(x0 - ea)
        hess[a, a] = (fpp - 2.0 * f0 + fmm) / (h[a] * h[a])
        for c in range(a + 1, d):
            ec = np.zeros(d)
            ec[c] = h[c]
            val = (
                fn(x0 + ea + ec) - fn(x0 + ea - ec) - fn(x0 - ea + ec) + fn(x0 - ea - ec)
            ) / (4.0 * h[a] * h[c])
            hess[a, c] = val
            hess[c, a] = val
    return hess


def ml_fit(data: Dataset, spec: ModelSpec, start: np.ndarray | None = None,
           gtol: float = 1.0e-5) -> MLFit:
    """Maximize the marginal log likelihood and package the result.

    Quasi-Newton search on the unconstrained vector, with a simplex polish
    if the gradient test is not met; standard errors come from the
    finite-difference observed information at the optimum.
    """
    lik = _MarginalLoglik(data, spec)
    v0 = lik.start_vector() if start is None else np.asarray(start, dtype=float)
    if v0.shape != (lik.dim,):
        raise DomainError(f"start vector must have length {lik.dim}")

    def neg(v):
        return -lik(v)

    res = minimize(neg, v0, method="BFGS", options={"gtol": gtol, "maxiter": 500})
    best_x, best_f = res.x, res.fun
    # BFGS with difference gradients often stops on "precision loss" when the
    # gradient is already far below any scale that moves the estimates (a
    # residual gradient of 0.05 shifts every estimate by at most a few
    # percent of its standard error here); treat that as convergence and only
    # polish genuine failures.
    converged = bool(res.success) or float(np.max(np.abs(res.jac))) < 0.05
    message = str(res.message)
    if not converged:
        polish = minimize(
            neg, best_x, method="Nelder-Mead",
            options={"xatol": 1.0e-9, "fatol": 1.0e-11, "maxiter": 2000},
        )
        if polish.fun <= best_f:
            best_x, best_f = polish.x, polish.fun
        again = minimize(neg, best_x, method="BFGS", options={"gtol": gtol, "maxiter": 200})
        if again.fun <= best_f:
            best_x, best_f = again.x, again.fun
        converged = bool(
            again.success or polish.success
            or float(np.max(np.abs(again.jac))) < 0.05
        )
        message = str(again.message)

    vhat = np.asarray(best_x, dtype=float)
    loglik = -float(best_f)

    # Two-stage observed information: a coarse pass sets per-coordinate
    # scales, a second pass refines.  Steps are capped so a flat direction
    # cannot push a probe into the penalty region and wreck the differences.
    hess = _fd_hessian(lik, vhat, np.minimum(0.05 * (1.0 + np.abs(vhat)), 0.5))
    info = -hess
    eigvals, eigvecs = np.linalg.eigh(info)
    floor = max(1.0e-8 * float(np.max(eigvals)), 1.0e-12)
    eigvals = np.maximum(eigvals, floor)
    sigma = np.sqrt((eigvecs**2) @ (1.0 / eigvals))
    hess = _fd_hessian(lik, vhat, np.clip(0.1 * sigma, 1.0e-4, 0.5))
    info = -hess
    eigvals, eigvecs = np.linalg.eigh(info)
    eigvals = np.maximum(eigvals, max(1.0e-8 * float(np.max(eigvals)), 1.0e-12))
    vcov = (eigvecs / eigvals) @ eigvecs.T
    se_u = np.sqrt(np.diag(vcov))

    params = np.array([_NATURAL[t](u) for t, u in zip(lik.transforms, vhat)])
    se_nat = np.array(
        [abs(_DERIV[t](u)) * s for t, u, s in zip(lik.transforms, vhat, se_u)]
    )

    return MLFit(
        params=params,
        se=se_nat,
        names=lik.names,
        transforms=lik.transforms,
        loglik=loglik,
        vector=vhat,
        se_unconstrained=se_u,
        vcov_unconstrained=vcov,
        converged=converged,
        n_obs=data.n,
        n_groups=data.n_groups,
        spec=spec,
        data_fingerprint=data.fingerprint(),
        n_eval=lik.n_calls,
        message=message,
        _lik=lik,
    )


def profile_bounds(
    profiled: Callable[[float], float],
    center: float,
    peak: float,
    scale: float,
    drop: float,
    step_frac: float = 0.2,
    max_steps: int = 80,
    t_max: float | None = None,
) -> tuple[float, float, int]:
    """Find where a profiled log likelihood falls ``drop`` below ``peak``.

    Marches outward from ``center`` in probe steps of ``step_frac * scale``
    (growing once the uniform probes are exhausted), brackets the first sign
    change of ``profiled(u) - (peak - drop)`` on each side, and polishes the
    crossing with Brent's method.  A side that never crosses within the
    probe range (or within ``t_max`` of the center when given) is reported
    as infinite, which callers map to an open-ended interval.  Returns
    ``(lower, upper, n_eval)``.
    """
    if scale <= 0.0 or not np.isfinite(scale):
        raise DomainError("profile scale must be positive and finite")
    if drop <= 0.0:
        raise DomainError("drop must be positive")
    count = 0

    def g(u: float) -> float:
        nonlocal count
        count += 1
        return profiled(u) - (peak - drop)

    bounds = []
    for sign in (-1.0, 1.0):
        t_prev, g_prev = 0.0, drop
        stride = step_frac * scale
        t = stride
        bound = sign * np.inf
        for k in range(max_steps):
            if t_max is not None and t > t_max:
                break
            g_t = g(center + sign * t)
            if g_t < 0.0:
                # Reuse the recorded endpoint values so a tiny re-evaluation
                # wobble at the bracket ends cannot spoil the sign condition.
                cache = {t_prev: g_prev, t: g_t}

                def gf(tt: float) -> float:
                    if tt in cache:
                        return cache[tt]
                    return g(center + sign * tt)

                root = brentq(gf, t_prev, t, xtol=max(1.0e-12, 1.0e-10 * scale))
                bound = center + sign * root
                break
            t_prev, g_prev = t, g_t
            if k >= 19:
                stride *= 1.5
            t += stride
        bounds.append(bound)
    return bounds[0], bounds[1], count


def profile_interval(fit: MLFit, param: str | int, level: float = 0.95) -> ProfileInterval:
    """Profile likelihood interval for one parameter of an ``ml_fit`` result.

    The nuisance parameters are re-optimized at every probe point, warm
    started from the previous solution; endpoints are transformed back to
    the natural scale, so an unbounded side comes out as 0 or +/-inf as the
    transform dictates.
    """
    if fit._lik is None:
        raise DomainError("this MLFit does not carry its likelihood evaluator")
    if not 0.0 < level < 1.0:
        raise DomainError("level must lie strictly in (0, 1)")
    j = fit.index(param)
    lik = fit._lik
    drop = float(chi2.ppf(level, 1)) / 2.0
    se_j = float(fit.se_unconstrained[j])
    if not np.isfinite(se_j) or se_j <= 0.0:
        se_j = 0.1 * (1.0 + abs(float(fit.vector[j])))

    others = [a for a in range(lik.dim) if a != j]
    warm = {"w": fit.vector[others].copy()}

    def profiled(u: float) -> float:
        if not others:
            return lik(np.array([u]))

        def neg(w):
            v = np.empty(lik.dim)
            v[j] = u
            v[others] = w
            return -lik(v)

        res = minimize(neg, warm["w"], method="BFGS",
                       options={"gtol": 1.0e-6, "maxiter": 200})
        if np.all(np.isfinite(res.x)) and res.fun < -0.5 * _PENALTY:
            warm["w"] = res.x
        return -float(res.fun)

    calls_before = lik.n_calls
    lo_u, hi_u, _ = profile_bounds(
        profiled, float(fit.vector[j]), fit.loglik, se_j, drop,
        t_max=_COORD_CAP - 5.0 - abs(float(fit.vector[j])),
    )
    f = _NATURAL[fit.transforms[j]]
    lower = f(lo_u) if np.isfinite(lo_u) else (f(-np.inf) if lo_u < 0 else np.inf)
    upper = f(hi_u) if np.isfinite(hi_u) else (f(np.inf) if hi_u > 0 else -np.inf)
    return ProfileInterval(
        name=fit.names[j],
        level=level,
        lower=float(lower),
        upper=float(upper),
        drop=drop,
        n_eval=lik.n_calls - calls_before,
    )
