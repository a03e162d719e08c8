"""Model selection criteria computed from a nested Laplace fit.

Three criteria, all driven by the hyperparameter grid and the Gaussian
latent conditionals stored in a :class:`~betamix.laplace.FitResult`:

* ``dic``: deviance information criterion.  The plug-in deviance is
  evaluated at the posterior means of (beta, b, phi); the posterior mean
  deviance averages the per-row expected log likelihood over the grid, with
  each row's linear predictor treated as conditionally Gaussian (its exact
  law under the nested Laplace representation) and integrated by
  Gauss-Hermite quadrature.
* ``log_marginal_likelihood``: the grid-integrated unnormalized posterior.
  All proper normalizing constants are kept, so differences are meaningful
  between models fit by this engine on the same data.
* ``cpo``: conditional predictive ordinates through the harmonic identity
  1/CPO_i = E_posterior[1 / f(y_i | eta_i, phi)], with the same grid plus
  Gauss-Hermite expectation evaluated entirely in log space.

``compare_models`` assembles the Table-style comparison: posterior means of
the shared parameters and the three criteria, one column per model, with
CSV and aligned-text export.

The sign convention for the CPO summary is explicit: ``mean_log`` is the
average of log CPO_i over observations, so larger (less negative) values
indicate better predictive fit.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .distributions import DomainError, beta_logpdf_arrays
from .laplace import FitResult, grid_log_evidence
from .model import MU_EPS

__all__ = [
    "CpoResult",
    "ModelComparison",
    "compare_models",
    "cpo",
    "dic",
    "log_marginal_likelihood",
]

_GH_NODES = 25


def _gauss_hermite(n: int = _GH_NODES) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.hermite.hermgauss(n)
    return nodes, weights / np.sqrt(np.pi)


def _rowwise_loglik(fit: FitResult, cond, phi: float, nodes, ctx) -> np.ndarray:
    """Per-row log likelihood at every Gauss-Hermite abscissa, (n, k)."""
    mean, var = cond.predictor_moments(ctx.X, ctx.Z, ctx.groups, ctx.n_groups, ctx.q)
    sd = np.sqrt(var)
    eta = mean[:, None] + np.sqrt(2.0) * sd[:, None] * nodes[None, :]
    mu = np.clip(ctx.link.inv(eta), MU_EPS, 1.0 - MU_EPS)
    return beta_logpdf_arrays(ctx.y[:, None], mu, phi)


def _grid_pass(fit: FitResult):
    """Common iterator: (weight, phi, conditional) for grid points with mass."""
    grid = fit.theta_grid
    if grid is None or grid.conditionals is None:
        raise DomainError("fit carries no hyperparameter grid with conditionals")
    phis = grid.natural_values(0)
    for t in range(grid.size):
        w = float(grid.weights[t])
        if w <= 0.0:
            continue
        yield w, float(phis[t]), grid.conditionals[t]


def dic(fit: FitResult) -> tuple[float, float]:
    """Deviance information criterion and effective parameter count.

    Returns ``(DIC, p_D)`` with ``DIC = D(mean) + 2 p_D`` and
    ``p_D = E[D] - D(mean)``; the deviance is -2 times the beta log
    likelihood only, so prior terms never enter.  A negative ``p_D``
    indicates the posterior approximation failed badly; it is returned
    as computed so callers can flag it.
    """
    ctx = fit._require_ctx()
    grid = fit.theta_grid
    nodes, gh_w = _gauss_hermite()

    mean_dev = 0.0
    x_mean = np.zeros(ctx.n_latent)
    for w, phi, cond in _grid_pass(fit):
        ll = _rowwise_loglik(fit, cond, phi, nodes, ctx)
        mean_dev += w * (-2.0) * float(np.sum(ll @ gh_w))
        x_mean += w * cond.mean

    phi_mean = grid.hyper_mean(0)
    eta_mean = ctx.eta(x_mean)
    d_hat = -2.0 * ctx.loglik(eta_mean, phi_mean)
    p_d = mean_dev - d_hat
    return d_hat + 2.0 * p_d, p_d


def log_marginal_likelihood(fit: FitResult) -> float:
    """Grid-integrated evidence; comparable across models on the same data."""
    if fit.theta_grid is None:
        raise DomainError("fit carries no hyperparameter grid")
    return grid_log_evidence(fit.theta_grid)


@dataclass(frozen=True)
class CpoResult:
    """Conditional predictive ordinates in the caller's row order."""

    values: np.ndarray
    log_values: np.ndarray
    mean_log: float
    zero_rows: tuple[int, ...]

    @property
    def n_obs(self) -> int:
        return int(self.values.size)


def cpo(fit: FitResult, data=None) -> CpoResult:
    """Conditional predictive ordinate of every observation.

    Uses the harmonic identity: the posterior expectation of the reciprocal
    row likelihood, accumulated in log space over the grid and the
    Gauss-Hermite abscissae so extreme rows cannot overflow.  Rows whose CPO
    underflows to zero are reported in ``zero_rows`` (indices in the
    caller's row order).
    """
    ctx = fit._require_ctx()
    if data is not None and data.fingerprint() != fit.data_fingerprint:
        raise DomainError("data does not match the dataset this fit was computed from")
    data = ctx.data
    nodes, gh_w = _gauss_hermite()
    log_gh_w = np.log(gh_w)

    terms = []
    for w, phi, cond in _grid_pass(fit):
        ll = _rowwise_loglik(fit, cond, phi, nodes, ctx)
        # log E_cond[1/f] per row, then weighted across the grid
        log_e_inv = logsumexp(log_gh_w[None, :] - ll, axis=1)
        terms.append(np.log(w) + log_e_inv)
    log_inv_cpo = logsumexp(np.vstack(terms), axis=0)
    log_cpo = -log_inv_cpo

    log_cpo_orig = data.to_original_order(log_cpo)
    values = np.exp(log_cpo_orig)
    zero_rows = tuple(int(i) for i in np.flatnonzero(values <= 0.0))
    return CpoResult(
        values=values,
        log_values=log_cpo_orig,
        mean_log=float(np.mean(log_cpo_orig)),
        zero_rows=zero_rows,
    )


@dataclass(frozen=True)
class ModelComparison:
    """Posterior means and selection criteria, one column per model."""

    model_names: tuple[str, ...]
    param_names: tuple[str, ...]
    means: np.ndarray  # (n_params, n_models), NaN where a model lacks the row
    lml: np.ndarray
    dic: np.ndarray
    p_d: np.ndarray
    mean_log_cpo: np.ndarray

    @property
    def best_lml(self) -> str:
        return self.model_names[int(np.argmax(self.lml))]

    @property
    def best_dic(self) -> str:
        return self.model_names[int(np.argmin(self.dic))]

    def rows(self) -> list[list[str]]:
        """Table body as strings: one row per quantity, one column per model."""
        out = [["quantity", *self.model_names]]
        for j, name in enumerate(self.param_names):
            cells = [
                "" if np.isnan(v) else f"{v:.4f}" for v in self.means[j]
            ]
            out.append([name, *cells])
        out.append(["log marginal likelihood", *[f"{v:.2f}" for v in self.lml]])
        out.append(["DIC", *[f"{v:.2f}" for v in self.dic]])
        out.append(["p_D", *[f"{v:.2f}" for v in self.p_d]])
        out.append(["mean log CPO", *[f"{v:.4f}" for v in self.mean_log_cpo]])
        out.append(["best LML", *["*" if m == self.best_lml else "" for m in self.model_names]])
        out.append(["best DIC", *["*" if m == self.best_dic else "" for m in self.model_names]])
        return out

    def to_text(self) -> str:
        rows = self.rows()
        widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
        lines = []
        for i, r in enumerate(rows):
            cells = [r[0].ljust(widths[0])]
            cells += [r[c].rjust(widths[c]) for c in range(1, len(r))]
            lines.append("  ".join(cells).rstrip())
            if i == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "w", newline="") as fh:
            csv.writer(fh).writerows(self.rows())
        os.replace(tmp, path)
        return str(path)


def compare_models(fits: list[FitResult]) -> ModelComparison:
    """Selection criteria side by side for models fit on the same data.

    Parameter rows are the union of the models' parameter names in first
    appearance order; a model that lacks a row gets an empty cell.
    """
    if not fits:
        raise DomainError("need at least one fit to compare")
    fp = fits[0].data_fingerprint
    for f in fits[1:]:
        if f.data_fingerprint != fp:
            raise DomainError("fits were computed on different datasets")

    names: list[str] = []
    for f in fits:
        for name in f.param_names:
            if name not in names:
                names.append(name)

    n_m = len(fits)
    means = np.full((len(names), n_m), np.nan)
    lml = np.empty(n_m)
    dic_v = np.empty(n_m)
    p_d = np.empty(n_m)
    mlc = np.empty(n_m)
    model_names = []
    for m, f in enumerate(fits):
        model_names.append(f.model_name or f"model_{m + 1}")
        for j, name in enumerate(names):
            if name in f.param_names:
                means[j, m] = f.posterior_mean(name)
        gof = f.gof
        if gof is None:
            lml[m] = log_marginal_likelihood(f)
            d, p = dic(f)
            dic_v[m], p_d[m] = d, p
            mlc[m] = cpo(f).mean_log
        else:
            lml[m] = gof["lml"]
            dic_v[m], p_d[m] = gof["dic"], gof["p_d"]
            mlc[m] = gof["mean_log_cpo"]

    return ModelComparison(
        model_names=tuple(model_names),
        param_names=tuple(names),
        means=means,
        lml=lml,
        dic=dic_v,
        p_d=p_d,
        mean_log_cpo=mlc,
    )
