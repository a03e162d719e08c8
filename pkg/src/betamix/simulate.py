"""Synthetic data generation from the beta mixed model.

The default study mimics a grouped rates setting: a handful of groups with a
few dozen observations each, one group-level size category (three levels)
and one centered continuous covariate.  Group effects are drawn from the
multivariate normal implied by the hyperparameters, responses from the
mean/precision beta distribution.

Reproducibility: everything is driven by one ``numpy.random.Generator``
seeded from the ``seed`` argument, so equal seeds give equal datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import DomainError
from .model import LINKS, Dataset, ModelSpec

__all__ = ["SimulationTruth", "SimulatedStudy", "simulate_study"]

DEFAULT_BETA = {
    "intercept": 0.40,
    "size_Medium": -0.07,
    "size_Small": -0.13,
    "income": 0.47,
}

SIZE_LEVELS = ("Large", "Medium", "Small")


@dataclass(frozen=True)
class SimulationTruth:
    """Generating values, for parameter-recovery checks."""

    beta: dict[str, float]
    phi: float
    tau1_sq: float | None
    tau2_sq: float | None
    rho_corr: float | None
    b: np.ndarray | None  # (n_groups, q) realized group effects

    def as_dict(self) -> dict[str, float]:
        out = {f"beta_{k}": v for k, v in self.beta.items()}
        out["phi"] = self.phi
        if self.tau1_sq is not None:
            out["tau1_sq"] = self.tau1_sq
        if self.tau2_sq is not None:
            out["tau2_sq"] = self.tau2_sq
            out["rho_corr"] = self.rho_corr
        return out


@dataclass(frozen=True)
class SimulatedStudy:
    """Dataset plus the spec that generated it and the generating truth."""

    data: Dataset
    spec: ModelSpec
    truth: SimulationTruth
    seed: int
    rows: list[dict] = field(repr=False, default_factory=list)


def _group_sizes(n_groups: int, n_total: int) -> np.ndarray:
    base, extra = divmod(n_total, n_groups)
    sizes = np.full(n_groups, base, dtype=int)
    sizes[:extra] += 1
    return sizes


def simulate_study(
    seed: int = 0,
    n_groups: int = 8,
    n_total: int = 365,
    random: str = "intercept",
    link: str = "logit",
    phi: float = 93.0,
    tau1_sq: float = 64.0,
    tau2_sq: float = 533.0,
    rho_corr: float = 0.75,
    beta: dict[str, float] | None = None,
) -> SimulatedStudy:
    """Draw one synthetic study.

    Parameters
    ----------
    random : {"none", "intercept", "intercept+slope"}
        Random structure; with a slope the slope variable is ``income``.
    tau1_sq, tau2_sq : float
        Random-effect precisions (the effect standard deviations are their
        inverse square roots).
    rho_corr : float
        Correlation between intercept and slope effects (q = 2 only).
    beta : dict, optional
        Fixed effects keyed by design label; defaults to
        ``{"intercept": 0.40, "size_Medium": -0.07, "size_Small": -0.13,
        "income": 0.47}``.
    """
    from .model import HyperPoint

    if n_groups < 1 or n_total < n_groups:
        raise DomainError("need at least one observation per group")
    rng = np.random.default_rng(seed)
    beta = dict(DEFAULT_BETA if beta is None else beta)

    sizes = _group_sizes(n_groups, n_total)
    labels = [f"g{i + 1:02d}" for i in range(n_groups)]
    group = np.repeat(labels, sizes)
    size_cat = np.repeat([SIZE_LEVELS[i % 3] for i in range(n_groups)], sizes)
    income = rng.standard_normal(n_total)
    income -= income.mean()

    eta = np.full(n_total, beta["intercept"], dtype=float)
    eta += np.where(size_cat == "Medium", beta["size_Medium"], 0.0)
    eta += np.where(size_cat == "Small", beta["size_Small"], 0.0)
    eta += beta["income"] * income

    if random == "none":
        spec = ModelSpec(fixed=("size", "income"), random="none", link=link)
        theta = HyperPoint.from_natural(phi)
        b = None
    elif random == "intercept":
        spec = ModelSpec(fixed=("size", "income"), random="intercept", link=link)
        theta = HyperPoint.from_natural(phi, tau1_sq=tau1_sq)
        b = rng.standard_normal((n_groups, 1)) / np.sqrt(tau1_sq)
        eta += np.repeat(b[:, 0], sizes)
    elif random == "intercept+slope":
        spec = ModelSpec(
            fixed=("size", "income"),
            random="intercept+slope",
            slope_column="income",
            link=link,
        )
        theta = HyperPoint.from_natural(
            phi, tau1_sq=tau1_sq, tau2_sq=tau2_sq, rho_corr=rho_corr
        )
        cov = np.linalg.inv(theta.precision_matrix())
        b = rng.standard_normal((n_groups, 2)) @ np.linalg.cholesky(cov).T
        eta += np.repeat(b[:, 0], sizes) + np.repeat(b[:, 1], sizes) * income
    else:
        raise DomainError(f"unknown random structure {random!r}")

    mu = LINKS[link].inv(eta)
    mu = np.clip(mu, 1e-10, 1.0 - 1e-10)
    y = rng.beta(mu * phi, (1.0 - mu) * phi)
    # a draw landing exactly on the boundary is astronomically unlikely at
    # reasonable phi but would be rejected by Dataset, so nudge it inward
    y = np.clip(y, 1e-12, 1.0 - 1e-12)

    data = Dataset(y, group, {"size": size_cat, "income": income})
    truth = SimulationTruth(
        beta=beta,
        phi=phi,
        tau1_sq=None if random == "none" else tau1_sq,
        tau2_sq=tau2_sq if random == "intercept+slope" else None,
        rho_corr=rho_corr if random == "intercept+slope" else None,
        b=b,
    )
    rows = [
        {
            "y": float(y[i]),
            "group": str(group[i]),
            "size": str(size_cat[i]),
            "income": float(income[i]),
        }
        for i in range(n_total)
    ]
    return SimulatedStudy(data=data, spec=spec, truth=truth, seed=seed, rows=rows)
