"""Adaptive Metropolis-within-Gibbs sampler for the beta mixed model.

This is the cross-check engine: it targets exactly the same unnormalized
joint posterior as the nested Laplace approximation but shares none of its
computational shortcuts, so agreement between the two is evidence that both
are right.  One sweep updates every fixed effect as a scalar site, every
group's effect vector as a block, and the unconstrained hyperparameters as
one block.  Proposal scales adapt toward standard target rates (0.44 for
scalars, 0.234 for blocks) in windows during burn-in only, with diminishing
step sizes; after burn-in the kernels are fixed, so the post-burn-in chain
is a plain Metropolis-within-Gibbs sampler.

A fixed effect whose column also carries a random effect (the intercept,
and the slope column when present) rides a near-flat ridge against the
group effects: adding d to the coefficient and subtracting d from every
group effect leaves the linear predictor untouched.  One extra scalar
"recentering" site per such pair proposes exactly that exchange; the
likelihood cancels from its acceptance ratio, only the priors enter, and
mixing along the ridge improves by orders of magnitude.

The chain state keeps the linear predictor and per-group likelihood sums
incrementally, which makes a sweep cost a handful of vector operations
rather than a full model evaluation per site.

``likelihood_scale`` tempers the likelihood contribution: 1 is the posterior
and 0 drops the data entirely, in which case the sampler must reproduce the
prior (a standard end-to-end correctness check; it requires proper priors on
the fixed effects).

Reproducibility: one integer seed drives every chain through spawned
``numpy.random.SeedSequence`` children, so results are identical run to run
regardless of how many chains are drawn.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .density import MarginalDensity, kde_density
from .distributions import DomainError
from .model import MU_EPS, Dataset, HyperPoint, ModelContext, ModelSpec
from .priors import PriorSpec, default_priors

__all__ = [
    "McmcConfig",
    "Site",
    "sample_metropolis",
    "ChainOutput",
    "run_mcmc",
    "gelman_rubin",
    "effective_sample_size",
    "interval_containment",
    "probability_in_interval",
    "export_chains",
]

# hyper sites with positive support, density-estimated on the log scale
_POSITIVE_SITES = frozenset({"phi", "tau1_sq", "tau2_sq"})


@dataclass(frozen=True)
class McmcConfig:
    """Sampler settings; the defaults are the full verification protocol."""

    n_chains: int = 3
    iterations: int = 500_000
    burn_in: int = 10_000
    thin: int = 100
    seed: int = 0
    likelihood_scale: float = 1.0
    adapt_window: int = 50
    jitter: float = 0.1

    def __post_init__(self) -> None:
        if self.n_chains < 1:
            raise DomainError("need at least one chain")
        if self.burn_in >= self.iterations:
            raise DomainError("burn-in must be shorter than the run")
        if self.thin < 1:
            raise DomainError("thin must be >= 1")
        if not 0.0 <= self.likelihood_scale <= 1.0:
            raise DomainError("likelihood_scale must lie in [0, 1]")

    @property
    def n_stored(self) -> int:
        return (self.iterations - self.burn_in) // self.thin


def _target_rate(dim: int) -> float:
    return 0.44 if dim == 1 else 0.234


@dataclass
class Site:
    """One Metropolis site: key, dimension and its (adaptive) proposal."""

    key: tuple
    dim: int
    scale: float
    chol: np.ndarray | None = None  # proposal shape; None means identity
    target_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.target_rate == 0.0:
            self.target_rate = _target_rate(self.dim)


def sample_metropolis(
    target,
    sites: list[Site],
    iterations: int,
    burn_in: int,
    thin: int,
    rng: np.random.Generator,
    adapt_window: int = 50,
) -> tuple[np.ndarray, dict[tuple, float]]:
    """Generic adaptive Metropolis-within-Gibbs sweep driver.

    ``target`` must provide ``log_ratio(key, delta) -> float`` (stage a move
    of site ``key`` by ``delta`` and return the log acceptance ratio),
    ``commit(key)`` (apply the staged move) and ``param_vector() ->
    ndarray`` (the recorded state).  Returns the stored draws (one row per
    ``thin`` post-burn-in sweeps, ``(iterations - burn_in) // thin`` in
    total) and the post-burn-in acceptance rate per site.
    """
    n_params = target.param_vector().size
    n_stored = (iterations - burn_in) // thin
    out = np.empty((n_stored, n_params))
    n_sites = len(sites)
    keys = [s.key for s in sites]
    dims = np.array([s.dim for s in sites])
    offsets = np.concatenate([[0], np.cumsum(dims)])
    total_dim = int(offsets[-1])
    acc_run = np.zeros(n_sites, dtype=np.int64)
    acc_win = np.zeros(n_sites, dtype=np.int64)
    stored = 0
    log = np.log
    log_ratio = target.log_ratio
    commit = target.commit

    for it in range(iterations):
        z_all = rng.standard_normal(total_dim)
        u_all = rng.random(n_sites)
        in_burnin = it < burn_in
        for s in range(n_sites):
            site = sites[s]
            z = z_all[offsets[s] : offsets[s + 1]]
            delta = site.scale * (site.chol @ z if site.chol is not None else z)
            logr = log_ratio(keys[s], delta)
            if logr >= 0.0 or log(u_all[s]) < logr:
                commit(keys[s])
                if in_burnin:
                    acc_win[s] += 1
                else:
                    acc_run[s] += 1
        if in_burnin:
            if (it + 1) % adapt_window == 0:
                gain = 1.0 / np.sqrt((it + 1) // adapt_window)
                for s in range(n_sites):
                    rate = acc_win[s] / adapt_window
                    scale = sites[s].scale * float(np.exp(gain * (rate - sites[s].target_rate)))
                    sites[s].scale = min(max(scale, 1e-8), 1e8)
                acc_win[:] = 0
        elif (it - burn_in) % thin == thin - 1:
            out[stored] = target.param_vector()
            stored += 1

    denom = max(iterations - burn_in, 1)
    rates = {keys[s]: float(acc_run[s]) / denom for s in range(n_sites)}
    return out[:stored], rates


# ---------------------------------------------------------------------------
# model target with incremental caches
# ---------------------------------------------------------------------------


class _BetaModelTarget:
    """Sampler state for the beta mixed model with incremental bookkeeping.

    Caches the linear predictor, per-row log likelihood terms, per-group
    likelihood sums, the random-effect prior quadratic forms and the
    hyperprior value; each site move touches only what it invalidates.
    """

    def __init__(self, ctx: ModelContext, theta0: np.ndarray, x0: np.ndarray,
                 likelihood_scale: float):
        self.ctx = ctx
        self.lam = float(likelihood_scale)
        if self.lam == 0.0 and np.any(ctx.beta_prior_prec <= 0.0):
            raise DomainError(
                "prior sampling (likelihood_scale = 0) requires proper priors "
                "on every fixed effect; set intercept_precision > 0"
            )
        self.x_b, self.x_beta = (a.copy() for a in ctx.split(np.asarray(x0, dtype=float)))
        self.theta = np.asarray(theta0, dtype=float).copy()
        self.ylog = np.log(ctx.y)
        self.y1mlog = np.log1p(-ctx.y)
        self.ylog_both = self.ylog + self.y1mlog
        self._linkinv = ctx.link.inv
        self.starts = ctx.group_starts
        self.sizes = ctx.data.group_sizes
        self.eta = ctx.eta(np.asarray(x0, dtype=float))
        self._staged: tuple | None = None
        self._rebuild_theta_caches()
        self._rebuild_lik_caches()
        self.beta_lp = ctx.beta_log_prior(self.x_beta)
        # Fixed-effect columns that also appear as random-effect columns can
        # trade mass with the group effects without moving the linear
        # predictor; record those pairs so the sampler can add one
        # recentering site per pair.
        self.recenter_fixed: dict[int, int] = {}
        if ctx.q:
            for a in range(ctx.q):
                for k in range(ctx.X.shape[1]):
                    if np.array_equal(ctx.X[:, k], ctx.Z[:, a]):
                        self.recenter_fixed[a] = k
                        break

    # -- cache plumbing ------------------------------------------------------

    def _hyper(self, theta: np.ndarray) -> HyperPoint:
        return HyperPoint.from_array(theta)

    def _rebuild_theta_caches(self) -> None:
        hp = self._hyper(self.theta)
        self.phi = hp.phi
        self.hyper_lp = self.ctx.hyper_log_prior(hp)
        if self.ctx.q:
            self.q_mat = hp.precision_matrix()
            chol = np.linalg.cholesky(self.q_mat)
            self.q_logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            self.prior_quad = 0.5 * np.einsum("nq,qr,nr->n", self.x_b, self.q_mat, self.x_b)
        else:
            self.q_mat = None
            self.q_logdet = 0.0
            self.prior_quad = np.zeros(0)

    def _rebuild_lik_caches(self) -> None:
        if self.lam > 0.0:
            self.row_terms = self._terms(self.eta, self.phi)
            self.group_lik = np.add.reduceat(self.row_terms, self.starts)
            self.lik_total = float(np.sum(self.group_lik))
        else:
            self.row_terms = np.zeros(self.ctx.n)
            self.group_lik = np.zeros(self.ctx.n_groups)
            self.lik_total = 0.0

    def _terms(self, eta: np.ndarray, phi: float, rows: slice | None = None) -> np.ndarray:
        mu = np.minimum(np.maximum(self._linkinv(eta), MU_EPS), 1.0 - MU_EPS)
        a = mu * phi
        b = phi - a
        ylog = self.ylog if rows is None else self.ylog[rows]
        y1mlog = self.y1mlog if rows is None else self.y1mlog[rows]
        both = self.ylog_both if rows is None else self.ylog_both[rows]
        return gammaln(phi) - gammaln(a) - gammaln(b) + a * ylog + b * y1mlog - both

    # -- site interface -------------------------------------------------------

    def site_list(self) -> list[Site]:
        raise NotImplementedError("sites are assembled by run_mcmc")

    def log_ratio(self, key: tuple, delta: np.ndarray) -> float:
        kind = key[0]
        if kind == "beta":
            return self._stage_beta(key[1], float(delta[0]))
        if kind == "b":
            return self._stage_b(key[1], delta)
        if kind == "theta":
            return self._stage_theta(delta)
        if kind == "recenter":
            return self._stage_recenter(key[1], float(delta[0]))
        raise KeyError(f"unknown site {key!r}")

    def commit(self, key: tuple) -> None:
        staged = self._staged
        if staged is None or staged[0] != key:
            raise RuntimeError(f"no staged move for site {key!r}")
        self._staged = None
        if key[0] == "beta":
            _, _, k, new_bk, eta_new, terms = staged
            self.x_beta[k] = new_bk
            if self.lam > 0.0:
                self.eta = eta_new
                self.row_terms = terms
                self.group_lik = np.add.reduceat(terms, self.starts)
                self.lik_total = float(np.sum(self.group_lik))
            else:
                self.eta = eta_new
            self.beta_lp = self.ctx.beta_log_prior(self.x_beta)
        elif key[0] == "b":
            _, _, i, b_new, eta_sl, terms_sl, lik_i, quad_i, sl = staged
            self.x_b[i] = b_new
            self.eta[sl] = eta_sl
            self.prior_quad[i] = quad_i
            if self.lam > 0.0:
                self.row_terms[sl] = terms_sl
                self.lik_total += lik_i - self.group_lik[i]
                self.group_lik[i] = lik_i
        elif key[0] == "recenter":
            _, _, k, a, new_bk, b_col, quad_new = staged
            self.x_beta[k] = new_bk
            self.x_b[:, a] = b_col
            self.prior_quad = quad_new
            self.beta_lp = self.ctx.beta_log_prior(self.x_beta)
        else:
            (_, _, theta_new, terms, q_mat, q_logdet, prior_quad, hyper_lp) = staged
            self.theta = theta_new
            self.phi = float(np.exp(theta_new[0]))
            self.hyper_lp = hyper_lp
            if self.ctx.q:
                self.q_mat = q_mat
                self.q_logdet = q_logdet
                self.prior_quad = prior_quad
            if self.lam > 0.0:
                self.row_terms = terms
                self.group_lik = np.add.reduceat(terms, self.starts)
                self.lik_total = float(np.sum(self.group_lik))

    # -- staging ---------------------------------------------------------------

    def _stage_beta(self, k: int, d: float) -> float:
        new_bk = self.x_beta[k] + d
        prec = self.ctx.beta_prior_prec[k]
        dlp = -0.5 * prec * (new_bk * new_bk - self.x_beta[k] * self.x_beta[k])
        eta_new = self.eta + d * self.ctx.X[:, k]
        terms = None
        if self.lam > 0.0:
            terms = self._terms(eta_new, self.phi)
            dlp += self.lam * (float(np.sum(terms)) - self.lik_total)
        self._staged = (("beta", k), "beta", k, new_bk, eta_new, terms)
        return float(dlp)

    def _stage_b(self, i: int, delta: np.ndarray) -> float:
        b_new = self.x_b[i] + delta
        quad_i = 0.5 * float(b_new @ self.q_mat @ b_new)
        dlp = self.prior_quad[i] - quad_i
        sl = slice(self.starts[i], self.starts[i] + self.sizes[i])
        eta_sl = terms_sl = None
        lik_i = 0.0
        if self.lam > 0.0:
            eta_sl = self.eta[sl] + self.ctx.Z[sl] @ delta
            terms_sl = self._terms(eta_sl, self.phi, rows=sl)
            lik_i = float(np.sum(terms_sl))
            dlp += self.lam * (lik_i - self.group_lik[i])
        else:
            eta_sl = self.eta[sl] + self.ctx.Z[sl] @ delta
        self._staged = (("b", i), "b", i, b_new, eta_sl, terms_sl, lik_i, quad_i, sl)
        return float(dlp)

    def _stage_recenter(self, a: int, d: float) -> float:
        """Exchange d between fixed effect k and random column a.

        The two columns are elementwise equal, so eta and every likelihood
        cache stay exactly as they are; only the two priors move.
        """
        k = self.recenter_fixed[a]
        new_bk = self.x_beta[k] + d
        prec = self.ctx.beta_prior_prec[k]
        dlp = -0.5 * prec * (new_bk * new_bk - self.x_beta[k] * self.x_beta[k])
        b_col = self.x_b[:, a] - d
        # quad(b - d e_a) = quad(b) - d (Q b)_a + d^2 Q_aa / 2 per group.
        qb_a = self.x_b @ self.q_mat[a]
        quad_new = self.prior_quad - d * qb_a + 0.5 * d * d * self.q_mat[a, a]
        dlp += float(np.sum(self.prior_quad) - np.sum(quad_new))
        self._staged = (("recenter", a), "recenter", k, a, new_bk, b_col, quad_new)
        return float(dlp)

    def _stage_theta(self, delta: np.ndarray) -> float:
        theta_new = self.theta + delta
        if np.max(np.abs(theta_new)) > 50.0:
            self._staged = (("theta",), "theta", theta_new, None, None, 0.0, None, -np.inf)
            return -np.inf
        hp = self._hyper(theta_new)
        hyper_lp = self.ctx.hyper_log_prior(hp)
        dlp = hyper_lp - self.hyper_lp
        q_mat = q_logdet = prior_quad = None
        if self.ctx.q:
            q_mat = hp.precision_matrix()
            chol = np.linalg.cholesky(q_mat)
            q_logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            prior_quad = 0.5 * np.einsum("nq,qr,nr->n", self.x_b, q_mat, self.x_b)
            dlp += 0.5 * self.ctx.n_groups * (q_logdet - self.q_logdet)
            dlp += float(np.sum(self.prior_quad) - np.sum(prior_quad))
        terms = None
        if self.lam > 0.0:
            terms = self._terms(self.eta, hp.phi)
            dlp += self.lam * (float(np.sum(terms)) - self.lik_total)
        self._staged = (
            ("theta",), "theta", theta_new, terms, q_mat, q_logdet, prior_quad, hyper_lp
        )
        return float(dlp)

    # -- reporting ---------------------------------------------------------------

    def natural_hyper(self) -> list[float]:
        out = [float(np.exp(self.theta[0]))]
        if self.ctx.q == 1:
            out.append(float(np.exp(self.theta[1])))
        elif self.ctx.q == 2:
            t1 = float(np.exp(self.theta[1]))
            t2 = float(np.exp(self.theta[2]))
            c = float(np.tanh(self.theta[3]))
            out.extend([t1, t2, c, c / float(np.sqrt(t1 * t2))])
        return out

    def param_vector(self) -> np.ndarray:
        return np.concatenate([self.x_beta, self.natural_hyper(), self.x_b.ravel()])


def _param_names(ctx: ModelContext) -> tuple[str, ...]:
    names = list(ctx.beta_names) + list(ctx.hyper_names)
    if ctx.q == 2:
        names.append("rho")
    names.extend(ctx.latent_names[: ctx.n_groups * ctx.q])
    return tuple(names)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def gelman_rubin(chains: np.ndarray) -> float:
    """Potential scale reduction factor for one parameter.

    ``chains`` is (n_chains, n_draws).  Uses the between/within variance
    form; the result is clipped below at 1 so sampling noise cannot report
    an impossible value.  A single chain returns 1 by convention.
    """
    chains = np.asarray(chains, dtype=float)
    if chains.ndim != 2:
        raise DomainError("chains must be (n_chains, n_draws)")
    m, n = chains.shape
    if m < 2 or n < 2:
        return 1.0
    means = chains.mean(axis=1)
    w = float(np.mean(chains.var(axis=1, ddof=1)))
    b_over_n = float(np.var(means, ddof=1))
    if w == 0.0:
        return 1.0
    v_hat = (n - 1) / n * w + b_over_n
    return float(max(np.sqrt(v_hat / w), 1.0))


def _ess_single(x: np.ndarray) -> float:
    """Initial positive sequence estimator on one chain."""
    n = x.size
    x = x - x.mean()
    acov = np.correlate(x, x, mode="full")[n - 1 :] / n
    if acov[0] <= 0.0:
        return float(n)
    rho = acov / acov[0]
    tau = 1.0
    t = 1
    while t + 1 < n:
        gam = rho[t] + rho[t + 1]
        if gam <= 0.0:
            break
        tau += 2.0 * gam
        t += 2
    return float(n / tau)


def effective_sample_size(chains: np.ndarray) -> float:
    """Sum of per-chain effective sizes (Geyer initial positive sequence)."""
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    return float(sum(_ess_single(c) for c in chains))


def probability_in_interval(density: MarginalDensity, interval: tuple[float, float]) -> float:
    """Mass a marginal density assigns to an interval."""
    lo, hi = interval
    return density.prob_interval(lo, hi)


def interval_containment(draws: np.ndarray, interval: tuple[float, float]) -> float:
    """Fraction of draws inside a closed interval."""
    lo, hi = interval
    draws = np.asarray(draws, dtype=float).ravel()
    return float(np.mean((draws >= lo) & (draws <= hi)))


# ---------------------------------------------------------------------------
# output container
# ---------------------------------------------------------------------------


@dataclass
class ChainOutput:
    """Stored draws from all chains plus diagnostics and provenance."""

    samples: np.ndarray  # (n_chains, n_stored, n_params)
    names: tuple[str, ...]
    acceptance: dict[str, np.ndarray]  # site label -> per-chain rate
    config: McmcConfig
    runtime: float
    data_fingerprint: str = ""

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def draws(self, name: str, pooled: bool = True) -> np.ndarray:
        arr = self.samples[:, :, self.index(name)]
        return arr.ravel() if pooled else arr

    def rhat(self, name: str) -> float:
        return gelman_rubin(self.draws(name, pooled=False))

    def ess(self, name: str) -> float:
        return effective_sample_size(self.draws(name, pooled=False))

    def max_rhat(self, names: tuple[str, ...] | None = None) -> float:
        return max(self.rhat(n) for n in (names or self.names))

    def kde(self, name: str, grid_points: int = 401, log_scale: bool | None = None) -> MarginalDensity:
        """Pooled-chain kernel density estimate for one parameter.

        ``log_scale=None`` picks the log-scale kernel automatically for the
        positive hyperparameters (dispersion and random-effect precisions),
        whose right-skewed posteriors a plain Gaussian kernel oversmooths.
        """
        pooled = self.draws(name)
        if log_scale is None:
            log_scale = name in _POSITIVE_SITES and bool(np.all(pooled > 0.0))
        return kde_density(
            pooled,
            name=name,
            n_eff=self.ess(name),
            grid_points=grid_points,
            log_scale=log_scale,
        )

    def summary(self, names: tuple[str, ...] | None = None) -> dict[str, dict[str, float]]:
        out = {}
        for name in names or self.names:
            pooled = self.draws(name)
            out[name] = {
                "mean": float(np.mean(pooled)),
                "sd": float(np.std(pooled, ddof=1)),
                "q0.025": float(np.quantile(pooled, 0.025)),
                "q0.5": float(np.quantile(pooled, 0.5)),
                "q0.975": float(np.quantile(pooled, 0.975)),
                "rhat": self.rhat(name),
                "ess": self.ess(name),
            }
        return out


def export_chains(output: ChainOutput, out_dir, prefix: str = "chain") -> list[str]:
    """Write one CSV of stored draws per chain; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(output.samples.shape[0]):
        path = out_dir / f"{prefix}_{c + 1}.csv"
        tmp = path.with_suffix(".csv.tmp")
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(output.names)
            writer.writerows(output.samples[c].tolist())
        os.replace(tmp, path)
        paths.append(str(path))
    return paths


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _prior_start(ctx: ModelContext) -> np.ndarray:
    pr = ctx.priors
    coords = [float(np.log(pr.phi.shape / pr.phi.rate))]
    if ctx.q == 1:
        g = pr.require_raneff_gamma()
        coords.append(float(np.log(g.shape / g.rate)))
    elif ctx.q == 2:
        w = pr.require_raneff_wishart()
        expected = w.df * np.diag(w.scale)
        coords.extend([float(np.log(expected[0])), float(np.log(expected[1])), 0.0])
    return np.array(coords)


def run_mcmc(
    data: Dataset,
    spec: ModelSpec,
    priors: PriorSpec | None = None,
    config: McmcConfig | None = None,
) -> ChainOutput:
    """Run the adaptive sampler and collect thinned post-burn-in draws.

    Initialization and proposal shapes come from the Laplace fit of the same
    posterior (conditional mode, hyper curvature, latent conditional
    covariances); with ``likelihood_scale = 0`` the prior supplies them
    instead.
    """
    from .laplace import hyper_mode

    config = config or McmcConfig()
    priors = default_priors(spec) if priors is None else priors
    ctx = ModelContext(data, spec, priors)
    m = 1 + (0 if ctx.q == 0 else (1 if ctx.q == 1 else 3))

    if config.likelihood_scale > 0.0:
        theta0, mode_res, curv, sigma_theta = hyper_mode(ctx)
        x0 = mode_res.x
        v_bb, _, v_xx = mode_res.chol.inverse_pieces()
        beta_sd = np.sqrt(np.diag(v_xx))
        b_chols = np.linalg.cholesky(v_bb) if ctx.q else None
        theta_chol = np.linalg.cholesky(np.linalg.inv(curv))
    else:
        theta0 = _prior_start(ctx)
        x0 = np.zeros(ctx.n_latent)
        beta_sd = 1.0 / np.sqrt(ctx.beta_prior_prec)
        if ctx.q:
            q0 = HyperPoint.from_array(theta0).precision_matrix()
            cov0 = np.linalg.inv(q0)
            b_chols = np.broadcast_to(
                np.linalg.cholesky(cov0), (ctx.n_groups, ctx.q, ctx.q)
            ).copy()
        else:
            b_chols = None
        sigma_theta = np.ones(m)
        theta_chol = np.eye(m)

    names = _param_names(ctx)
    seq = np.random.SeedSequence(config.seed)
    children = seq.spawn(config.n_chains)

    recenter_pairs: list[tuple[int, int]] = []
    if ctx.q:
        q0_mat = HyperPoint.from_array(theta0).precision_matrix()
        for a in range(ctx.q):
            for k in range(ctx.p):
                if np.array_equal(ctx.X[:, k], ctx.Z[:, a]):
                    recenter_pairs.append((a, k))
                    break

    all_draws = np.empty((config.n_chains, config.n_stored, len(names)))
    site_keys: list[tuple] = [("beta", k) for k in range(ctx.p)]
    site_keys += [("b", i) for i in range(ctx.n_groups)] if ctx.q else []
    site_keys += [("theta",)]
    site_keys += [("recenter", a) for a, _ in recenter_pairs]
    acc = {str(k): np.zeros(config.n_chains) for k in site_keys}

    t_start = time.perf_counter()
    for c in range(config.n_chains):
        rng = np.random.default_rng(children[c])
        jit_theta = theta0 + config.jitter * sigma_theta * rng.standard_normal(m)
        jit_x = x0.copy()
        nb = ctx.n_groups * ctx.q
        if ctx.q:
            for i in range(ctx.n_groups):
                jit_x[i * ctx.q : (i + 1) * ctx.q] += config.jitter * (
                    b_chols[i] @ rng.standard_normal(ctx.q)
                )
        jit_x[nb:] += config.jitter * beta_sd * rng.standard_normal(ctx.p)

        target = _BetaModelTarget(ctx, jit_theta, jit_x, config.likelihood_scale)
        sites = [
            Site(("beta", k), 1, 2.4 * float(beta_sd[k])) for k in range(ctx.p)
        ]
        if ctx.q:
            sites += [
                Site(("b", i), ctx.q, 2.4 / np.sqrt(ctx.q), chol=b_chols[i].copy())
                for i in range(ctx.n_groups)
            ]
        sites += [Site(("theta",), m, 2.4 / np.sqrt(m), chol=theta_chol.copy())]
        for a, k in recenter_pairs:
            ridge_prec = ctx.beta_prior_prec[k] + ctx.n_groups * q0_mat[a, a]
            sites += [Site(("recenter", a), 1, 2.4 / np.sqrt(max(ridge_prec, 1e-12)))]

        draws, rates = sample_metropolis(
            target, sites, config.iterations, config.burn_in, config.thin,
            rng, adapt_window=config.adapt_window,
        )
        all_draws[c] = draws
        for k, r in rates.items():
            acc[str(k)][c] = r

    return ChainOutput(
        samples=all_draws,
        names=names,
        acceptance=acc,
        config=config,
        runtime=time.perf_counter() - t_start,
        data_fingerprint=data.fingerprint(),
    )
