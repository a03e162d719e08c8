"""Command-line entry points.

Subcommands: ``fit`` (posterior approximation; ``--engine`` picks laplace,
mcmc or ml), ``mcmc``, ``ml``, ``compare`` (model ladder with information
criteria), ``sensitivity`` (prior scan), ``elicit`` (gamma prior from a
range statement) and ``simulate`` (synthetic study generator).

Every command writes a ``<command>_summary.json`` (validating against the
schema shipped in ``betamix/schemas/``) plus CSV outputs into ``--out-dir``:
marginal density grids as two-column files, comparison and sensitivity
tables, chain draws.  All files are written atomically.  Failures exit
nonzero with a one-line JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import AnalysisConfig, load_csv, write_rows_csv
from .distributions import DomainError
from .laplace import fit_laplace
from .likelihood import ml_fit, profile_interval
from .mcmc import export_chains, run_mcmc
from .model import Dataset
from .priors import ElicitationInput, elicit_gamma_prior, elicited_range_roundtrip
from .selection import compare_models
from .sensitivity import sensitivity_scan
from .simulate import simulate_study

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """Argument parser whose errors are machine readable."""

    def error(self, message):
        record = {"error": {"type": "UsageError", "message": message}}
        print(json.dumps(record), file=sys.stderr)
        raise SystemExit(2)


# ---------------------------------------------------------------------------
# output plumbing
# ---------------------------------------------------------------------------


def _clean(obj):
    """Recursively replace non-finite floats with None for strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _validate_summary(summary: dict) -> None:
    try:
        import jsonschema
    except ImportError:
        return
    from importlib.resources import files

    schema = json.loads(
        (files("betamix") / "schemas" / "summary.schema.json").read_text()
    )
    jsonschema.validate(summary, schema)


def _write_json(summary: dict, path: Path) -> str:
    summary = _clean(summary)
    _validate_summary(summary)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(summary, fh, indent=2, allow_nan=False)
        fh.write("\n")
    os.replace(tmp, path)
    return str(path)


def _write_marginal_csvs(fit_like, names, out_dir: Path, kde=False) -> list[str]:
    """One two-column CSV (value, density) per parameter marginal."""
    out = []
    for name in names:
        dens = fit_like.kde(name) if kde else fit_like.marginal(name)
        path = out_dir / f"marginal_{name}.csv"
        tmp = path.with_suffix(".csv.tmp")
        with open(tmp, "w") as fh:
            fh.write("value,density\n")
            for x, p in zip(dens.x, dens.pdf):
                fh.write(f"{x:.12g},{p:.12g}\n")
        os.replace(tmp, path)
        out.append(path.name)
    return out


def _model_block(config: AnalysisConfig, data: Dataset | None = None) -> dict:
    block = {
        "name": config.model_name or "model",
        "fixed": list(config.fixed),
        "random": config.random,
        "link": config.link,
    }
    if data is not None:
        block["n_obs"] = int(data.n)
        block["n_groups"] = int(data.n_groups)
    return block


def _load_data(config: AnalysisConfig) -> Dataset:
    if not config.data:
        raise DomainError("no data file given; set data.path in the config or pass --data")
    return load_csv(config.data, config)


# ---------------------------------------------------------------------------
# command handlers: each returns the summary dict
# ---------------------------------------------------------------------------


def _cmd_fit(config: AnalysisConfig, args, out_dir: Path) -> dict:
    if config.engine == "mcmc":
        return _cmd_mcmc(config, args, out_dir)
    if config.engine == "ml":
        return _cmd_ml(config, args, out_dir)
    t0 = time.perf_counter()
    data = _load_data(config)
    t_load = time.perf_counter()
    spec = config.model_spec()
    fit = fit_laplace(
        data, spec,
        priors=config.prior_spec(spec),
        options=config.laplace_options(),
        model_name=config.model_name or "model",
    )
    t_fit = time.perf_counter()
    marginals = _write_marginal_csvs(fit, fit.param_names, out_dir)
    return {
        "command": "fit",
        "engine": "laplace",
        "seed": config.seed,
        "model": _model_block(config, data),
        "parameters": fit.summary(),
        "criteria": dict(fit.gof or {}),
        "timings": {
            "load": t_load - t0,
            "fit": t_fit - t_load,
            "total": time.perf_counter() - t0,
        },
        "files": {"marginals": marginals},
    }


def _cmd_mcmc(config: AnalysisConfig, args, out_dir: Path) -> dict:
    t0 = time.perf_counter()
    data = _load_data(config)
    t_load = time.perf_counter()
    spec = config.model_spec()
    output = run_mcmc(data, spec, priors=config.prior_spec(spec), config=config.mcmc_config())
    t_run = time.perf_counter()
    marginals = _write_marginal_csvs(output, output.names, out_dir, kde=True)
    chains = [Path(p).name for p in export_chains(output, out_dir)]
    acceptance = {
        "_".join(map(str, site)) if isinstance(site, tuple) else str(site): float(np.mean(rates))
        for site, rates in output.acceptance.items()
    }
    return {
        "command": "mcmc",
        "engine": "mcmc",
        "seed": config.seed,
        "model": _model_block(config, data),
        "parameters": output.summary(),
        "diagnostics": {"max_rhat": output.max_rhat(), "acceptance": acceptance},
        "timings": {
            "load": t_load - t0,
            "sample": t_run - t_load,
            "total": time.perf_counter() - t0,
        },
        "files": {"marginals": marginals, "chains": chains},
    }


def _cmd_ml(config: AnalysisConfig, args, out_dir: Path) -> dict:
    t0 = time.perf_counter()
    data = _load_data(config)
    t_load = time.perf_counter()
    spec = config.model_spec()
    fit = ml_fit(data, spec)
    t_fit = time.perf_counter()
    use_profile = bool(getattr(args, "profile", False))
    level = float(getattr(args, "level", 0.95) or 0.95)
    params: dict[str, dict[str, float]] = {}
    for name in fit.names:
        est = fit.estimate(name)
        se = fit.se_of(name)
        if use_profile:
            ci = profile_interval(fit, name, level=level)
            lower, upper = ci.lower, ci.upper
        else:
            lower, upper = fit.wald_interval(name, level=level)
        params[name] = {"estimate": est, "se": se, "lower": lower, "upper": upper}
    return {
        "command": "ml",
        "engine": "ml",
        "seed": config.seed,
        "model": _model_block(config, data),
        "parameters": params,
        "criteria": {"loglik": fit.loglik},
        "interval_method": "profile" if use_profile else "wald",
        "diagnostics": {
            "converged": fit.converged,
            "n_eval": fit.n_eval,
            "message": fit.message,
        },
        "timings": {
            "load": t_load - t0,
            "fit": t_fit - t_load,
            "total": time.perf_counter() - t0,
        },
        "files": {},
    }


def _ladder(config: AnalysisConfig) -> list[tuple[str, AnalysisConfig]]:
    """Nested model sequence: intercept only, fixed effects, full model."""
    steps = [("null", config.override(fixed=(), random="none", slope_column=None))]
    if config.fixed:
        steps.append(("fixed", config.override(random="none", slope_column=None)))
    if config.random != "none":
        steps.append(("full", config))
    return steps


def _cmd_compare(config: AnalysisConfig, args, out_dir: Path) -> dict:
    t0 = time.perf_counter()
    data = _load_data(config)
    fits = []
    timings = {}
    for name, cfg in _ladder(config):
        spec = cfg.model_spec()
        t1 = time.perf_counter()
        fits.append(
            fit_laplace(data, spec, priors=cfg.prior_spec(spec),
                        options=cfg.laplace_options(), model_name=name)
        )
        timings[name] = time.perf_counter() - t1
    comparison = compare_models(fits)
    table = out_dir / "comparison.csv"
    comparison.write_csv(table)
    models = [
        {"name": fit.model_name, "criteria": dict(fit.gof or {}), "parameters": fit.summary()}
        for fit in fits
    ]
    timings["total"] = time.perf_counter() - t0
    return {
        "command": "compare",
        "engine": "laplace",
        "seed": config.seed,
        "model": _model_block(config, data),
        "models": models,
        "timings": timings,
        "files": {"table": table.name},
    }


def _cmd_sensitivity(config: AnalysisConfig, args, out_dir: Path) -> dict:
    t0 = time.perf_counter()
    data = _load_data(config)
    spec = config.model_spec()
    report = sensitivity_scan(
        data, spec,
        priors=config.prior_spec(spec),
        param=config.scan_param,
        targets=config.targets,
        base_prior=config.scan_base_prior(),
        options=config.laplace_options(compute_gof=False),
    )
    table = out_dir / "sensitivity.csv"
    summary_table = out_dir / "sensitivity_summary.csv"
    report.write_csv(table)
    report.write_summary_csv(summary_table)
    rows = []
    for r in report.rows:
        rows.append({
            "target": r.target,
            "shape": r.prior.shape if r.prior else None,
            "rate": r.prior.rate if r.prior else None,
            "prior_hellinger": r.prior_h,
            "posterior_hellinger": r.posterior_h,
            "sensitivity_ratio": r.ratio,
            "error": r.error,
        })
    return {
        "command": "sensitivity",
        "engine": "laplace",
        "seed": config.seed,
        "model": _model_block(config, data),
        "parameters": report.default_summary,
        "rows": rows,
        "timings": {"total": time.perf_counter() - t0},
        "files": {"table": table.name, "summary_table": summary_table.name},
    }


def _cmd_elicit(config: AnalysisConfig, args, out_dir: Path) -> dict:
    t0 = time.perf_counter()
    if args.range is None:
        raise DomainError("elicit needs --range")
    inp = ElicitationInput(range_r=args.range, df=args.df, coverage=args.coverage)
    g = elicit_gamma_prior(inp)
    print(f"shape {g.shape:.4g} rate {g.rate:.4g}")
    return {
        "command": "elicit",
        "seed": config.seed,
        "result": {
            "shape": g.shape,
            "rate": g.rate,
            "range": inp.range_r,
            "df": inp.df,
            "coverage": inp.coverage,
            "implied_range": elicited_range_roundtrip(g, inp.coverage),
        },
        "timings": {"total": time.perf_counter() - t0},
        "files": {},
    }


def _cmd_simulate(config: AnalysisConfig, args, out_dir: Path) -> dict:
    t0 = time.perf_counter()
    study = simulate_study(
        seed=config.seed,
        n_groups=args.n_groups,
        n_total=args.n_total,
        random=args.random,
        link=args.link,
        phi=args.phi,
        tau1_sq=args.tau1_sq,
        tau2_sq=args.tau2_sq,
        rho_corr=args.rho_corr,
    )
    data_path = out_dir / "simulated.csv"
    write_rows_csv(study.rows, data_path)
    return {
        "command": "simulate",
        "seed": config.seed,
        "model": {
            "fixed": list(study.spec.fixed),
            "random": study.spec.random,
            "link": study.spec.link,
            "n_obs": study.data.n,
            "n_groups": study.data.n_groups,
        },
        "truth": study.truth.as_dict(),
        "timings": {"total": time.perf_counter() - t0},
        "files": {"data": data_path.name},
    }


_HANDLERS = {
    "fit": _cmd_fit,
    "mcmc": _cmd_mcmc,
    "ml": _cmd_ml,
    "compare": _cmd_compare,
    "sensitivity": _cmd_sensitivity,
    "elicit": _cmd_elicit,
    "simulate": _cmd_simulate,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="betamix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--engine", choices=["laplace", "mcmc", "ml"],
                       help="inference engine (fit command)")
        p.add_argument("--out-dir", help="output directory (default: current)")
        p.add_argument("--data", help="input data CSV")

    for name, descr in [
        ("fit", "posterior fit with marginal densities and criteria"),
        ("mcmc", "adaptive MCMC run with diagnostics"),
        ("ml", "maximum likelihood fit with intervals"),
        ("compare", "fit the nested model ladder and tabulate criteria"),
        ("sensitivity", "prior sensitivity scan"),
        ("elicit", "gamma prior from a random-effect range statement"),
        ("simulate", "generate a synthetic study CSV"),
    ]:
        p = sub.add_parser(name, help=descr)
        common(p)
        if name == "ml":
            p.add_argument("--profile", action="store_true",
                           help="profile-likelihood intervals instead of Wald")
            p.add_argument("--level", type=float, default=0.95)
        if name == "sensitivity":
            p.add_argument("--param", choices=["phi", "tau"], help="scanned parameter")
            p.add_argument("--targets", help="comma-separated Hellinger targets")
        if name == "elicit":
            p.add_argument("--range", type=float, help="plausible |effect| range R")
            p.add_argument("--df", type=float, default=1.0)
            p.add_argument("--coverage", type=float, default=0.95)
        if name == "simulate":
            p.add_argument("--n-groups", type=int, default=8)
            p.add_argument("--n-total", type=int, default=365)
            p.add_argument("--random", default="intercept",
                           choices=["none", "intercept", "intercept+slope"])
            p.add_argument("--link", default="logit",
                           choices=["logit", "probit", "cloglog"])
            p.add_argument("--phi", type=float, default=93.0)
            p.add_argument("--tau1-sq", type=float, default=64.0)
            p.add_argument("--tau2-sq", type=float, default=533.0)
            p.add_argument("--rho-corr", type=float, default=0.75)
    return parser


def _config_from_args(args) -> AnalysisConfig:
    config = AnalysisConfig.from_file(args.config) if args.config else AnalysisConfig()
    overrides = {
        "seed": args.seed,
        "engine": args.engine,
        "out_dir": args.out_dir,
        "data": args.data,
    }
    if getattr(args, "param", None) is not None:
        overrides["scan_param"] = args.param
    if getattr(args, "targets", None) is not None:
        try:
            overrides["targets"] = tuple(float(t) for t in args.targets.split(","))
        except ValueError:
            raise DomainError(f"could not parse --targets {args.targets!r}") from None
    return config.override(**overrides)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = _config_from_args(args)
        out_dir = Path(config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = _HANDLERS[args.command](config, args, out_dir)
        path = _write_json(summary, out_dir / f"{summary['command']}_summary.json")
        print(f"wrote {path}")
        return 0
    except BrokenPipeError:
        return 1
    except Exception as exc:  # noqa: BLE001 - the contract is a JSON error record
        record = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(record), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
