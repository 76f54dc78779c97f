"""Command-line interface: ``dirireg fit | fit-ml | study | demo``.

Every command writes CSV artifacts into ``--out``; all of them are
deterministic functions of the input file, the options and ``--seed``.
Options may also come from a JSON file (``--config``); explicit flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings

import numpy as np

from . import __version__
from . import sampler as smp
from .baseline import fit_ml_regression, ml_intervals
from .errors import ConvergenceError
from .links import inv_logit, logit
from .model import CompositionDataset, ModelConfig, load_csv
from .parallel import thread_cap
from .simstudy import (
    SCENARIOS,
    NetballConfig,
    ScenarioConfig,
    format_summary,
    generate_netball,
    netball_dataset,
    run_study,
    write_pvalues,
    write_study_summary,
)

DEFAULTS = {
    "input": None, "response": None, "mean_cols": "", "precision_cols": "", "group": None,
    "random_effects": False, "chains": 2, "iters": 4000, "burnin": 2000, "thin": 2, "seed": 0,
    "out": ".", "scenario": "A", "replicates": 100, "phi": None, "demo": "netball",
}


class CLIError(Exception):
    """A user-facing failure; the message is printed and the exit status is nonzero."""

    def __init__(self, message, status=2):
        super().__init__(message)
        self.status = status


def _split(value) -> list:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value if str(v).strip()]
    return [v.strip() for v in str(value).split(",") if v.strip()]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------


def _add_common(p, data=True, sampling=True):
    p.add_argument("--config", help="JSON file with option values (flags override it)")
    p.add_argument("--out", help="output directory (default: current directory)")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    if data:
        p.add_argument("--input", help="CSV file with a header row")
        p.add_argument("--response", help="comma-separated response columns (default y1..yP)")
        p.add_argument("--mean-cols", dest="mean_cols", help="comma-separated covariates of the mean model")
        p.add_argument("--precision-cols", dest="precision_cols",
                       help="comma-separated covariates of the precision model (default intercept only)")
    if sampling:
        p.add_argument("--chains", type=int, help="number of chains (default 2)")
        p.add_argument("--iters", type=int, help="iterations per chain including burn-in (default 4000)")
        p.add_argument("--burnin", type=int, help="burn-in iterations (default 2000)")
        p.add_argument("--thin", type=int, help="keep every k-th draw (default 2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dirireg", description="Bayesian and ML Dirichlet regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the Bayesian penalized Dirichlet model by MCMC")
    _add_common(p)
    p.add_argument("--group", help="grouping column for random effects")
    p.add_argument("--random-effects", dest="random_effects", action="store_true", default=None,
                   help="add per-group random intercepts to every mean dimension (needs --group)")

    p = sub.add_parser("fit-ml", help="fit the maximum-likelihood baseline with Wald tests")
    _add_common(p, sampling=False)

    p = sub.add_parser("study", help="run a simulation study comparing both methods")
    _add_common(p, data=False)
    p.add_argument("--scenario", help=f"one of {', '.join(SCENARIOS)} (custom needs --config)")
    p.add_argument("--replicates", type=int, help="number of simulated datasets (default 100)")
    p.add_argument("--phi", type=float, help="constant precision of the factor scenarios (default 1)")

    p = sub.add_parser("demo", help="generate and analyse a synthetic dataset")
    _add_common(p, data=False)
    p.add_argument("--demo", choices=["netball"], help="which synthetic analogue (default netball)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the JSON config file and explicit flags (in that order)."""
    opts = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            raise CLIError(f"--config: cannot read {args.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise CLIError("--config: the JSON document must be an object")
        for k, v in cfg.items():
            opts[k.replace("-", "_")] = v
    for k, v in vars(args).items():
        if v is not None and k not in ("config", "command"):
            opts[k] = v
    opts["command"] = args.command
    opts["config_path"] = getattr(args, "config", None)
    for name in ("chains", "iters", "burnin", "thin", "replicates"):
        if name in opts and opts[name] is not None and int(opts[name]) < (0 if name == "burnin" else 1):
            raise CLIError(f"--{name} must be {'non-negative' if name == 'burnin' else 'positive'}")
    return opts


def _sampler_config(opts) -> smp.SamplerConfig:
    try:
        return smp.SamplerConfig(
            n_chains=int(opts["chains"]), n_iter=int(opts["iters"]), n_burnin=int(opts["burnin"]),
            thin=int(opts["thin"]), seed=int(opts["seed"]),
        )
    except ValueError as exc:
        raise CLIError(f"sampler settings (--chains/--iters/--burnin/--thin): {exc}") from None


def _load(opts, with_group=False) -> CompositionDataset:
    if not opts["input"]:
        raise CLIError("--input is required")
    if opts.get("random_effects") and not opts.get("group"):
        raise CLIError("--random-effects requires --group")
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            ds = load_csv(
                opts["input"], response=_split(opts["response"]) or None, mean_cols=_split(opts["mean_cols"]),
                precision_cols=_split(opts["precision_cols"]), group=opts.get("group") if with_group else None,
            )
        for w in caught:
            print(f"dirireg: warning: {w.message}", file=sys.stderr)
    except OSError as exc:
        raise CLIError(f"--input: cannot read {opts['input']}: {exc.strerror or exc}") from None
    except KeyError as exc:
        raise CLIError(f"{exc.args[0]} (check --response/--mean-cols/--precision-cols/--group)") from None
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    return ds


def _outdir(opts) -> str:
    out = opts["out"]
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"--out: cannot create {out}: {exc.strerror}") from None
    return out


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------


def _label(name, ds) -> str:
    """Readable label of a flat parameter name such as ``beta[2,3]``."""
    head, _, idx = name.partition("[")
    ix = [int(v) - 1 for v in idx.rstrip("]").split(",")] if idx else []
    if head == "beta":
        return f"{ds.mean_names[ix[0]]}:{ds.response_names[ix[1]]}"
    if head == "beta_phi":
        return f"precision:{ds.precision_names[ix[0]]}"
    if head == "u":
        return f"{ds.group_levels[ix[0]]}:{ds.response_names[ix[1]]}"
    if head == "sigma_u":
        return f"sd:{ds.response_names[ix[0]]}"
    return name


def _pattern_groups(ds):
    """Unique rows of the mean design, labelled by their non-zero columns."""
    rows, first = np.unique(ds.X, axis=0, return_index=True)
    order = np.argsort(first)
    rows = rows[order]
    labels = []
    for r in rows:
        parts = [f"{n}={v:g}" if v != 1 else n for n, v in zip(ds.mean_names, r) if v != 0]
        labels.append("&".join(parts) or "(zero)")
    return rows, labels


def _bayes_group_intervals(chains, ds, level=0.95):
    rows, labels = _pattern_groups(ds)
    beta = np.concatenate([c.beta for c in chains])  # (K, Q, P)
    mu = inv_logit(np.einsum("gq,kqp->kgp", rows, beta))
    mu = mu / mu.sum(axis=2, keepdims=True)
    q = [(1 - level) / 2, (1 + level) / 2]
    lo, hi = np.quantile(mu, q, axis=0)
    return labels, mu.mean(axis=0), lo, hi


def _plot_rows(labels, est, lo, hi, ds, method):
    for g, lab in enumerate(labels):
        for j, dim in enumerate(ds.response_names):
            yield [lab, dim, est[g, j], lo[g, j], hi[g, j], method]


PLOT_HEADER = ["group", "dimension", "estimate", "lower", "upper", "method"]


def write_fit_outputs(chains, ds, out) -> smp.FitSummary:
    s = smp.summarize(chains)
    _write_csv(
        os.path.join(out, "fit_summary.csv"),
        ["parameter", "label", "mean", "median", "lower", "upper", "p_value", "rhat", "ess"],
        ([nm, _label(nm, ds), s.mean[i], s.median[i], s.lower[i], s.upper[i], s.p_value[i], s.rhat[i], s.ess[i]]
         for i, nm in enumerate(s.names)),
    )
    for c, ch in enumerate(chains):
        smp.write_chain_csv(ch, os.path.join(out, f"chain_{c + 1}.csv"))
    _write_csv(
        os.path.join(out, "mu_intervals.csv"),
        ["observation", "dimension", "mean", "median", "lower", "upper"],
        ([i + 1, dim, s.mu_mean[i, j], s.mu_median[i, j], s.mu_lower[i, j], s.mu_upper[i, j]]
         for i in range(ds.n) for j, dim in enumerate(ds.response_names)),
    )
    labels, est, lo, hi = _bayes_group_intervals(chains, ds)
    _write_csv(os.path.join(out, "plotdata_intervals.csv"), PLOT_HEADER,
               _plot_rows(labels, est, lo, hi, ds, "new:credible"))
    return s


def write_ml_outputs(fit, ds, out, seed=0) -> None:
    se = fit.std_errors()
    theta = fit.theta
    p = np.concatenate([fit.wald_p[:, [j for j in range(ds.P) if j != fit.base]].ravel(), fit.wald_p_phi])
    with np.errstate(invalid="ignore", divide="ignore"):
        z = theta / se
    _write_csv(
        os.path.join(out, "fit_summary.csv"),
        ["parameter", "label", "estimate", "std_error", "z", "wald_p"],
        ([nm, _label(nm, ds), theta[i], se[i], z[i], p[i]] for i, nm in enumerate(fit.names)),
    )
    iv = ml_intervals(fit, ds.X, ds.W, seed=seed)
    _write_csv(
        os.path.join(out, "mu_intervals.csv"),
        ["observation", "dimension", "mean", "lower", "upper"],
        ([i + 1, dim, iv.mean[i, j], iv.lower[i, j], iv.upper[i, j]]
         for i in range(ds.n) for j, dim in enumerate(ds.response_names)),
    )
    rows, labels = _pattern_groups(ds)
    # mean intervals do not depend on the precision; use the average precision covariates
    W0 = np.tile(ds.W.mean(axis=0), (rows.shape[0], 1))
    giv = ml_intervals(fit, rows, W0, seed=seed)
    _write_csv(os.path.join(out, "plotdata_intervals.csv"), PLOT_HEADER,
               _plot_rows(labels, giv.mean, giv.lower, giv.upper, ds, "baseline:wald"))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_fit(opts) -> int:
    ds = _load(opts, with_group=bool(opts.get("group")))
    sconf = _sampler_config(opts)
    mconf = ModelConfig(random_effects=bool(opts.get("random_effects")))
    out = _outdir(opts)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        chains = smp.run(ds, mconf, sconf, workers=thread_cap())
    for w in caught:
        print(f"dirireg: warning: {w.message}", file=sys.stderr)
    s = write_fit_outputs(chains, ds, out)
    worst = np.nanmax(s.rhat) if np.any(np.isfinite(s.rhat)) else float("nan")
    print(f"fit: {ds.n} observations, {s.n_draws} pooled draws, max R-hat {worst:.3f}; results in {out}")
    return 0


def cmd_fit_ml(opts) -> int:
    ds = _load(opts)
    out = _outdir(opts)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit = fit_ml_regression(ds, seed=int(opts["seed"]))
        for w in caught:
            print(f"dirireg: warning: {w.message}", file=sys.stderr)
    except ConvergenceError as exc:
        path = os.path.join(out, "convergence_trace.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(exc.trace, fh, indent=1, default=float)
        raise CLIError(f"{exc}; trace written to {path}", status=1) from None
    write_ml_outputs(fit, ds, out, seed=int(opts["seed"]))
    print(f"fit-ml: log-likelihood {fit.log_likelihood:.4f}, gradient max-norm {fit.grad_max:.2e}; results in {out}")
    return 0


def cmd_study(opts) -> int:
    scenario = str(opts["scenario"])
    if scenario not in SCENARIOS:
        raise CLIError(f"--scenario: unknown scenario {scenario!r}; valid options: {', '.join(SCENARIOS)}")
    try:
        if scenario == "custom":
            if not opts.get("config_path"):
                raise CLIError("--scenario custom needs --config with generating coefficients")
            if "coefficients" not in _json(opts):
                raise CLIError("--config: a custom scenario needs a 'coefficients' entry")
            base = ScenarioConfig.from_json(opts["config_path"])
        else:
            base = ScenarioConfig(scenario=scenario)
        kw = {"replicates": int(opts["replicates"]), "seed": int(opts["seed"])}
        if opts.get("phi") is not None:
            kw["phi"] = float(opts["phi"])
        config = ScenarioConfig(**{**_scenario_fields(base), **kw})
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    sconf = _sampler_config(opts)
    out = _outdir(opts)
    summary = run_study(config, sconf)
    write_study_summary(summary, os.path.join(out, "study_summary.csv"))
    write_pvalues(summary, os.path.join(out, "pvalues.csv"))
    print(format_summary(summary))
    return 0


def _json(opts) -> dict:
    with open(opts["config_path"], encoding="utf-8") as fh:
        return json.load(fh)


def _scenario_fields(cfg: ScenarioConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def run_netball_demo(out, seed=0, sconf: smp.SamplerConfig | None = None, config=NetballConfig()) -> dict:
    """Generate the netball analogue and run the four analyses.

    Returns a dict with the dataset, the Bayesian summary and the per-method
    group intervals (also written to ``out``).
    """
    import statsmodels.api as sm

    data = generate_netball(config, seed)
    cols = data["columns"]
    header = list(cols)
    _write_csv(os.path.join(out, "netball.csv"), header, zip(*(cols[h] for h in header)))
    ds = netball_dataset(data)
    rows, labels = _pattern_groups(ds)
    plot = []

    # per-dimension analyses on the logit scale (approximate: ignore the sum-to-one structure)
    z = logit(ds.Y)
    for method in ("logit-lm", "logit-mixed"):
        est = np.empty((rows.shape[0], ds.P))
        lo, hi = np.empty_like(est), np.empty_like(est)
        for j in range(ds.P):
            if method == "logit-lm":
                res = sm.OLS(z[:, j], ds.X).fit()
            else:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    res = sm.MixedLM(z[:, j], ds.X, groups=ds.group).fit(reml=True)
            b = np.asarray(res.fe_params if method == "logit-mixed" else res.params)
            cov = np.asarray(res.cov_params())[: ds.Q, : ds.Q]
            eta = rows @ b
            se = np.sqrt(np.einsum("gq,qr,gr->g", rows, cov, rows))
            est[:, j], lo[:, j], hi[:, j] = inv_logit(eta), inv_logit(eta - 1.96 * se), inv_logit(eta + 1.96 * se)
        plot += list(_plot_rows(labels, est, lo, hi, ds, f"{method}:approximate"))

    fit = fit_ml_regression(ds.without_groups(), seed=seed)
    giv = ml_intervals(fit, rows, np.ones((rows.shape[0], 1)), seed=seed)
    plot += list(_plot_rows(labels, giv.mean, giv.lower, giv.upper, ds, "baseline:wald"))

    sconf = sconf or smp.SamplerConfig(seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        chains = smp.run(ds, ModelConfig(random_effects=True), sconf, workers=thread_cap())
    s = smp.summarize(chains)
    lab, est, lo, hi = _bayes_group_intervals(chains, ds)
    plot += list(_plot_rows(lab, est, lo, hi, ds, "new:credible"))
    _write_csv(
        os.path.join(out, "fit_summary.csv"),
        ["parameter", "label", "mean", "median", "lower", "upper", "p_value", "rhat", "ess"],
        ([nm, _label(nm, ds), s.mean[i], s.median[i], s.lower[i], s.upper[i], s.p_value[i], s.rhat[i], s.ess[i]]
         for i, nm in enumerate(s.names) if not nm.startswith("u[")),
    )
    _write_csv(os.path.join(out, "plotdata_intervals.csv"), PLOT_HEADER, plot)
    return {"dataset": ds, "summary": s, "chains": chains, "truth": data}


def cmd_demo(opts) -> int:
    out = _outdir(opts)
    res = run_netball_demo(out, seed=int(opts["seed"]), sconf=_sampler_config(opts))
    s = res["summary"]
    med = [s.median[s.names.index(f"sigma_u[{j + 1}]")] for j in range(res["dataset"].P)]
    print("demo netball: posterior median sigma_u = " + ", ".join(f"{v:.3f}" for v in med) + f"; results in {out}")
    return 0


COMMANDS = {"fit": cmd_fit, "fit-ml": cmd_fit_ml, "study": cmd_study, "demo": cmd_demo}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except CLIError as exc:
        print(f"dirireg: error: {exc}", file=sys.stderr)
        return exc.status
    except (ValueError, RuntimeError) as exc:
        print(f"dirireg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
