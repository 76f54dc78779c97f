"""Simulation scenarios and the replicate harness comparing both fitting methods.

Scenario A: one three-level factor, 20 observations per level, P=3 and a
constant precision. Scenario B: a two-level factor plus a covariate X2 that
enters the third mean dimension and the log precision. Truth surfaces use the
multivariate logit with dimension 1 as the base.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import sampler as _sampler
from .baseline import fit_ml_regression, ml_intervals
from .dirichlet import rdirichlet, replace_zeros
from .errors import DomainError
from .links import softmax
from .metrics import coverage_and_width, sce
from .model import CompositionDataset, ModelConfig, build_design, cell_means_columns
from .parallel import pmap

SCENARIO_A_COEFS = ((-0.9, 0.6, 1.2), (0.8, -1.0, 0.5))
SCENARIO_B_FACTOR_COEFS = ((-0.9, 0.6), (1.8, -1.0))
SCENARIO_B_SLOPE = 0.75
SCENARIO_B_PRECISION = (-1.0, 0.5)
SCENARIOS = ("A", "B", "A8", "custom")
METHODS = ("baseline", "new")
MASK64 = (1 << 64) - 1


def mix_seed(seed: int, index: int) -> int:
    """SplitMix64 finaliser applied to ``seed + index`` (replicate seeds)."""
    z = (int(seed) + 0x9E3779B97F4A7C15 * (int(index) + 1)) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class ScenarioConfig:
    """Generating settings.

    ``coefficients`` holds one tuple per non-base dimension with one entry per
    factor level (cell-means form). ``phi`` is the constant precision of the
    factor-only scenarios.
    """

    scenario: str = "A"
    n_per_level: int | None = None
    phi: float = 1.0
    coefficients: tuple | None = None
    P: int | None = None
    replicates: int = 100
    seed: int = 0
    x2_range: tuple = (4.5, 7.5)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise DomainError(f"unknown scenario {self.scenario!r}; valid: {', '.join(SCENARIOS)}")
        if self.replicates < 1:
            raise DomainError("replicates must be at least 1")
        if not self.phi > 0:
            raise DomainError("phi must be positive")
        if self.n_per_level is not None and self.n_per_level < 2:
            raise DomainError("n_per_level must be at least 2")
        if self.scenario == "custom" and self.coefficients is None:
            raise DomainError("a custom scenario needs coefficients")

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        # a shared CLI config may hold other options; keep only scenario fields
        raw = {k: v for k, v in raw.items() if k in cls.__dataclass_fields__}
        if "coefficients" in raw:
            raw["coefficients"] = tuple(tuple(float(v) for v in row) for row in raw["coefficients"])
        if "x2_range" in raw:
            raw["x2_range"] = tuple(raw["x2_range"])
        raw.setdefault("scenario", "custom")
        return cls(**raw)

    def resolved_coefficients(self) -> np.ndarray:
        """(P-1, levels) generating coefficients of the non-base dimensions."""
        if self.coefficients is not None:
            return np.asarray(self.coefficients, dtype=float)
        if self.scenario == "A":
            return np.asarray(SCENARIO_A_COEFS)
        if self.scenario == "A8":
            P = self.P or 8
            # fixed draw so that every replicate shares one truth surface
            return np.random.default_rng(mix_seed(self.seed, -1)).uniform(-1.5, 1.5, size=(P - 1, 3))
        return np.asarray(SCENARIO_B_FACTOR_COEFS)


def _factor(levels: int, n_per: int) -> np.ndarray:
    return np.repeat(np.arange(1, levels + 1), n_per)


#: generated components below this (floating-point underflow) are replaced
SIM_FLOOR = 1e-300


def _draw(alpha, rng) -> np.ndarray:
    # small concentrations give astronomically small components; they are kept
    # as drawn and only true underflow is replaced
    return replace_zeros(rdirichlet(alpha, rng), eps=SIM_FLOOR)


def generate_scenario_a(config: ScenarioConfig = ScenarioConfig(), seed: int = 0):
    """Factor-only data (Scenario A and its variants).

    Returns
    -------
    dataset, true_mu
    """
    coefs = config.resolved_coefficients()
    levels = coefs.shape[1]
    n_per = config.n_per_level or 20
    f = _factor(levels, n_per)
    X, names = cell_means_columns(f, "f")
    # base dimension first, one column per dimension
    B = np.vstack([np.zeros(levels), coefs]).T
    true_mu = softmax(X @ B)
    rng = np.random.default_rng(seed)
    Y = _draw(true_mu * config.phi, rng)
    n = Y.shape[0]
    ds = CompositionDataset(
        Y, X, np.ones((n, 1)), mean_names=tuple(names), precision_names=("(Intercept)",),
        coding="cell-means", meta={"scenario": config.scenario, "seed": seed}, min_component=SIM_FLOOR,
    )
    return ds, true_mu


def scenario_b_x2(config: ScenarioConfig, n_per: int) -> np.ndarray:
    lo, hi = config.x2_range
    return np.tile(np.linspace(lo, hi, n_per), 2)


def generate_scenario_b(config: ScenarioConfig = ScenarioConfig(scenario="B"), seed: int = 0):
    """Factor plus covariate (Scenario B).

    Returns
    -------
    dataset, true_mu, true_phi
    """
    n_per = config.n_per_level or 40
    coefs = config.resolved_coefficients()
    f = _factor(2, n_per)
    x2 = scenario_b_x2(config, n_per)
    cells, _ = cell_means_columns(f, "f")
    eta = np.column_stack([np.zeros(2 * n_per), cells @ coefs[0], cells @ coefs[1] + SCENARIO_B_SLOPE * x2])
    true_mu = softmax(eta)
    true_phi = np.exp(SCENARIO_B_PRECISION[0] + SCENARIO_B_PRECISION[1] * x2)
    rng = np.random.default_rng(seed)
    Y = _draw(true_mu * true_phi[:, None], rng)
    X, names, coding = build_design({"f": f, "x2": x2}, factors=["f"])
    W, wnames, _ = build_design({"x2": x2})
    ds = CompositionDataset(
        Y, X, W, mean_names=tuple(names), precision_names=tuple(wnames), coding=coding,
        meta={"scenario": "B", "seed": seed}, min_component=SIM_FLOOR,
    )
    return ds, true_mu, true_phi


def generate(config: ScenarioConfig, seed: int):
    """Dataset, true mean surface and true precision for any scenario."""
    if config.scenario == "B":
        return generate_scenario_b(config, seed)
    ds, mu = generate_scenario_a(config, seed)
    return ds, mu, np.full(ds.n, config.phi)


# --------------------------------------------------------------------------
# synthetic analogue of the netball movement data
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NetballConfig:
    """Generating parameters of the synthetic netball analogue.

    Seven positions (fixed effect) and 40 players (random effect) with 1-9
    matches each. Each observation is the proportion of time spent standing,
    walking and running. Position means are on the multivariate logit scale
    with standing as the base; player effects are N(0, player_sd**2) on the
    non-base linear predictors.
    """

    n_positions: int = 7
    n_players: int = 40
    min_matches: int = 1
    max_matches: int = 9
    player_sd: float = 0.5
    phi: float = 30.0
    position_coefs: tuple = (
        (0.10, -0.20, 0.30, 0.00, -0.40, 0.20, -0.10),  # walking vs standing
        (-0.90, -1.30, -0.60, -1.00, -1.60, -0.80, -1.20),  # running vs standing
    )


POSITIONS = ("GS", "GA", "WA", "C", "WD", "GD", "GK")
MOVEMENTS = ("standing", "walking", "running")


def generate_netball(config: NetballConfig = NetballConfig(), seed: int = 0) -> dict:
    """Rows of a netball-style table plus the generating truth.

    Returns a dict with ``columns`` (name -> list of values, ready for CSV),
    ``true_mu`` and ``player_effects``.
    """
    rng = np.random.default_rng(seed)
    coefs = np.asarray(config.position_coefs, dtype=float)
    players = np.arange(config.n_players)
    position_of = rng.integers(0, config.n_positions, size=config.n_players)
    matches = rng.integers(config.min_matches, config.max_matches + 1, size=config.n_players)
    effects = rng.normal(0.0, config.player_sd, size=(config.n_players, 2))
    pl = np.repeat(players, matches)
    pos = position_of[pl]
    eta = np.column_stack([np.zeros(pl.size), coefs[0, pos] + effects[pl, 0], coefs[1, pos] + effects[pl, 1]])
    mu = softmax(eta)
    Y = _draw(mu * config.phi, rng)
    names = POSITIONS if config.n_positions <= len(POSITIONS) else tuple(f"P{k + 1}" for k in range(config.n_positions))
    columns = {
        "player": [f"player{p + 1:02d}" for p in pl],
        "position": [names[p] for p in pos],
    }
    for j, m in enumerate(MOVEMENTS):
        columns[m] = Y[:, j].tolist()
    return {"columns": columns, "true_mu": mu, "player_effects": effects, "Y": Y}


def netball_dataset(data: dict) -> CompositionDataset:
    """Position cell-means design, intercept-only precision, player groups."""
    cols = data["columns"]
    X, names, coding = build_design({"position": cols["position"]}, factors=["position"])
    players = sorted(set(cols["player"]))
    code = {p: i for i, p in enumerate(players)}
    group = np.array([code[p] for p in cols["player"]], dtype=np.int64)
    n = len(group)
    return CompositionDataset(
        np.asarray(data["Y"]), X, np.ones((n, 1)), group=group, response_names=MOVEMENTS,
        mean_names=tuple(names), precision_names=("(Intercept)",), group_levels=tuple(players), coding=coding,
    )


# --------------------------------------------------------------------------
# replicate harness
# --------------------------------------------------------------------------


@dataclass
class ReplicateResult:
    index: int
    seed: int
    stats: dict = field(default_factory=dict)  # method -> {sce, coverage, std_width, predictive_coverage}
    pvalues: dict = field(default_factory=dict)  # method -> {name: p}
    failures: dict = field(default_factory=dict)  # method -> message


@dataclass
class StudySummary:
    config: ScenarioConfig
    methods: tuple
    mean_sce: dict
    mean_coverage: dict
    mean_std_width: dict
    predictive_coverage: dict
    median_pvalues: dict  # method -> {name: median p}
    n_success: dict
    n_failed: dict
    replicates: list = field(default_factory=list)


def _fit_stats(mu_hat, lower, upper, pred_lower, pred_upper, true_mu, y_new) -> dict:
    cov, width = coverage_and_width(lower, upper, true_mu, true_mu)
    pcov = float(np.mean((pred_lower <= y_new) & (y_new <= pred_upper)))
    return {"sce": sce(mu_hat, true_mu), "coverage": cov, "std_width": width, "predictive_coverage": pcov}


def _replicate(args) -> ReplicateResult:
    index, config, sconf, mconf, methods = args
    seed = mix_seed(config.seed, index)
    ds, true_mu, true_phi = generate(config, seed)
    # an independent draw at the same design points for predictive coverage
    y_new = _draw(true_mu * true_phi[:, None], np.random.default_rng(mix_seed(seed, 1)))
    res = ReplicateResult(index=index, seed=seed)
    if "baseline" in methods:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = fit_ml_regression(ds, seed=seed % (2**32))
                iv = ml_intervals(fit, ds.X, ds.W, seed=seed % (2**32))
            res.stats["baseline"] = _fit_stats(iv.mean, iv.lower, iv.upper, iv.pred_lower, iv.pred_upper, true_mu, y_new)
            p = {}
            for k in range(ds.Q):
                for j in range(ds.P):
                    if j != fit.base:
                        p[f"beta[{k + 1},{j + 1}]"] = float(fit.wald_p[k, j])
            for r in range(ds.R):
                p[f"beta_phi[{r + 1}]"] = float(fit.wald_p_phi[r])
            res.pvalues["baseline"] = p
        except Exception as exc:  # recorded and excluded from averages
            res.failures["baseline"] = f"{type(exc).__name__}: {exc}"
    if "new" in methods:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                chains = _sampler.run(ds, mconf, replace(sconf, seed=seed % (2**32)))
                s = _sampler.summarize(chains)
                pred = _sampler.posterior_predictive(chains, ds, seed=seed % (2**32))
            res.stats["new"] = _fit_stats(s.mu_mean, s.mu_lower, s.mu_upper, pred.lower, pred.upper, true_mu, y_new)
            res.pvalues["new"] = {nm: float(p) for nm, p in zip(s.names, s.p_value) if nm.startswith("beta")}
        except Exception as exc:
            res.failures["new"] = f"{type(exc).__name__}: {exc}"
    return res


def aggregate(config: ScenarioConfig, methods, results: list) -> StudySummary:
    """Means over successful replicates and per-coefficient median p-values."""
    results = sorted(results, key=lambda r: r.index)
    out = {k: {} for k in ("sce", "coverage", "std_width", "predictive_coverage")}
    med, n_ok, n_bad = {}, {}, {}
    for m in methods:
        ok = [r for r in results if m in r.stats]
        n_ok[m], n_bad[m] = len(ok), len(results) - len(ok)
        for k in out:
            out[k][m] = float(np.mean([r.stats[m][k] for r in ok])) if ok else math.nan
        names = sorted({nm for r in ok for nm in r.pvalues.get(m, {})})
        med[m] = {nm: float(np.nanmedian([r.pvalues[m].get(nm, math.nan) for r in ok])) for nm in names}
    return StudySummary(
        config=config, methods=tuple(methods), mean_sce=out["sce"], mean_coverage=out["coverage"],
        mean_std_width=out["std_width"], predictive_coverage=out["predictive_coverage"],
        median_pvalues=med, n_success=n_ok, n_failed=n_bad, replicates=results,
    )


def run_study(config: ScenarioConfig, sampler_config: _sampler.SamplerConfig = _sampler.SamplerConfig(),
              methods=METHODS, model_config: ModelConfig = ModelConfig(), workers: int | None = None) -> StudySummary:
    """Generate, fit and score every replicate; deterministic given ``config.seed``."""
    methods = tuple(m for m in METHODS if m in set(methods))
    if not methods:
        raise DomainError(f"methods must include one of {METHODS}")
    jobs = [(i, config, sampler_config, model_config, methods) for i in range(config.replicates)]
    return aggregate(config, methods, pmap(_replicate, jobs, workers))


def _fmt(v) -> str:
    return repr(float(v))


def write_study_summary(summary: StudySummary, path) -> None:
    """Summary table: one row per statistic, one column per method."""
    rows = [
        ("Error", 0.0, summary.mean_sce),
        ("Coverage", 0.95, summary.mean_coverage),
        ("Std. Width", 0.0, summary.mean_std_width),
        ("Predictive Coverage", 0.95, summary.predictive_coverage),
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["statistic", "target"] + list(summary.methods))
        for name, target, vals in rows:
            w.writerow([name, _fmt(target)] + [_fmt(vals[m]) for m in summary.methods])
        w.writerow(["Fitted replicates", ""] + [str(summary.n_success[m]) for m in summary.methods])
        w.writerow(["Failed replicates", ""] + [str(summary.n_failed[m]) for m in summary.methods])


def write_pvalues(summary: StudySummary, path) -> None:
    """Median p-value per coefficient and method (blank where a method has none)."""
    names = sorted({nm for m in summary.methods for nm in summary.median_pvalues[m]}, key=_name_key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter"] + [f"median_p_{m}" for m in summary.methods])
        for nm in names:
            w.writerow([nm] + [_fmt(summary.median_pvalues[m][nm]) if nm in summary.median_pvalues[m] else ""
                               for m in summary.methods])


def _name_key(name: str):
    head, _, idx = name.partition("[")
    return (head, tuple(int(v) for v in idx.rstrip("]").split(",")) if idx else ())


def format_summary(summary: StudySummary) -> str:
    """Plain-text table in the layout of the printed tables."""
    label = {"baseline": "ML baseline", "new": "New method"}
    head = f"{'Scenario ' + summary.config.scenario:<22}{'Target':>8}" + "".join(f"{label[m]:>14}" for m in summary.methods)
    lines = [head]
    for name, target, vals in (
        ("Error", 0.0, summary.mean_sce), ("Coverage", 0.95, summary.mean_coverage),
        ("Std. Width", 0.0, summary.mean_std_width), ("Predictive coverage", 0.95, summary.predictive_coverage),
    ):
        lines.append(f"{name:<22}{target:>8.2f}" + "".join(f"{vals[m]:>14.2f}" for m in summary.methods))
    lines.append(f"{'Failed replicates':<22}{'':>8}" + "".join(f"{summary.n_failed[m]:>14d}" for m in summary.methods))
    return "\n".join(lines)
