"""Pattern-wise losses, analytic prediction error, cross-validation and the
Monte Carlo comparison of strategies."""

from __future__ import annotations

import concurrent.futures as cf
import hashlib
import json
import logging
import os
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from patternkit import __version__
from patternkit.data import Dataset, PatternIndex, partition, partition_mask, pattern_label
from patternkit.imputation import (
    ImputationFallbackWarning,
    ImputationMethod,
    ImputationOptions,
    fit_engine,
    imputation_error,
    impute_rows,
)
from patternkit.linear import DesignSpec, LinearFit, design_matrix, fit_least_squares
from patternkit.mechanisms import (
    Formulation,
    GenConfig,
    MechanismSpec,
    calibrated,
    cond_draw_x2_given_x1,
    generate,
)
from patternkit.predictors import Method, MethodSpec, fit_method
from patternkit.seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


# -- pattern-wise loss -----------------------------------------------------------


@dataclass(frozen=True)
class PatternLossReport:
    """Per-pattern ``(count, mse)`` and their frequency-weighted total."""

    per_pattern: dict
    weighted_total: float
    method_label: str = ""
    replicate_seed: int | None = None
    p: int | None = None

    @property
    def n(self) -> int:
        return sum(c for c, _ in self.per_pattern.values())

    def rows(self) -> list[dict]:
        n = self.n
        out = []
        for pid in sorted(self.per_pattern):
            count, mse = self.per_pattern[pid]
            out.append(
                {
                    "scope": "pattern",
                    "pattern_id": pid,
                    "pattern": pattern_label(pid, self.p) if self.p else str(pid),
                    "count": count,
                    "mse": mse,
                    "weight": count / n,
                    "contribution": count / n * mse,
                }
            )
        out.append(
            {"scope": "total", "pattern_id": "", "pattern": "", "count": n, "mse": self.weighted_total,
             "weight": 1.0, "contribution": self.weighted_total}
        )
        return out


def pattern_losses(preds, truth, patterns, method_label: str = "", replicate_seed=None, p=None) -> PatternLossReport:
    """Squared-error loss per pattern and weighted by empirical pattern frequency.

    ``patterns`` is a :class:`PatternIndex` or a mask matrix.
    """
    preds = np.asarray(preds, dtype=float).reshape(-1)
    truth = np.asarray(truth, dtype=float).reshape(-1)
    if preds.size == 0:
        raise EvaluationError("no predictions to evaluate")
    if preds.size != truth.size:
        raise EvaluationError(f"{preds.size} predictions for {truth.size} outcomes")
    if not isinstance(patterns, PatternIndex):
        mask = np.asarray(patterns)
        p = mask.shape[1] if p is None else p
        patterns = partition_mask(mask)
    if patterns.n != preds.size:
        raise EvaluationError("pattern index does not cover the predictions")
    sq = (truth - preds) ** 2
    per = {}
    total = 0.0
    for pid in patterns:
        rows = patterns[pid]
        mse = float(np.mean(sq[rows]))
        per[pid] = (int(rows.size), mse)
        total += rows.size / preds.size * mse
    return PatternLossReport(per, total, method_label, replicate_seed, p)


# -- analytic expected prediction error --------------------------------------------


def epe_large(fit: LinearFit, x_point, sigma2: float | None = None) -> float:
    """``sigma^2 (1 + d' (D'D)^+ d)`` for a correctly specified full model."""
    s2 = fit.sigma2 if sigma2 is None else sigma2
    if s2 is None or not np.isfinite(s2):
        raise EvaluationError("sigma2 is undefined for this fit")
    d = design_matrix(fit.spec, np.asarray(x_point, dtype=float).reshape(1, -1))[0]
    return float(s2 * (1.0 + d @ fit.gram_inverse @ d))


def _full_row(small_fit: LinearFit, x_point, x_missing_value, p: int):
    obs = list(small_fit.spec.columns)
    miss = [j for j in range(p) if j not in obs]
    row = np.empty(p)
    row[obs] = np.asarray(x_point, dtype=float).reshape(-1)
    row[miss] = np.asarray(x_missing_value, dtype=float).reshape(-1)
    return row


def epe_small(small_fit: LinearFit, true_beta, x_point, x_missing_value, sigma2: float | None = None) -> float:
    """Expected squared error of an underspecified model at one covariate point.

    Squared bias of the small model's mean against the true mean, plus its
    estimation variance and the irreducible error. ``x_point`` holds the small
    model's covariates (in its column order), ``x_missing_value`` the omitted
    ones; ``true_beta`` is ``(intercept, beta_1..beta_p)``.
    """
    true_beta = np.asarray(true_beta, dtype=float)
    p = true_beta.size - 1
    row = _full_row(small_fit, x_point, x_missing_value, p)
    s2 = small_fit.sigma2 if sigma2 is None else sigma2
    d = design_matrix(small_fit.spec, row.reshape(1, -1))[0]
    bias = d @ small_fit.coefficients - (true_beta[0] + row @ true_beta[1:])
    return float(bias**2 + s2 * (1.0 + d @ small_fit.gram_inverse @ d))


def epe_pmks(epe_l: float, epe_s: float, p_missing: float) -> float:
    """Pattern-weighted mix of the full-pattern and missing-pattern errors."""
    if not 0.0 <= p_missing <= 1.0:
        raise EvaluationError("p_missing must lie in [0, 1]")
    return (1.0 - p_missing) * epe_l + p_missing * epe_s


@dataclass(frozen=True)
class Figure1Config:
    mu: tuple = (3.0, 3.0)
    sigma1: float = 1.0
    sigma2: float = 1.0
    rho: float = 0.5
    beta: tuple = (1.0, 3.0, 1.0)
    noise_sd: float = 1.0
    n_train: int = 100
    p_missing: float = 0.5
    grid: tuple = tuple(np.linspace(0.0, 6.0, 13))
    draws: int = 10_000
    seed: int = 20170101
    quad_nodes: int = 20


def figure1_experiment(cfg: Figure1Config = Figure1Config()) -> list[dict]:
    """Analytic and simulated prediction error of full, small and PMKS predictions over an x1 grid.

    The training design is drawn once and held fixed; the missing-pattern
    model uses x1 only. Analytic values average the pointwise formulas over
    ``X2 | X1 = x1`` by Gauss-Hermite quadrature (exact for quadratics). The
    Monte Carlo column redraws training noise, the test covariate, the test
    outcome and the pattern for every draw.
    """
    beta = np.asarray(cfg.beta, dtype=float)
    s2 = cfg.noise_sd**2
    rng = derive_rng(cfg.seed, 0)
    cov = np.array(
        [[cfg.sigma1**2, cfg.rho * cfg.sigma1 * cfg.sigma2], [cfg.rho * cfg.sigma1 * cfg.sigma2, cfg.sigma2**2]]
    )
    x_train = np.asarray(cfg.mu) + rng.standard_normal((cfg.n_train, 2)) @ np.linalg.cholesky(cov).T
    mean_train = beta[0] + x_train @ beta[1:]
    large_spec = DesignSpec(intercept=True, columns=(0, 1))
    small_spec = DesignSpec(intercept=True, columns=(0,))
    # fits to the noiseless mean carry the expected coefficients and the designs' Gram inverses
    large = fit_least_squares(x_train, mean_train, large_spec)
    small = fit_least_squares(x_train, mean_train, small_spec)
    d_large = design_matrix(large_spec, x_train)
    d_small = design_matrix(small_spec, x_train)
    proj_large = large.gram_inverse @ d_large.T
    proj_small = small.gram_inverse @ d_small.T

    nodes, weights = np.polynomial.hermite_e.hermegauss(cfg.quad_nodes)
    weights = weights / weights.sum()
    cond_sd = np.sqrt(1.0 - cfg.rho**2) * cfg.sigma2
    rows = []
    for g, x1 in enumerate(cfg.grid):
        cond_mean = cfg.mu[1] + cfg.sigma2 / cfg.sigma1 * cfg.rho * (x1 - cfg.mu[0])
        x2q = cond_mean + cond_sd * nodes
        e_l = float(sum(w * epe_large(large, [x1, v], s2) for w, v in zip(weights, x2q)))
        e_s = float(sum(w * epe_small(small, beta, [x1], [v], s2) for w, v in zip(weights, x2q)))
        e_p = epe_pmks(e_l, e_s, cfg.p_missing)

        mc = derive_rng(cfg.seed, 1, g)
        eps = cfg.noise_sd * mc.standard_normal((cfg.draws, cfg.n_train))
        coef_l = large.coefficients + eps @ proj_large.T
        coef_s = small.coefficients + eps @ proj_small.T
        x2 = cond_draw_x2_given_x1(x1, cfg.mu, cfg.sigma1, cfg.sigma2, cfg.rho, mc, size=cfg.draws)
        y = beta[0] + beta[1] * x1 + beta[2] * x2 + cfg.noise_sd * mc.standard_normal(cfg.draws)
        missing = mc.random(cfg.draws) < cfg.p_missing
        pred_l = coef_l[:, 0] + coef_l[:, 1] * x1 + coef_l[:, 2] * x2
        pred_s = coef_s[:, 0] + coef_s[:, 1] * x1
        err = (y - np.where(missing, pred_s, pred_l)) ** 2
        rows.append(
            {
                "x1": float(x1),
                "epe_l": e_l,
                "epe_s": e_s,
                "epe_pmks": e_p,
                "mc_estimate": float(err.mean()),
                "mc_se": float(err.std(ddof=1) / np.sqrt(cfg.draws)),
            }
        )
    return rows


# -- cross-validation -----------------------------------------------------------------


def stratified_folds(ds: Dataset, k: int, seed: int) -> np.ndarray:
    """Fold label per row: each pattern's rows are shuffled and dealt round-robin.

    The deal continues across patterns so fold sizes stay balanced.
    """
    if k < 2:
        raise EvaluationError("k must be at least 2")
    if k > ds.n:
        raise EvaluationError(f"k = {k} exceeds the number of rows ({ds.n})")
    rng = derive_rng(seed, 0)
    folds = np.empty(ds.n, dtype=int)
    offset = 0
    index = partition(ds)
    for pid in index:
        rows = rng.permutation(index[pid])
        folds[rows] = (offset + np.arange(rows.size)) % k
        offset = (offset + rows.size) % k
    return folds


def _engine_key(spec: MethodSpec):
    em = spec.engine_method
    return None if em is None else (em, spec.options)


def kfold_predictions(ds: Dataset, specs, k: int, seed: int) -> dict:
    """Held-out predictions for several strategies on shared folds.

    Strategies needing the same imputation engine share one fit per fold. Each
    strategy draws from its own copy of the fold stream, so a result does not
    depend on which other strategies are evaluated alongside it.
    """
    folds = stratified_folds(ds, k, seed)
    preds = {i: np.empty(ds.n) for i in range(len(specs))}
    for f in range(k):
        test = np.flatnonzero(folds == f)
        train = ds.subset(np.flatnonzero(folds != f))
        engines = {}
        for i, spec in enumerate(specs):
            key = _engine_key(spec)
            engine_seed = int(derive_seed(seed, 1, f).generate_state(1)[0])
            if key is not None and key not in engines:
                engines[key] = fit_engine(train, key[0], key[1], engine_seed)
            model = fit_method(train, spec, engine_seed, engines.get(key))
            preds[i][test] = model.predict_rows(ds.x[test], ds.mask[test], derive_rng(seed, 2, f))
    return preds


def kfold_cv(ds: Dataset, spec: MethodSpec, k: int, seed: int, label: str | None = None) -> PatternLossReport:
    """Pattern-stratified k-fold cross-validated squared error."""
    pred = kfold_predictions(ds, [spec], k, seed)[0]
    return pattern_losses(pred, ds.y, partition(ds), label or spec.method.value, seed, ds.p)


def kfold_cv_many(ds: Dataset, specs: dict, k: int, seed: int) -> dict:
    """``{label: PatternLossReport}`` for several strategies on the same folds."""
    labels = list(specs)
    preds = kfold_predictions(ds, [specs[lb] for lb in labels], k, seed)
    index = partition(ds)
    return {lb: pattern_losses(preds[i], ds.y, index, lb, seed, ds.p) for i, lb in enumerate(labels)}


def report_csv(report: PatternLossReport) -> str:
    lines = ["method,scope,pattern_id,pattern,count,mse,weight,contribution"]
    for r in report.rows():
        lines.append(
            ",".join(
                [report.method_label, r["scope"], str(r["pattern_id"]), r["pattern"], str(r["count"]),
                 repr(float(r["mse"])), repr(float(r["weight"])), repr(float(r["contribution"]))]
            )
        )
    return "\n".join(lines) + "\n"


# -- Monte Carlo comparison ----------------------------------------------------------------

ENGINE_LABELS = {
    "zero": (ImputationMethod.ZERO, False),
    "uncond-mean": (ImputationMethod.UNCOND_MEAN, False),
    "cond-mean": (ImputationMethod.COND_MEAN, False),
    "cond-mean-bayes": (ImputationMethod.COND_MEAN_BAYES, False),
    "pmm": (ImputationMethod.PMM, False),
    "pmm-y": (ImputationMethod.PMM, True),
}


@dataclass(frozen=True)
class Scenario:
    mechanism: MechanismSpec
    formulation: Formulation = Formulation.SELECTION
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "formulation", Formulation(self.formulation))

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        suffix = "" if self.formulation is Formulation.SELECTION else " PMY"
        return f"{self.mechanism.kind.value}{suffix}"


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo protocol: train, fit, draw a fresh test set, predict record by record."""

    generator: GenConfig = field(default_factory=GenConfig)
    scenarios: tuple = ()
    methods: tuple = (Method.PMKS, Method.CCS, Method.COMPLETE_CASE, Method.MI, Method.MIMI)
    imputation: ImputationOptions = field(default_factory=ImputationOptions)
    mi_engine: ImputationMethod = ImputationMethod.PMM
    complete_case_engine: ImputationMethod = ImputationMethod.COND_MEAN
    imputation_error_engines: tuple = ()
    reps: int = 1000
    n_out: int | None = None
    seed: int = 0
    min_pattern_size: int | None = None
    own_only: bool = False

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(Method(m) for m in self.methods))
        object.__setattr__(self, "mi_engine", ImputationMethod(self.mi_engine))
        object.__setattr__(self, "complete_case_engine", ImputationMethod(self.complete_case_engine))
        for e in self.imputation_error_engines:
            if e not in ENGINE_LABELS:
                raise EvaluationError(f"unknown imputation engine label {e!r}")
        if self.reps < 1:
            raise EvaluationError("reps must be positive")
        if not self.scenarios:
            raise EvaluationError("at least one scenario is required")

    def method_spec(self, method: Method) -> MethodSpec:
        engine = {Method.COMPLETE_CASE: self.complete_case_engine, Method.MI: self.mi_engine,
                  Method.MIMI: self.mi_engine}.get(method)
        return MethodSpec(method, engine, self.imputation, self.min_pattern_size, self.own_only)


@dataclass
class SimReport:
    """Aggregated Monte Carlo results.

    ``rows`` carry (scenario, formulation, method, scope, mean, MC SE, reps,
    failures); ``raw`` keeps the per-replicate totals for paired comparisons.
    """

    rows: list
    imputation_errors: list
    raw: dict = field(repr=False, default_factory=dict)
    raw_imputation: dict = field(repr=False, default_factory=dict)
    meta: dict = field(default_factory=dict)

    def total(self, scenario: str, method: str) -> dict:
        for r in self.rows:
            if r["scenario"] == scenario and r["method"] == method and r["scope"] == "total":
                return r
        raise KeyError((scenario, method))

    def to_csv(self) -> str:
        lines = ["scenario,mechanism,formulation,method,scope,mean_pe,mc_se,reps,failures"]
        for r in self.rows:
            lines.append(
                f"{r['scenario']},{r['mechanism']},{r['formulation']},{r['method']},{r['scope']},"
                f"{_num(r['mean'])},{_num(r['mc_se'])},{r['reps']},{r['failures']}"
            )
        return "\n".join(lines) + "\n"

    def imputation_csv(self) -> str:
        lines = ["scenario,mechanism,formulation,engine,mean_error,mc_se,reps"]
        for r in self.imputation_errors:
            lines.append(
                f"{r['scenario']},{r['mechanism']},{r['formulation']},{r['engine']},"
                f"{_num(r['mean'])},{_num(r['mc_se'])},{r['reps']}"
            )
        return "\n".join(lines) + "\n"


def _num(v) -> str:
    return repr(float(v)) if v is not None and np.isfinite(v) else "NA"


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def run_replicate(cfg: SimConfig, scenario: Scenario, scen_idx: int, rep: int) -> dict:
    """Steps 1-6 of the protocol for one replicate; returns raw losses and imputation errors."""
    rng = derive_rng(cfg.seed, 1, scen_idx, rep)
    gen = replace(cfg.generator, formulation=scenario.formulation)
    train = generate(gen, scenario.mechanism, rng).data
    test = generate(gen, scenario.mechanism, rng, cfg.n_out)
    engine_seed = int(derive_seed(cfg.seed, 2, scen_idx, rep).generate_state(1)[0])
    engines = {}

    def engine_for(method: ImputationMethod, include_y: bool):
        opts = replace(cfg.imputation, include_y=include_y)
        key = (method, opts)
        if key not in engines:
            engines[key] = fit_engine(train, method, opts, engine_seed)
        return engines[key]

    out = {"losses": {}, "imputation": {}, "failures": []}
    t = test.data
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ImputationFallbackWarning)
        for mi, method in enumerate(cfg.methods):
            spec = cfg.method_spec(method)
            try:
                em = spec.engine_method
                engine = None if em is None else engine_for(em, cfg.imputation.include_y)
                model = fit_method(train, spec, engine_seed, engine)
                pred = model.predict_rows(t.x, t.mask, derive_rng(cfg.seed, 3, scen_idx, rep, mi))
                rep_ = pattern_losses(pred, t.y, t.mask, method.value, rep, t.p)
                out["losses"][method.value] = {
                    "total": rep_.weighted_total,
                    "patterns": {pid: mse for pid, (_, mse) in rep_.per_pattern.items()},
                }
            except Exception as exc:  # recorded and excluded from aggregation
                out["failures"].append((method.value, repr(exc)))
        target = scenario.mechanism.target_column
        for ei, label in enumerate(cfg.imputation_error_engines):
            method, include_y = ENGINE_LABELS[label]
            engine = engine_for(method, include_y)
            comp = impute_rows(engine, t.x, t.mask, derive_rng(cfg.seed, 4, scen_idx, rep, ei))
            out["imputation"][label] = imputation_error(test.x_true[:, target], comp[:, :, target], t.mask[:, target])
    return out


def _replicate_task(args):
    cfg, scenario, scen_idx, rep = args
    return run_replicate(cfg, scenario, scen_idx, rep)


def _workers() -> int:
    env = os.environ.get("PATTERNKIT_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise EvaluationError(f"PATTERNKIT_THREADS must be an integer, got {env!r}") from None
    return cap


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def run_simulation(cfg: SimConfig, workers: int | None = None, config_dict: dict | None = None) -> SimReport:
    """Run every scenario for ``cfg.reps`` replicates and aggregate in a fixed order."""
    workers = _workers() if workers is None else workers
    rows, imp_rows, raw, raw_imp = [], [], {}, {}
    for s_idx, sc in enumerate(cfg.scenarios):
        mech = sc.mechanism
        if mech.nu0 is None:
            mech = calibrated(mech, replace(cfg.generator, formulation=sc.formulation), cfg.seed)
        scenario = replace(sc, mechanism=mech)
        tasks = [(cfg, scenario, s_idx, r) for r in range(cfg.reps)]
        if workers > 1 and cfg.reps > 1:
            with cf.ProcessPoolExecutor(max_workers=min(workers, cfg.reps)) as pool:
                results = list(pool.map(_replicate_task, tasks, chunksize=max(1, cfg.reps // (4 * workers))))
        else:
            results = [_replicate_task(t) for t in tasks]
        base = {"scenario": scenario.name, "mechanism": mech.kind.value, "formulation": scenario.formulation.value}
        for method in sorted(m.value for m in cfg.methods):
            totals = [r["losses"][method]["total"] for r in results if method in r["losses"]]
            fails = sum(1 for r in results for f in r["failures"] if f[0] == method)
            raw[(scenario.name, method)] = np.asarray(totals)
            mean, se = _mean_se(totals)
            rows.append({**base, "method": method, "scope": "total", "mean": mean, "mc_se": se,
                         "reps": len(totals), "failures": fails})
            pids = sorted({pid for r in results if method in r["losses"] for pid in r["losses"][method]["patterns"]})
            for pid in pids:
                vals = [r["losses"][method]["patterns"][pid] for r in results
                        if method in r["losses"] and pid in r["losses"][method]["patterns"]]
                mean, se = _mean_se(vals)
                rows.append({**base, "method": method, "scope": f"pattern-{pattern_label(pid, cfg.generator.p)}",
                             "mean": mean, "mc_se": se, "reps": len(vals), "failures": fails})
        for label in cfg.imputation_error_engines:
            vals = [r["imputation"][label] for r in results]
            raw_imp[(scenario.name, label)] = np.asarray(vals)
            mean, se = _mean_se(vals)
            imp_rows.append({**base, "engine": label, "mean": mean, "mc_se": se, "reps": len(vals)})
        for r_i, r in enumerate(results):
            for method, msg in r["failures"]:
                log.warning("scenario %s replicate %d: %s failed: %s", scenario.name, r_i, method, msg)
    meta = {
        "toolkit_version": __version__,
        "master_seed": cfg.seed,
        "reps": cfg.reps,
        "config_hash": config_hash(config_dict if config_dict is not None else repr(cfg)),
    }
    return SimReport(rows, imp_rows, raw, raw_imp, meta)
