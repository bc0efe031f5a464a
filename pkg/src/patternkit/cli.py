"""Command-line front end: simulate, fit, predict, evaluate, epe-curves.

Exit status is 0 on success, 1 on runtime failure and 2 on configuration or
input validation failure. Every output file is written atomically and gets a
JSON sidecar recording the config hash, seed and toolkit version.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from patternkit import __version__
from patternkit.data import DataError, atomic_write_text, load_csv, load_records, pattern_ids
from patternkit.evaluation import (
    ENGINE_LABELS,
    EvaluationError,
    Figure1Config,
    Scenario,
    SimConfig,
    config_hash,
    figure1_experiment,
    kfold_cv,
    report_csv,
    run_simulation,
)
from patternkit.imputation import ImputationError, ImputationMethod, ImputationOptions
from patternkit.mechanisms import Formulation, GenConfig, MechanismError, MechanismSpec
from patternkit.predictors import (
    Method,
    MethodSpec,
    PredictionError,
    UnservablePattern,
    fit_method,
    model_from_dict,
)
from patternkit.predictors import _SubmodelPredictor
from patternkit.seeding import derive_rng

log = logging.getLogger("patternkit")


class ConfigError(ValueError):
    pass


# -- strict config parsing ---------------------------------------------------------


def _check_keys(block: dict, allowed, where: str) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(f"{where}: expected an object")
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key {key!r}")
    return block


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


IMPUTATION_KEYS = ("method", "m", "k_donors", "cycles", "include_y", "mode")
GENERATOR_KEYS = ("n", "mu", "sigma", "beta", "delta_indicator", "delta_interaction", "noise_sd", "col_names")
SCENARIO_KEYS = (
    "kind", "target_prob", "nu0", "nu1", "nu2", "nu1y", "nu2y",
    "target_column", "driver_column", "formulation", "label",
)
SIMULATE_KEYS = (
    "seed", "reps", "n_out", "generator", "scenarios", "methods", "imputation", "mi_engine",
    "complete_case_engine", "imputation_error_engines", "min_pattern_size", "own_only",
)
METHOD_KEYS = ("engine", "imputation", "min_pattern_size", "own_only", "na_token", "seed", "sealed")
CURVE_KEYS = ("mu", "sigma1", "sigma2", "rho", "beta", "noise_sd", "n_train", "p_missing", "grid", "draws",
                "seed", "quad_nodes")


def _tuple(v):
    return tuple(_tuple(e) for e in v) if isinstance(v, list) else v


def parse_imputation(block) -> tuple[ImputationOptions, str | None]:
    """Options plus the engine named by ``imputation.method``, if any."""
    block = dict(_check_keys(block, IMPUTATION_KEYS, "imputation"))
    method = block.pop("method", None)
    return ImputationOptions(**block), method


def _engine_choice(cfg: dict, key: str, named: str | None):
    if named is not None and cfg.get(key) is not None and cfg[key] != named:
        raise ConfigError(f"config: '{key}' ({cfg[key]!r}) conflicts with imputation.method ({named!r})")
    return cfg.get(key, named)


def parse_sim_config(cfg: dict, reps=None, seed=None) -> SimConfig:
    _check_keys(cfg, SIMULATE_KEYS, "config")
    seed = cfg.get("seed") if seed is None else seed
    if seed is None:
        raise ConfigError("config: a master 'seed' is required (or pass --seed)")
    gen = _check_keys(cfg.get("generator", {}), GENERATOR_KEYS, "generator")
    gen_cfg = GenConfig(**{k: _tuple(v) for k, v in gen.items()})
    if "scenarios" not in cfg or not cfg["scenarios"]:
        raise ConfigError("config: 'scenarios' must list at least one mechanism")
    scenarios = []
    for i, sc in enumerate(cfg["scenarios"]):
        sc = dict(_check_keys(sc, SCENARIO_KEYS, f"scenarios[{i}]"))
        formulation = sc.pop("formulation", Formulation.SELECTION.value)
        label = sc.pop("label", None)
        scenarios.append(Scenario(MechanismSpec(**sc), formulation, label))
    opts, named = parse_imputation(cfg.get("imputation", {}))
    eng = cfg.get("imputation_error_engines", [])
    for e in eng:
        if e not in ENGINE_LABELS:
            raise ConfigError(f"imputation_error_engines: unknown engine {e!r}")
    return SimConfig(
        generator=gen_cfg,
        scenarios=tuple(scenarios),
        methods=tuple(cfg.get("methods", [m.value for m in SimConfig.methods])),
        imputation=opts,
        mi_engine=_engine_choice(cfg, "mi_engine", named) or ImputationMethod.PMM.value,
        complete_case_engine=cfg.get("complete_case_engine", ImputationMethod.COND_MEAN.value),
        imputation_error_engines=tuple(eng),
        reps=int(cfg.get("reps", 1000) if reps is None else reps),
        n_out=cfg.get("n_out"),
        seed=int(seed),
        min_pattern_size=cfg.get("min_pattern_size"),
        own_only=bool(cfg.get("own_only", False)),
    )


def parse_method_config(method: str, cfg: dict) -> MethodSpec:
    _check_keys(cfg, METHOD_KEYS, "config")
    opts, named = parse_imputation(cfg.get("imputation", {}))
    return MethodSpec(
        Method(method),
        _engine_choice(cfg, "engine", named),
        opts,
        cfg.get("min_pattern_size"),
        bool(cfg.get("own_only", False)),
    )


# -- output helpers ------------------------------------------------------------------


def _num(v) -> str:
    return repr(float(v)) if np.isfinite(v) else "NA"


def write_meta(path, command: str, cfg: dict, seed, extra=None) -> None:
    meta = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "toolkit_version": __version__,
    }
    meta.update(extra or {})
    atomic_write_text(path, json.dumps(meta, indent=2, sort_keys=True) + "\n")


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


# -- commands -----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    raw = read_config(args.config)
    cfg = parse_sim_config(raw, args.reps, args.seed)
    out = Path(args.out)
    report = run_simulation(cfg, config_dict=raw)
    atomic_write_text(out / "sim_report.csv", report.to_csv())
    if cfg.imputation_error_engines:
        atomic_write_text(out / "imputation_errors.csv", report.imputation_csv())
    write_meta(out / "metadata.json", "simulate", raw, cfg.seed, {"reps": cfg.reps})
    return 0


def cmd_fit(args) -> int:
    raw = read_config(args.config)
    spec = parse_method_config(args.method, raw)
    na = raw.get("na_token", "NA")
    seed = int(raw.get("seed", 0) if args.seed is None else args.seed)
    ds = load_csv(args.train, args.response, na)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = fit_method(ds, spec, seed)
    for w in caught:
        log.warning("%s", w.message)
    if args.sealed or raw.get("sealed", False):
        if not isinstance(model, _SubmodelPredictor):
            raise ConfigError("--sealed applies to pmks and ccs models only")
        model = model.sealed()
    d = model.to_dict()
    d["response"] = args.response
    atomic_write_text(args.model_out, json.dumps(d, sort_keys=True) + "\n")
    write_meta(sidecar(args.model_out), "fit", raw, seed, {"method": spec.method.value})
    return 0


def predict_with_audit(model, x, mask, rng):
    """Predictions plus per-row pattern id, fallback note and error code."""
    n = x.shape[0]
    preds = np.full(n, np.nan)
    notes = [""] * n
    errors = [""] * n
    ids = pattern_ids(mask) if n else np.zeros(0, dtype=np.int64)
    if not isinstance(model, _SubmodelPredictor):
        preds[:] = model.predict_rows(x, mask, rng)
        return preds, ids, notes, errors
    xm = np.where(mask == 1, np.nan, x)
    for pid in np.unique(ids):
        rows = np.flatnonzero(ids == pid)
        try:
            sub, note = model.route(int(pid))
        except UnservablePattern:
            for r in rows:
                errors[r] = "unservable-pattern"
            continue
        preds[rows] = sub.fit.predict(xm[rows])
        for r in rows:
            notes[r] = note
    return preds, ids, notes, errors


def cmd_predict(args) -> int:
    try:
        with open(args.model, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model {args.model}: {exc}") from exc
    model = model_from_dict(d)
    x, mask, _ = load_records(args.input, model.col_names, args.na_token)
    seed = 0 if args.seed is None else args.seed
    preds, ids, notes, errors = predict_with_audit(model, x, mask, derive_rng(seed, 0))
    lines = ["row,prediction,pattern_id,fallback_used,error"]
    for i in range(x.shape[0]):
        lines.append(f"{i},{_num(preds[i])},{int(ids[i])},{notes[i]},{errors[i]}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    n_err = sum(1 for e in errors if e)
    write_meta(sidecar(args.out), "predict", {"model": d.get("method"), "input": str(args.input)}, seed,
               {"rows": int(x.shape[0]), "row_errors": n_err})
    if n_err:
        print(f"patternkit: {n_err} of {x.shape[0]} rows could not be served (see 'error' column)", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    raw = read_config(args.config)
    spec = parse_method_config(args.method, raw)
    ds = load_csv(args.data, args.response, raw.get("na_token", "NA"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = kfold_cv(ds, spec, args.folds, args.seed)
    atomic_write_text(args.out, report_csv(report))
    write_meta(sidecar(args.out), "evaluate", raw, args.seed, {"method": spec.method.value, "folds": args.folds})
    return 0


def cmd_epe_curves(args) -> int:
    raw = read_config(args.config)
    _check_keys(raw, CURVE_KEYS, "config")
    fields = {k: _tuple(v) for k, v in raw.items()}
    if args.seed is not None:
        fields["seed"] = args.seed
    cfg = Figure1Config(**fields)
    rows = figure1_experiment(cfg)
    cols = ("x1", "epe_l", "epe_s", "epe_pmks", "mc_estimate", "mc_se")
    lines = [",".join(cols)] + [",".join(_num(r[c]) for c in cols) for r in rows]
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    write_meta(sidecar(args.out), "epe-curves", raw, cfg.seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patternkit", description="Prediction with partly missing covariates.")
    ap.add_argument("--version", action="version", version=f"patternkit {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    methods = [m.value for m in Method]

    s = sub.add_parser("simulate", help="Monte Carlo comparison of strategies")
    s.add_argument("--config", required=True)
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit a strategy and save it as JSON")
    f.add_argument("--train", required=True)
    f.add_argument("--response", required=True)
    f.add_argument("--method", required=True, choices=methods)
    f.add_argument("--config")
    f.add_argument("--seed", type=int)
    f.add_argument("--sealed", action="store_true", help="drop training data from pmks/ccs models")
    f.add_argument("--model-out", required=True)
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict records with gaps")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--na-token", default="NA")
    p.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="pattern-stratified k-fold cross-validation")
    e.add_argument("--data", required=True)
    e.add_argument("--response", required=True)
    e.add_argument("--method", required=True, choices=methods)
    e.add_argument("--folds", type=int, default=10)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("epe-curves", help="analytic and simulated error curves over x1")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_epe_curves)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except PredictionError as exc:
        print(f"patternkit: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, MechanismError, ImputationError, EvaluationError, ValueError, TypeError) as exc:
        print(f"patternkit: invalid input: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"patternkit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
