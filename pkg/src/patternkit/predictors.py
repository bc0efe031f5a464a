"""Prediction strategies for records with missing covariates.

All five strategies answer the same question, "predict y for this partially
observed record":

* ``pmks``: one regression per missingness pattern, each fit only on that
  pattern's rows over its observed covariates. Sparse patterns borrow the
  complete-case submodel instead.
* ``ccs``: one regression per pattern, fit on every row that observes at
  least the pattern's observed covariates.
* ``complete-case``: a single full regression on fully observed rows; new
  records are completed by an imputation engine first.
* ``mi``: one full regression per completed training dataset; predictions
  are averaged over completions.
* ``mimi``: as ``mi`` with missingness indicators and covariate-by-indicator
  products added to the design.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from patternkit import __version__
from patternkit.data import Dataset, observed_columns, partition, pattern_ids
from patternkit.imputation import (
    ImputationEngine,
    ImputationMethod,
    ImputationOptions,
    fit_engine,
    impute_dataset,
    impute_rows,
    refit_mi_with_record,
)
from patternkit.linear import DesignSpec, LinearFit, fit_least_squares
from patternkit.seeding import as_rng, derive_rng

log = logging.getLogger(__name__)


class Method(str, Enum):
    PMKS = "pmks"
    CCS = "ccs"
    COMPLETE_CASE = "complete-case"
    MI = "mi"
    MIMI = "mimi"


class PredictionError(RuntimeError):
    pass


class UnservablePattern(PredictionError):
    def __init__(self, pid: int):
        super().__init__(f"no submodel can serve pattern {pid}")
        self.pattern = pid


def default_min_pattern_size(n_observed: int) -> int:
    """Sparsity threshold: patterns with at most ``2 * (p_obs + 1)`` rows borrow CCS."""
    return 2 * (n_observed + 1)


def _covers(mask: np.ndarray, pid: int) -> np.ndarray:
    """Rows whose observed set contains every column observed under ``pid``."""
    ids = pattern_ids(mask)
    return (ids & ~np.int64(pid)) == 0


def _ccs_fit(ds: Dataset, pid: int) -> LinearFit | None:
    rows = np.flatnonzero(_covers(ds.mask, pid))
    if rows.size == 0:
        return None
    spec = DesignSpec(intercept=True, columns=observed_columns(pid, ds.p))
    return fit_least_squares(ds.x[rows], ds.y[rows], spec)


@dataclass(frozen=True, eq=False)
class Submodel:
    pattern: int
    fit: LinearFit
    source: str  # "pattern", "ccs", "on-demand-ccs"

    def to_dict(self, col_names) -> dict:
        return {"pattern": self.pattern, "source": self.source, "fit": self.fit.to_dict(col_names)}

    @classmethod
    def from_dict(cls, d) -> "Submodel":
        return cls(int(d["pattern"]), LinearFit.from_dict(d["fit"]), d["source"])


@dataclass(eq=False)
class _SubmodelPredictor:
    p: int
    col_names: tuple
    submodels: dict
    training: Dataset | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _on_demand: dict = field(default_factory=dict, repr=False)

    method = None

    def route(self, pid: int) -> tuple[Submodel, str]:
        """Submodel serving pattern ``pid`` and a note describing any fallback."""
        sub = self.submodels.get(pid)
        if sub is not None:
            return sub, "" if sub.source == "pattern" or self.method is Method.CCS else "ccs-sparse"
        with self._lock:
            if pid in self._on_demand:
                return self._on_demand[pid]
            routed = self._fallback(pid)
            self._on_demand[pid] = routed
            log.info("pattern %d unseen in training: served by %s", pid, routed[1])
            return routed

    def _fallback(self, pid):
        if self.training is not None:
            fit = _ccs_fit(self.training, pid)
            if fit is not None:
                return Submodel(pid, fit, "on-demand-ccs"), "on-demand-ccs"
        best = None
        for sid in sorted(self.submodels):
            if sid & pid == pid:  # stored pattern observes a subset of the record's columns
                n_obs = self.p - bin(sid).count("1")
                if best is None or n_obs > best[0]:
                    best = (n_obs, sid)
        if best is None:
            raise UnservablePattern(pid)
        return self.submodels[best[1]], f"sub-pattern:{best[1]}"

    def predict_rows(self, x, mask, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.p)
        mask = np.asarray(mask, dtype=np.uint8).reshape(x.shape)
        x = np.where(mask == 1, np.nan, x)
        out = np.empty(x.shape[0])
        ids = pattern_ids(mask) if x.shape[0] else np.zeros(0, dtype=np.int64)
        for pid in np.unique(ids):
            rows = np.flatnonzero(ids == pid)
            sub, _ = self.route(int(pid))
            out[rows] = sub.fit.predict(x[rows])
        return out

    def sealed(self):
        """Copy without retained training data (unseen patterns use sub-pattern fallback)."""
        return type(self)(**{**self._fields(), "training": None})

    def _fields(self) -> dict:
        return {"p": self.p, "col_names": self.col_names, "submodels": self.submodels, "training": self.training}

    def _base_dict(self) -> dict:
        d = {
            "method": self.method.value,
            "p": self.p,
            "col_names": list(self.col_names),
            "toolkit_version": __version__,
            "fallback_policy": "on-demand-ccs" if self.training is not None else "widest-sub-pattern",
            "submodels": [self.submodels[k].to_dict(self.col_names) for k in sorted(self.submodels)],
        }
        if self.training is not None:
            d["training"] = _training_to_dict(self.training)
        return d


def _training_to_dict(t: Dataset) -> dict:
    return {"y": t.y.tolist(), "x": np.where(t.mask == 1, 0.0, t.x).tolist(), "mask": t.mask.tolist()}


def _training_from_dict(d, col_names):
    if "training" not in d:
        return None
    t = d["training"]
    return Dataset(t["y"], t["x"], t["mask"], col_names)


@dataclass(eq=False)
class PmksModel(_SubmodelPredictor):
    fallback_ids: frozenset = frozenset()
    min_pattern_size: int | None = None

    method = Method.PMKS

    def _fields(self):
        return {**super()._fields(), "fallback_ids": self.fallback_ids, "min_pattern_size": self.min_pattern_size}

    def to_dict(self) -> dict:
        d = self._base_dict()
        d["fallback_ids"] = sorted(self.fallback_ids)
        d["min_pattern_size"] = self.min_pattern_size
        return d

    @classmethod
    def from_dict(cls, d) -> "PmksModel":
        names = tuple(d["col_names"])
        subs = {s.pattern: s for s in map(Submodel.from_dict, d["submodels"])}
        return cls(
            int(d["p"]), names, subs, _training_from_dict(d, names),
            fallback_ids=frozenset(d.get("fallback_ids", ())), min_pattern_size=d.get("min_pattern_size"),
        )


@dataclass(eq=False)
class CcsModel(_SubmodelPredictor):
    method = Method.CCS

    def to_dict(self) -> dict:
        return self._base_dict()

    @classmethod
    def from_dict(cls, d) -> "CcsModel":
        names = tuple(d["col_names"])
        subs = {s.pattern: s for s in map(Submodel.from_dict, d["submodels"])}
        return cls(int(d["p"]), names, subs, _training_from_dict(d, names))


def fit_pmks(ds: Dataset, min_pattern_size: int | None = None, retain_training: bool = True) -> PmksModel:
    """Pattern mixture kernel submodels with complete-case fallback for sparse patterns.

    A pattern is fit on its own rows when it has more than ``min_pattern_size``
    rows (default ``2 * (p_obs + 1)``); otherwise its complete-case submodel is
    used and the pattern is recorded in ``fallback_ids``.
    """
    if ds.n < 1:
        raise PredictionError("cannot fit on an empty dataset")
    index = partition(ds)
    subs = {}
    fallback = set()
    for pid in index:
        obs = observed_columns(pid, ds.p)
        threshold = default_min_pattern_size(len(obs)) if min_pattern_size is None else min_pattern_size
        rows = index[pid]
        if rows.size > threshold:
            fit = fit_least_squares(ds.x[rows], ds.y[rows], DesignSpec(intercept=True, columns=obs))
            subs[pid] = Submodel(pid, fit, "pattern")
        else:
            subs[pid] = Submodel(pid, _ccs_fit(ds, pid), "ccs")
            fallback.add(pid)
    return PmksModel(
        ds.p, ds.col_names, subs, ds if retain_training else None,
        fallback_ids=frozenset(fallback), min_pattern_size=min_pattern_size,
    )


def fit_ccs(ds: Dataset, retain_training: bool = True) -> CcsModel:
    """Complete-case submodels for every observed pattern."""
    subs = {}
    for pid in partition(ds):
        fit = _ccs_fit(ds, pid)
        if fit is None:
            log.warning("pattern %d has no covering rows; left to prediction-time fallback", pid)
            continue
        subs[pid] = Submodel(pid, fit, "ccs")
    return CcsModel(ds.p, ds.col_names, subs, ds if retain_training else None)


# -- imputation-based models ---------------------------------------------------


def _full_spec(p: int) -> DesignSpec:
    return DesignSpec(intercept=True, columns=tuple(range(p)))


def mimi_spec(mask, own_only: bool = False) -> DesignSpec:
    """Full covariates plus indicators and ``x_j * M_k`` for every column ``k`` with missingness."""
    mask = np.asarray(mask)
    p = mask.shape[1]
    miss = tuple(int(k) for k in np.flatnonzero(mask.any(axis=0)))
    if own_only:
        inter = tuple((k, k) for k in miss)
    else:
        inter = tuple((j, k) for k in miss for j in range(p))
    return DesignSpec(intercept=True, columns=tuple(range(p)), indicator_columns=miss, interactions=inter)


@dataclass(eq=False)
class _ImputedPredictor:
    p: int
    col_names: tuple
    fits: list
    engine: ImputationEngine
    training: Dataset | None = field(default=None, repr=False)

    method = None

    @property
    def refits(self) -> bool:
        """True when incomplete records rerun the chained imputation with the training rows."""
        return _uses_refit(self.engine)

    def _refit_completions(self, x, mask, rng) -> np.ndarray:
        if self.training is None:
            raise PredictionError("refit imputation needs the training rows, which this model does not carry")
        rng = as_rng(rng if rng is not None else derive_rng(self.engine.seed, 1_000_003))
        out = np.broadcast_to(np.where(mask == 1, 0.0, x), (self.engine.m, *x.shape)).copy()
        for i in np.flatnonzero(mask.any(axis=1)):
            seed = int(rng.integers(2**63))
            comp = refit_mi_with_record(self.training, x[i], mask[i], self.engine.options, seed)
            out[:, i] = np.concatenate(comp.datasets)
        return out

    def predict_rows(self, x, mask, rng=None) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.p)
        mask = np.asarray(mask, dtype=np.uint8).reshape(x.shape)
        if self.refits:
            completions = self._refit_completions(x, mask, rng)
        else:
            completions = impute_rows(self.engine, x, mask, rng)
        if completions.shape[0] not in (1, len(self.fits)):
            raise PredictionError(
                f"engine returned {completions.shape[0]} completions for {len(self.fits)} fits"
            )
        preds = [
            fit.predict(completions[j if completions.shape[0] > 1 else 0], mask) for j, fit in enumerate(self.fits)
        ]
        return np.mean(preds, axis=0)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "p": self.p,
            "col_names": list(self.col_names),
            "toolkit_version": __version__,
            "fits": [f.to_dict(self.col_names) for f in self.fits],
            "engine": self.engine.to_dict(),
            **({"training": _training_to_dict(self.training)} if self.training is not None else {}),
        }

    @classmethod
    def from_dict(cls, d):
        names = tuple(d["col_names"])
        return cls(
            int(d["p"]),
            names,
            [LinearFit.from_dict(f) for f in d["fits"]],
            ImputationEngine.from_dict(d["engine"]),
            _training_from_dict(d, names),
        )


@dataclass(eq=False)
class CompleteCaseModel(_ImputedPredictor):
    method = Method.COMPLETE_CASE

    @property
    def fit(self) -> LinearFit:
        return self.fits[0]


@dataclass(eq=False)
class MiModel(_ImputedPredictor):
    method = Method.MI


@dataclass(eq=False)
class MimiModel(_ImputedPredictor):
    method = Method.MIMI

    @property
    def spec(self) -> DesignSpec:
        return self.fits[0].spec


def fit_complete_case(ds: Dataset, engine: ImputationEngine) -> CompleteCaseModel:
    """Single full regression on the fully observed rows."""
    rows = np.flatnonzero(ds.mask.sum(axis=1) == 0)
    if rows.size < ds.p + 2:
        raise PredictionError(f"{rows.size} complete rows; at least p + 2 = {ds.p + 2} needed")
    fit = fit_least_squares(ds.x[rows], ds.y[rows], _full_spec(ds.p))
    return CompleteCaseModel(ds.p, ds.col_names, [fit], engine, _refit_training(ds, engine))


def _completed_fits(ds, engine, spec, m, rng):
    completions = impute_dataset(engine, ds, rng).datasets
    if m is not None:
        if m > len(completions) and len(completions) > 1:
            raise PredictionError(f"engine provides {len(completions)} completions, {m} requested")
        completions = completions[:m] if len(completions) > 1 else completions
    return [fit_least_squares(c, ds.y, spec, ds.mask) for c in completions]


def _uses_refit(engine: ImputationEngine) -> bool:
    return engine.method is ImputationMethod.PMM and engine.options.mode == "refit"


def _refit_training(ds: Dataset, engine: ImputationEngine) -> Dataset | None:
    return ds if _uses_refit(engine) else None


def fit_mi(ds: Dataset, engine: ImputationEngine, m: int | None = None, rng=None) -> MiModel:
    """One full regression per completed training dataset."""
    fits = _completed_fits(ds, engine, _full_spec(ds.p), m, rng)
    return MiModel(ds.p, ds.col_names, fits, engine, _refit_training(ds, engine))


def fit_mimi(ds: Dataset, engine: ImputationEngine, m: int | None = None, own_only: bool = False, rng=None) -> MimiModel:
    """Indicator-augmented regression on each completed training dataset."""
    spec = mimi_spec(ds.mask, own_only)
    fits = _completed_fits(ds, engine, spec, m, rng)
    return MimiModel(ds.p, ds.col_names, fits, engine, _refit_training(ds, engine))


def delta_report(model: MimiModel) -> list[dict]:
    """Across-completion mean and standard deviation of each indicator-related coefficient."""
    spec = model.spec
    names = spec.term_names(model.col_names)
    first = int(spec.intercept) + len(spec.columns)
    coefs = np.array([f.coefficients for f in model.fits])
    rows = []
    for t in range(first, spec.n_terms):
        col = coefs[:, t]
        rows.append(
            {
                "term": names[t],
                "mean": float(col.mean()),
                "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0,
                "m": int(col.size),
            }
        )
    return rows


# -- uniform interface -----------------------------------------------------------

_DEFAULT_ENGINE = {
    Method.COMPLETE_CASE: ImputationMethod.COND_MEAN,
    Method.MI: ImputationMethod.PMM,
    Method.MIMI: ImputationMethod.PMM,
}


@dataclass(frozen=True)
class MethodSpec:
    """Everything needed to fit one strategy."""

    method: Method
    engine: ImputationMethod | None = None
    options: ImputationOptions = field(default_factory=ImputationOptions)
    min_pattern_size: int | None = None
    own_only: bool = False
    retain_training: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.engine is not None:
            object.__setattr__(self, "engine", ImputationMethod(self.engine))

    @property
    def engine_method(self) -> ImputationMethod | None:
        if self.method in (Method.PMKS, Method.CCS):
            return None
        return self.engine or _DEFAULT_ENGINE[self.method]


def fit_method(ds: Dataset, spec: MethodSpec, seed: int = 0, engine: ImputationEngine | None = None):
    """Fit the strategy in ``spec``; ``engine`` reuses an already fitted imputation engine."""
    m = spec.method
    if m is Method.PMKS:
        return fit_pmks(ds, spec.min_pattern_size, spec.retain_training)
    if m is Method.CCS:
        return fit_ccs(ds, spec.retain_training)
    if engine is None:
        engine = fit_engine(ds, spec.engine_method, spec.options, seed)
    if m is Method.COMPLETE_CASE:
        return fit_complete_case(ds, engine)
    if m is Method.MI:
        return fit_mi(ds, engine)
    return fit_mimi(ds, engine, own_only=spec.own_only)


def predict_many(model, x, mask, rng=None) -> np.ndarray:
    return model.predict_rows(x, mask, rng)


def predict_one(model, values, mask_row, rng=None) -> float:
    """Prediction for a single partially observed record."""
    return float(model.predict_rows(np.asarray(values, dtype=float).reshape(1, -1), np.asarray(mask_row).reshape(1, -1), rng)[0])


_MODEL_TYPES = {
    Method.PMKS: PmksModel,
    Method.CCS: CcsModel,
    Method.COMPLETE_CASE: CompleteCaseModel,
    Method.MI: MiModel,
    Method.MIMI: MimiModel,
}


def model_from_dict(d: dict):
    return _MODEL_TYPES[Method(d["method"])].from_dict(d)
