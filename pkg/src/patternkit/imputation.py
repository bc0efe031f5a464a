"""Frozen imputation engines.

An engine is fit once on the training data and then applied, unchanged, to
new records. Five methods are available:

``zero``
    fill with 0.
``uncond-mean``
    fill with the observed column mean.
``cond-mean``
    fill with the prediction of a regression of the missing column on exactly
    the columns observed in the record's pattern.
``cond-mean-bayes``
    as ``cond-mean`` but the regression coefficients are a posterior draw.
``pmm``
    multiple imputation by chained equations with predictive mean matching.

Every engine also stores the observed column means, which serve as the
fallback when a pattern has no conditional model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from patternkit.data import Dataset, missing_columns, observed_columns, partition_mask, pattern_ids
from patternkit.linear import (
    DesignSpec,
    LinearFit,
    design_matrix,
    fit_least_squares,
    posterior_draw,
    solve_min_norm,
)
from patternkit.seeding import as_rng, derive_rng



class ImputationError(ValueError):
    pass


class ImputationFallbackWarning(UserWarning):
    pass


class ImputationMethod(str, Enum):
    ZERO = "zero"
    UNCOND_MEAN = "uncond-mean"
    COND_MEAN = "cond-mean"
    COND_MEAN_BAYES = "cond-mean-bayes"
    PMM = "pmm"

    @property
    def deterministic(self) -> bool:
        return self in (ImputationMethod.ZERO, ImputationMethod.UNCOND_MEAN, ImputationMethod.COND_MEAN)


@dataclass(frozen=True)
class ImputationOptions:
    m: int = 10
    k_donors: int = 5
    cycles: int = 10
    include_y: bool = False
    mode: str = "frozen"

    def __post_init__(self):
        if self.m < 1:
            raise ImputationError("m must be at least 1")
        if self.k_donors < 1:
            raise ImputationError("k_donors must be at least 1")
        if self.cycles < 1:
            raise ImputationError("cycles must be at least 1")
        if self.mode not in ("frozen", "refit"):
            raise ImputationError(f"unknown imputation mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "k_donors": self.k_donors,
            "cycles": self.cycles,
            "include_y": self.include_y,
            "mode": self.mode,
        }


@dataclass(frozen=True)
class CompletedData:
    """``m`` completed covariate matrices (``m = 1`` for deterministic engines)."""

    datasets: tuple

    @property
    def m(self) -> int:
        return len(self.datasets)

    def stacked(self) -> np.ndarray:
        return np.stack(self.datasets)

    def mean(self) -> np.ndarray:
        return self.stacked().mean(axis=0)


@dataclass(frozen=True, eq=False)
class PmmColumnModel:
    """Chained-equation model for one column of one completion.

    ``predictors`` index the working matrix (covariates, then the response
    when it takes part in the chain). Donors are sorted by predicted mean.
    """

    predictors: tuple
    beta_hat: np.ndarray
    beta_star: np.ndarray
    donor_values: np.ndarray
    donor_preds: np.ndarray

    def to_dict(self) -> dict:
        return {
            "predictors": list(self.predictors),
            "beta_hat": self.beta_hat.tolist(),
            "beta_star": self.beta_star.tolist(),
            "donor_values": self.donor_values.tolist(),
            "donor_preds": self.donor_preds.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "PmmColumnModel":
        return cls(
            tuple(d["predictors"]),
            np.asarray(d["beta_hat"], dtype=float),
            np.asarray(d["beta_star"], dtype=float),
            np.asarray(d["donor_values"], dtype=float),
            np.asarray(d["donor_preds"], dtype=float),
        )


@dataclass(eq=False)
class ImputationEngine:
    method: ImputationMethod
    p: int
    options: ImputationOptions
    seed: int
    column_means: np.ndarray
    cond_models: dict = field(default_factory=dict)
    pmm_models: list = field(default_factory=list)
    visit_order: tuple = ()
    col_names: tuple = ()
    # training completions for PMM, keyed by a fingerprint of the training data
    _training: tuple | None = field(default=None, repr=False)

    @property
    def m(self) -> int:
        return self.options.m if self.method is ImputationMethod.PMM else 1

    @property
    def n_chain_columns(self) -> int:
        return self.p + int(self.options.include_y)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "p": self.p,
            "col_names": list(self.col_names),
            "options": self.options.to_dict(),
            "seed": self.seed,
            "column_means": self.column_means.tolist(),
            "cond_models": [
                {"target": t, "pattern": pid, "fit": fit.to_dict()} for (t, pid), fit in sorted(self.cond_models.items())
            ],
            "pmm_models": [{str(c): mdl.to_dict() for c, mdl in sorted(comp.items())} for comp in self.pmm_models],
            "visit_order": list(self.visit_order),
        }

    @classmethod
    def from_dict(cls, d) -> "ImputationEngine":
        return cls(
            method=ImputationMethod(d["method"]),
            p=int(d["p"]),
            options=ImputationOptions(**d["options"]),
            seed=int(d["seed"]),
            column_means=np.asarray(d["column_means"], dtype=float),
            cond_models={(int(e["target"]), int(e["pattern"])): LinearFit.from_dict(e["fit"]) for e in d["cond_models"]},
            pmm_models=[{int(c): PmmColumnModel.from_dict(v) for c, v in comp.items()} for comp in d["pmm_models"]],
            visit_order=tuple(d["visit_order"]),
            col_names=tuple(d.get("col_names", ())),
        )


def _fingerprint(x, mask, y) -> tuple:
    return (x.shape, hash(np.nan_to_num(x, nan=0.0).tobytes()), hash(mask.tobytes()), hash(np.asarray(y).tobytes()))


# -- fitting ----------------------------------------------------------------


def fit_engine(ds: Dataset, method, options: ImputationOptions | None = None, seed: int = 0) -> ImputationEngine:
    """Fit an imputation engine on the training data ``ds``."""
    method = ImputationMethod(method)
    options = options or ImputationOptions()
    p = ds.p
    observed_any = (ds.mask == 0).any(axis=0)
    means = np.zeros(p)
    for j in range(p):
        if observed_any[j]:
            means[j] = float(np.mean(ds.x[ds.mask[:, j] == 0, j]))
        elif ds.mask[:, j].any() and method is not ImputationMethod.ZERO:
            raise ImputationError(f"column {ds.col_names[j]!r} is missing on every row")
    engine = ImputationEngine(method, p, options, int(seed), means, col_names=ds.col_names)
    if method in (ImputationMethod.COND_MEAN, ImputationMethod.COND_MEAN_BAYES):
        engine.cond_models = _fit_cond_models(ds)
    elif method is ImputationMethod.PMM:
        _fit_pmm(engine, ds)
    return engine


def _fit_cond_models(ds: Dataset, patterns=None) -> dict:
    models = {}
    if patterns is None:
        patterns = [pid for pid in partition_mask(ds.mask) if pid]
    for pid in patterns:
        obs = list(observed_columns(pid, ds.p))
        need_obs = ds.mask[:, obs].sum(axis=1) == 0 if obs else np.ones(ds.n, dtype=bool)
        spec = DesignSpec(intercept=True, columns=tuple(obs))
        for t in missing_columns(pid, ds.p):
            rows = need_obs & (ds.mask[:, t] == 0)
            if rows.sum() < 2:
                warnings.warn(
                    f"no conditional model for column {ds.col_names[t]!r} in pattern {pid}: "
                    f"{int(rows.sum())} usable training rows",
                    ImputationFallbackWarning,
                    stacklevel=3,
                )
                continue
            models[(t, pid)] = fit_least_squares(ds.x[rows], ds.x[rows, t], spec)
    return models


def _chain_matrix(ds: Dataset, include_y: bool):
    if include_y:
        z = np.column_stack([ds.x, ds.y])
        zmask = np.column_stack([ds.mask, np.zeros(ds.n, dtype=np.uint8)])
    else:
        z = np.array(ds.x, dtype=float)
        zmask = np.array(ds.mask)
    return z, zmask


def _fit_pmm(engine: ImputationEngine, ds: Dataset) -> None:
    opts = engine.options
    if opts.m < 2:
        raise ImputationError("predictive mean matching needs m >= 2")
    z, zmask = _chain_matrix(ds, opts.include_y)
    counts = zmask.sum(axis=0)
    for c in np.flatnonzero(counts):
        n_obs = ds.n - counts[c]
        if n_obs < opts.k_donors:
            raise ImputationError(
                f"column {c} has {n_obs} observed values, fewer than k_donors={opts.k_donors}"
            )
    order = tuple(int(c) for c in sorted(range(z.shape[1]), key=lambda c: (counts[c], c)))
    engine.visit_order = order
    completions = []
    for j in range(opts.m):
        rng = derive_rng(engine.seed, j)
        zc = run_chain(z, zmask, order, opts, rng)
        engine.pmm_models.append(_final_models(zc, zmask, rng))
        completions.append(zc[:, : ds.p].copy())
    engine._training = (_fingerprint(ds.x, ds.mask, ds.y), tuple(completions))


def pmm_match(donor_preds, donor_values, target_preds, k: int, rng: np.random.Generator) -> np.ndarray:
    """For each target, draw one of the ``k`` donors closest in predicted mean.

    ``donor_preds`` must be sorted ascending, ``donor_values`` aligned with it.
    """
    donor_preds = np.asarray(donor_preds, dtype=float)
    donor_values = np.asarray(donor_values, dtype=float)
    target_preds = np.asarray(target_preds, dtype=float).reshape(-1)
    d = donor_preds.size
    t = target_preds.size
    if d == 0:
        raise ImputationError("empty donor pool")
    if t == 0:
        return np.zeros(0)
    k = min(k, d)
    if d <= 2 * k:
        idx = np.broadcast_to(np.arange(d), (t, d))
    else:
        pos = np.searchsorted(donor_preds, target_preds)
        start = np.clip(pos - k, 0, d - 2 * k)
        idx = start[:, None] + np.arange(2 * k)
    dist = np.abs(donor_preds[idx] - target_preds[:, None])
    nearest = np.take_along_axis(idx, np.argsort(dist, axis=1, kind="stable")[:, :k], axis=1)
    pick = rng.integers(0, k, size=t)
    return donor_values[nearest[np.arange(t), pick]]


def _column_fit(zc, obs_rows, c):
    preds = tuple(i for i in range(zc.shape[1]) if i != c)
    design = np.column_stack([np.ones(zc.shape[0]), zc[:, preds]])
    coef, rank, gram, rss = solve_min_norm(design[obs_rows], zc[obs_rows, c])
    n_obs = int(obs_rows.sum())
    fit = LinearFit(coef, rank, rss / max(n_obs - rank, 1), gram, n_obs, rss)
    return preds, design, fit


def run_chain(z, zmask, order, opts: ImputationOptions, rng: np.random.Generator) -> np.ndarray:
    """One chained-equations completion of ``z`` (cells with ``zmask == 1`` imputed)."""
    zc = np.array(z, dtype=float)
    incomplete = [c for c in order if zmask[:, c].any()]
    for c in incomplete:
        miss = zmask[:, c] == 1
        pool = zc[~miss, c]
        zc[miss, c] = pool[rng.integers(0, pool.size, size=int(miss.sum()))]
    cycles = opts.cycles if len(incomplete) > 1 else 1
    for _ in range(cycles):
        for c in incomplete:
            miss = zmask[:, c] == 1
            _, design, fit = _column_fit(zc, ~miss, c)
            beta_star = posterior_draw(fit, rng)
            donor_pred = design[~miss] @ fit.coefficients
            order_d = np.argsort(donor_pred, kind="stable")
            zc[miss, c] = pmm_match(
                donor_pred[order_d], zc[~miss, c][order_d], design[miss] @ beta_star, opts.k_donors, rng
            )
    return zc


def _final_models(zc, zmask, rng) -> dict:
    models = {}
    for c in range(zc.shape[1]):
        obs = zmask[:, c] == 0
        if obs.sum() == 0:
            continue
        preds, design, fit = _column_fit(zc, obs, c)
        beta_star = posterior_draw(fit, rng)
        donor_pred = design[obs] @ fit.coefficients
        o = np.argsort(donor_pred, kind="stable")
        models[c] = PmmColumnModel(preds, fit.coefficients, beta_star, zc[obs, c][o], donor_pred[o])
    return models


# -- application ------------------------------------------------------------


def impute_rows(engine: ImputationEngine, x, mask, rng=None, y=None) -> np.ndarray:
    """Impute a block of records with the frozen engine.

    Returns an array of shape ``(m, n, p)``. Records are independent of one
    another, so this is the vectorised form of one-by-one imputation. ``y`` is
    used by a response-aware PMM engine only when supplied; otherwise the
    response is treated as unknown and imputed inside the chain.
    """
    rng = as_rng(rng if rng is not None else derive_rng(engine.seed, 1_000_003))
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    mask = np.asarray(mask, dtype=np.uint8).reshape(x.shape)
    if x.shape[1] != engine.p:
        raise ImputationError(f"record has {x.shape[1]} columns, engine expects {engine.p}")
    x = np.where(mask == 1, np.nan, x)
    method = engine.method
    if method is ImputationMethod.PMM:
        return _impute_pmm(engine, x, mask, rng, y)
    out = x.copy()
    if method is ImputationMethod.ZERO:
        out[mask == 1] = 0.0
    elif method is ImputationMethod.UNCOND_MEAN:
        out = np.where(mask == 1, engine.column_means, out)
    else:
        ids = pattern_ids(mask) if x.shape[0] else np.zeros(0, dtype=np.int64)
        for pid in np.unique(ids):
            pid = int(pid)
            if pid == 0:
                continue
            rows = np.flatnonzero(ids == pid)
            for t in missing_columns(pid, engine.p):
                fit = engine.cond_models.get((t, pid))
                if fit is None:
                    warnings.warn(
                        f"pattern {pid} has no conditional model for column {t}; using the unconditional mean",
                        ImputationFallbackWarning,
                        stacklevel=2,
                    )
                    out[rows, t] = engine.column_means[t]
                    continue
                if method is ImputationMethod.COND_MEAN:
                    out[rows, t] = fit.predict(x[rows])
                else:
                    betas = posterior_draw(fit, rng, size=rows.size)
                    design = design_matrix(fit.spec, x[rows])
                    out[rows, t] = np.einsum("ij,ij->i", design, betas)
    return out[None]


def _impute_pmm(engine: ImputationEngine, x, mask, rng, y):
    opts = engine.options
    n, p = x.shape
    if opts.include_y:
        if y is None:
            z = np.column_stack([x, np.full(n, np.nan)])
            zmask = np.column_stack([mask, (mask.any(axis=1)).astype(np.uint8)])
        else:
            z = np.column_stack([x, np.asarray(y, dtype=float)])
            zmask = np.column_stack([mask, np.zeros(n, dtype=np.uint8)])
    else:
        z, zmask = x.copy(), mask
    out = np.empty((engine.m, n, p))
    order = [c for c in engine.visit_order if zmask[:, c].any()]
    multi = zmask.sum(axis=1).max(initial=0) > 1
    cycles = opts.cycles if multi else 1
    for j in range(engine.m):
        models = engine.pmm_models[j]
        zc = z.copy()
        for c in order:
            if c not in models:
                raise ImputationError(f"engine has no model for column {c}")
            miss = zmask[:, c] == 1
            pool = models[c].donor_values
            zc[miss, c] = pool[rng.integers(0, pool.size, size=int(miss.sum()))]
        for _ in range(cycles):
            for c in order:
                mdl = models[c]
                miss = zmask[:, c] == 1
                design = np.column_stack([np.ones(int(miss.sum())), zc[miss][:, list(mdl.predictors)]])
                zc[miss, c] = pmm_match(mdl.donor_preds, mdl.donor_values, design @ mdl.beta_star, opts.k_donors, rng)
        out[j] = zc[:, :p]
    return out


def impute_record(engine: ImputationEngine, values, mask_row, rng=None) -> CompletedData:
    """Impute one out-of-sample record; observed cells pass through unchanged."""
    arr = impute_rows(engine, np.asarray(values, dtype=float).reshape(1, -1), np.asarray(mask_row).reshape(1, -1), rng)
    return CompletedData(tuple(a for a in arr))


def impute_dataset(engine: ImputationEngine, ds: Dataset, rng=None) -> CompletedData:
    """Complete ``ds``.

    On the engine's own training data a PMM engine returns the completions
    produced by its chained-equations run; any other data is imputed record
    by record with the frozen engine, treating the response as unknown.
    """
    if engine.method is ImputationMethod.PMM and engine._training is not None:
        key, completions = engine._training
        if key == _fingerprint(ds.x, ds.mask, ds.y):
            return CompletedData(tuple(c.copy() for c in completions))
    arr = impute_rows(engine, ds.x, ds.mask, rng)
    return CompletedData(tuple(a for a in arr))


def refit_mi_with_record(
    train: Dataset, values, mask_row, options: ImputationOptions | None = None, seed: int = 0
) -> CompletedData:
    """Re-run the full chained PMM with the new record appended.

    The new record's response is unknown; when the chain includes the
    response it is imputed alongside the missing covariates. Returns the
    ``m`` completions of the new record.
    """
    options = options or ImputationOptions()
    values = np.asarray(values, dtype=float).reshape(1, -1)
    mask_row = np.asarray(mask_row, dtype=np.uint8).reshape(1, -1)
    z, zmask = _chain_matrix(train, options.include_y)
    new_x = np.where(mask_row == 1, np.nan, values)
    if options.include_y:
        new_z = np.column_stack([new_x, [[np.nan]]])
        new_m = np.column_stack([mask_row, [[1]]])
    else:
        new_z, new_m = new_x, mask_row
    z = np.vstack([z, new_z])
    zmask = np.vstack([zmask, new_m]).astype(np.uint8)
    counts = zmask.sum(axis=0)
    for c in np.flatnonzero(counts):
        if z.shape[0] - counts[c] < options.k_donors:
            raise ImputationError(f"column {c} has fewer than k_donors observed values")
    order = sorted(range(z.shape[1]), key=lambda c: (counts[c], c))
    out = []
    for j in range(options.m):
        zc = run_chain(z, zmask, order, options, derive_rng(seed, j))
        out.append(zc[-1:, : train.p].copy())
    return CompletedData(tuple(out))


def imputation_error(true_col, completions, mask_col) -> float:
    """Mean over all rows of the squared error of the (completion-averaged) imputation.

    ``completions`` holds the imputed column, shape ``(m, n)`` or ``(n,)``.
    Observed cells contribute zero.
    """
    true_col = np.asarray(true_col, dtype=float).reshape(-1)
    imp = np.asarray(completions, dtype=float)
    if imp.ndim == 2:
        imp = imp.mean(axis=0)
    mask_col = np.asarray(mask_col).reshape(-1).astype(bool)
    if not (true_col.size == imp.size == mask_col.size):
        raise ImputationError("true values, imputations and mask must have equal length")
    if true_col.size == 0:
        return 0.0
    err = np.where(mask_col, true_col - np.where(mask_col, imp, 0.0), 0.0)
    return float(np.mean(err**2))
