"""Minimum-norm least squares on explicit design specifications.

Every predictor in the toolkit reduces to ordinary least squares on some
design built from covariates, missingness indicators and their products.
Designs from the indicator-augmented model are collinear by construction, so
the solver is SVD based and returns the minimum-norm solution; fitted values
do not depend on how the collinearity is resolved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RANK_RTOL = 1e-10


class DesignError(ValueError):
    pass


@dataclass(frozen=True)
class DesignSpec:
    """Terms of a linear predictor.

    Term order is intercept, covariate columns, indicator columns, then
    covariate-by-indicator interactions ``(j, k)`` meaning ``x_j * M_k``.
    """

    intercept: bool = True
    columns: tuple[int, ...] = ()
    indicator_columns: tuple[int, ...] = ()
    interactions: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))
        object.__setattr__(self, "indicator_columns", tuple(int(c) for c in self.indicator_columns))
        object.__setattr__(self, "interactions", tuple((int(j), int(k)) for j, k in self.interactions))
        for name, seq in (
            ("columns", self.columns),
            ("indicator_columns", self.indicator_columns),
            ("interactions", self.interactions),
        ):
            if len(set(seq)) != len(seq):
                raise DesignError(f"duplicate entries in {name}")

    @property
    def n_terms(self) -> int:
        return int(self.intercept) + len(self.columns) + len(self.indicator_columns) + len(self.interactions)

    def required_columns(self) -> tuple[int, ...]:
        """Covariates whose values must be defined to evaluate the design."""
        cols = set(self.columns) | {j for j, _ in self.interactions}
        return tuple(sorted(cols))

    def term_names(self, col_names=None) -> list[str]:
        def nm(j):
            return col_names[j] if col_names is not None else f"x{j + 1}"

        names = ["(Intercept)"] if self.intercept else []
        names += [nm(j) for j in self.columns]
        names += [f"M[{nm(k)}]" for k in self.indicator_columns]
        names += [f"{nm(j)}:M[{nm(k)}]" for j, k in self.interactions]
        return names

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "columns": list(self.columns),
            "indicator_columns": list(self.indicator_columns),
            "interactions": [list(t) for t in self.interactions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DesignSpec":
        return cls(
            intercept=bool(d["intercept"]),
            columns=tuple(d["columns"]),
            indicator_columns=tuple(d.get("indicator_columns", ())),
            interactions=tuple(tuple(t) for t in d.get("interactions", ())),
        )


def design_matrix(spec: DesignSpec, x, mask=None) -> np.ndarray:
    """Expand covariate rows into the design of ``spec``.

    ``x`` may contain NaN in columns the spec does not reference. Indicator
    terms read ``mask`` (default: NaN cells of ``x``).
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    n = x.shape[0]
    if mask is None:
        mask = np.isnan(x)
    mask = np.asarray(mask, dtype=float)
    if mask.ndim == 1:
        mask = mask.reshape(1, -1)
    req = spec.required_columns()
    if req:
        if max(req) >= x.shape[1]:
            raise DesignError(f"record has {x.shape[1]} columns, design references column {max(req)}")
        bad = np.isnan(x[:, list(req)])
        if bad.any():
            i, jj = np.argwhere(bad)[0]
            raise DesignError(f"row {i}: required column {req[jj]} is missing")
    parts = []
    if spec.intercept:
        parts.append(np.ones((n, 1)))
    if spec.columns:
        parts.append(x[:, list(spec.columns)])
    if spec.indicator_columns:
        parts.append(mask[:, list(spec.indicator_columns)])
    if spec.interactions:
        j = [t[0] for t in spec.interactions]
        k = [t[1] for t in spec.interactions]
        parts.append(x[:, j] * mask[:, k])
    if not parts:
        return np.zeros((n, 0))
    return np.hstack(parts)


@dataclass(frozen=True, eq=False)
class LinearFit:
    """Least-squares fit.

    ``gram_inverse`` is the Moore-Penrose inverse of ``D'D`` for the fitted
    design ``D``. ``sigma2`` is ``RSS / (n_fit - rank)`` and NaN when
    ``n_fit <= rank``.
    """

    coefficients: np.ndarray
    rank: int
    sigma2: float
    gram_inverse: np.ndarray
    n_fit: int
    rss: float
    spec: DesignSpec = field(default_factory=DesignSpec)

    @property
    def df_resid(self) -> int:
        return self.n_fit - self.rank

    def predict(self, x, mask=None) -> np.ndarray:
        return design_matrix(self.spec, x, mask) @ self.coefficients

    def to_dict(self, col_names=None) -> dict:
        return {
            "terms": self.spec.term_names(col_names),
            "spec": self.spec.to_dict(),
            "coefficients": [float(c) for c in self.coefficients],
            "rank": int(self.rank),
            "sigma2": None if not np.isfinite(self.sigma2) else float(self.sigma2),
            "rss": float(self.rss),
            "n_fit": int(self.n_fit),
            "gram_inverse": np.asarray(self.gram_inverse).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearFit":
        spec = DesignSpec.from_dict(d["spec"])
        coef = np.asarray(d["coefficients"], dtype=float)
        g = np.asarray(d.get("gram_inverse", []), dtype=float).reshape(coef.size, coef.size)
        s2 = d.get("sigma2")
        return cls(
            coefficients=coef,
            rank=int(d["rank"]),
            sigma2=float("nan") if s2 is None else float(s2),
            gram_inverse=g,
            n_fit=int(d["n_fit"]),
            rss=float(d.get("rss", float("nan"))),
            spec=spec,
        )


def solve_min_norm(design, y, rtol: float = RANK_RTOL):
    """SVD least squares. Returns ``(coef, rank, gram_pinv, rss)``."""
    d = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if d.shape[0] == 0:
        raise DesignError("cannot fit a model on zero rows")
    if d.shape[0] != y.shape[0]:
        raise DesignError(f"design has {d.shape[0]} rows, response has {y.shape[0]}")
    k = d.shape[1]
    if k == 0:
        return np.zeros(0), 0, np.zeros((0, 0)), float(y @ y)
    u, s, vt = np.linalg.svd(d, full_matrices=False)
    rank = int(np.sum(s > rtol * s[0])) if s.size and s[0] > 0 else 0
    u, s, vt = u[:, :rank], s[:rank], vt[:rank]
    coef = vt.T @ ((u.T @ y) / s)
    resid = y - d @ coef
    gram = (vt.T / s**2) @ vt
    return coef, rank, gram, float(resid @ resid)


def fit_design(design, y, spec: DesignSpec | None = None) -> LinearFit:
    coef, rank, gram, rss = solve_min_norm(design, y)
    n = np.asarray(design).shape[0]
    sigma2 = rss / (n - rank) if n > rank else float("nan")
    if spec is None:
        spec = DesignSpec(intercept=False, columns=tuple(range(np.asarray(design).shape[1])))
    return LinearFit(coef, rank, max(sigma2, 0.0) if np.isfinite(sigma2) else sigma2, gram, n, rss, spec)


def fit_least_squares(rows, y, spec: DesignSpec, mask=None) -> LinearFit:
    """Fit ``spec`` to covariate ``rows`` and response ``y``.

    Returns the minimum-norm solution; rank uses a relative singular value
    tolerance of 1e-10.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.ndim == 1:
        rows = rows.reshape(-1, 1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if rows.shape[0] == 0:
        raise DesignError("cannot fit a model on zero rows")
    if rows.shape[0] != y.shape[0]:
        raise DesignError(f"{rows.shape[0]} covariate rows but {y.shape[0]} responses")
    return fit_design(design_matrix(spec, rows, mask), y, spec)


def predict_linear(fit: LinearFit, record, spec: DesignSpec | None = None, mask_row=None) -> float:
    """Prediction for a single record (full-width covariate vector)."""
    spec = fit.spec if spec is None else spec
    d = design_matrix(spec, np.asarray(record, dtype=float).reshape(1, -1), mask_row)
    return float(d[0] @ fit.coefficients)


def posterior_draw(fit: LinearFit, rng: np.random.Generator, size: int | None = None):
    """Draws from the noninformative-prior posterior of a linear fit.

    ``sigma*^2 = RSS / chi2(df)`` and ``beta* ~ N(beta_hat, sigma*^2 (D'D)^+)``.
    Returns an array of shape ``(size, n_terms)`` (or ``(n_terms,)``).
    """
    df = max(fit.df_resid, 1)
    n_draw = 1 if size is None else size
    sig2 = fit.rss / rng.chisquare(df, size=n_draw)
    w, v = np.linalg.eigh(fit.gram_inverse)
    w = np.clip(w, 0.0, None)
    root = v * np.sqrt(w)
    z = rng.standard_normal((n_draw, fit.coefficients.size))
    draws = fit.coefficients + np.sqrt(sig2)[:, None] * (z @ root.T)
    return draws[0] if size is None else draws
