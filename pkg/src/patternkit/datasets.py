"""Bundled synthetic clinical dataset with many missingness patterns.

Ten physiology covariates, five of which are incomplete, spread over 23
distinct patterns. The pattern counts are fixed; covariates are correlated
normals on clinical scales and the response is a linear score plus noise.
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from patternkit.data import Dataset, load_csv
from patternkit.seeding import derive_rng

COLUMNS = ("pafi", "meanbp", "wblc", "alb", "resp", "temp", "hrt", "bili", "crea", "sod")
RESPONSE = "sps"
MEANS = np.array([240.0, 85.0, 12.0, 3.0, 23.0, 37.5, 97.0, 2.5, 1.8, 137.0])
SDS = np.array([110.0, 27.0, 9.0, 0.8, 9.0, 1.2, 31.0, 5.0, 1.7, 6.0])
# response slopes per standardised covariate
SLOPES = np.array([-5.0, -3.0, 2.0, -2.0, 3.0, 1.0, 3.0, 2.0, 4.0, 1.0])
INTERCEPT = 25.0
NOISE_SD = 8.0
CORRELATION = 0.2

# missing-column sets (by name) and their row counts
PATTERN_COUNTS = (
    ((), 1389),
    (("alb",), 330),
    (("bili",), 120),
    (("alb", "bili"), 390),
    (("pafi",), 160),
    (("pafi", "alb"), 150),
    (("pafi", "bili"), 90),
    (("pafi", "alb", "bili"), 260),
    (("wblc",), 12),
    (("wblc", "alb"), 8),
    (("wblc", "bili"), 6),
    (("wblc", "alb", "bili"), 14),
    (("pafi", "wblc"), 10),
    (("pafi", "wblc", "alb"), 9),
    (("pafi", "wblc", "bili"), 5),
    (("pafi", "wblc", "alb", "bili"), 20),
    (("crea",), 6),
    (("alb", "crea"), 4),
    (("bili", "crea"), 3),
    (("alb", "bili", "crea"), 5),
    (("pafi", "alb", "bili", "crea"), 4),
    (("pafi", "crea"), 3),
    (("pafi", "wblc", "alb", "bili", "crea"), 2),
)

DEFAULT_SEED = 9103
BUNDLED = "support_like.csv"


def generate_support_like(seed: int = DEFAULT_SEED) -> Dataset:
    """Draw the dataset; rows are shuffled so patterns are interleaved."""
    rng = derive_rng(seed, 0)
    p = len(COLUMNS)
    n = sum(c for _, c in PATTERN_COUNTS)
    corr = np.full((p, p), CORRELATION) + (1.0 - CORRELATION) * np.eye(p)
    z = rng.standard_normal((n, p)) @ np.linalg.cholesky(corr).T
    x = MEANS + SDS * z
    y = INTERCEPT + z @ SLOPES + NOISE_SD * rng.standard_normal(n)
    mask = np.zeros((n, p), dtype=np.uint8)
    row = 0
    for missing, count in PATTERN_COUNTS:
        for name in missing:
            mask[row : row + count, COLUMNS.index(name)] = 1
        row += count
    order = rng.permutation(n)
    # round to clinical precision so the CSV is compact
    x = np.round(x[order], 3)
    return Dataset(np.round(y[order], 3), x, mask[order], COLUMNS, RESPONSE)


def load_support_like() -> Dataset:
    """The bundled copy of :func:`generate_support_like` with the default seed."""
    path = resources.files("patternkit.resources").joinpath(BUNDLED)
    with resources.as_file(path) as fp:
        return load_csv(fp, RESPONSE)


def shift_outcome(ds: Dataset, column: str = "pafi", shift: float = 25.0) -> Dataset:
    """Add ``shift`` to the response of every row where ``column`` is missing."""
    j = ds.col_names.index(column)
    y = np.where(ds.mask[:, j] == 1, ds.y + shift, ds.y)
    return Dataset(y, ds.x, ds.mask, ds.col_names, ds.response_name)
