"""Prediction with missing covariates via pattern mixture kernel submodels.

The toolkit fits one regression per missingness pattern (PMKS) together with
the usual comparators (complete-case submodels, complete-case analysis,
multiple imputation, and MI with missingness indicators) and ships a Monte
Carlo harness for comparing them under controlled missingness mechanisms.
"""

__version__ = "0.1.0"

from patternkit.data import (
    Dataset,
    PatternIndex,
    load_csv,
    observed_columns,
    partition,
    pattern_of,
    save_csv,
)
from patternkit.linear import DesignSpec, LinearFit, fit_least_squares, predict_linear

__all__ = [
    "Dataset",
    "DesignSpec",
    "LinearFit",
    "PatternIndex",
    "fit_least_squares",
    "load_csv",
    "observed_columns",
    "partition",
    "pattern_of",
    "predict_linear",
    "save_csv",
]
