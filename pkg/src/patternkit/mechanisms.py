"""Synthetic covariates, missingness masks and outcomes.

Masks follow logistic mechanisms ``P(M = 1) = expit(nu0 + score)`` where the
score is zero (MCAR), driven by another covariate (MAR), by the masked
covariate itself (MNAR), or by a standardised composite of the response and a
covariate (MARY / MNARY). ``nu0`` is calibrated numerically so the marginal
missingness matches a target probability.

Outcomes come either from a single marginal regression (selection
formulation) or from the indicator-augmented mean model whose intercept and
slopes shift with the missingness pattern (pattern-mixture formulation).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.optimize import bisect
from scipy.special import expit as _expit

from patternkit.data import Dataset
from patternkit.seeding import derive_rng

CALIBRATION_ROWS = 100_000
CALIBRATION_SEED_OFFSET = 7_919


class MechanismKind(str, Enum):
    MCAR = "MCAR"
    MAR = "MAR"
    MARY = "MARY"
    MNAR = "MNAR"
    MNARY = "MNARY"

    @property
    def uses_y(self) -> bool:
        return self in (MechanismKind.MARY, MechanismKind.MNARY)


class Formulation(str, Enum):
    SELECTION = "selection"
    PATTERN_MIXTURE = "pattern-mixture"


class MechanismError(ValueError):
    pass


@dataclass(frozen=True)
class MechanismSpec:
    """Missingness mechanism for one covariate (``target_column``).

    ``driver_column`` is the covariate behind MAR/MARY; it defaults to the
    other column when p = 2. ``nu0=None`` means not yet calibrated.
    """

    kind: MechanismKind = MechanismKind.MCAR
    target_prob: float = 0.5
    nu0: float | None = None
    nu1: float = 1.0
    nu2: float = 1.0
    nu1y: float = 1.0
    nu2y: float = 1.0
    target_column: int = 0
    driver_column: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MechanismKind(self.kind))
        if not 0.0 < self.target_prob < 1.0:
            raise MechanismError(f"target_prob must lie in (0, 1), got {self.target_prob}")

    def driver(self, p: int) -> int:
        if self.driver_column is not None:
            return self.driver_column
        if p < 2:
            raise MechanismError("MAR mechanisms need a second covariate")
        return 1 if self.target_column == 0 else 0


@dataclass(frozen=True)
class GenConfig:
    """Data-generating process.

    ``delta_indicator[k]`` multiplies ``M_k`` and ``delta_interaction[j][k]``
    multiplies ``x_j * M_k`` in the pattern-mixture outcome.
    """

    n: int = 1000
    mu: tuple = (3.0, 3.0)
    sigma: tuple = ((1.0, 0.5), (0.5, 1.0))
    beta: tuple = (1.0, 3.0, 1.0)
    delta_indicator: tuple | None = None
    delta_interaction: tuple | None = None
    noise_sd: float = 1.0
    formulation: Formulation = Formulation.SELECTION
    col_names: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "formulation", Formulation(self.formulation))
        p = len(self.mu)
        if np.shape(self.sigma) != (p, p):
            raise MechanismError(f"sigma must be {p}x{p}")
        if len(self.beta) != p + 1:
            raise MechanismError(f"beta must have p + 1 = {p + 1} entries")

    @property
    def p(self) -> int:
        return len(self.mu)

    @property
    def delta_m(self) -> np.ndarray:
        if self.delta_indicator is None:
            return np.zeros(self.p)
        return np.asarray(self.delta_indicator, dtype=float)

    @property
    def delta_xm(self) -> np.ndarray:
        if self.delta_interaction is None:
            return np.zeros((self.p, self.p))
        return np.asarray(self.delta_interaction, dtype=float).reshape(self.p, self.p)

    @property
    def names(self) -> tuple:
        return tuple(self.col_names) if self.col_names else tuple(f"x{j + 1}" for j in range(self.p))


def mixture_deltas(d1=0.0, d2=0.0, d3=0.0, d4=0.0, d5=0.0, d6=0.0):
    """Map the six two-covariate auxiliary parameters to ``(indicator, interaction)``.

    Order: M1, M2, X1*M1, X2*M2, X1*M2, X2*M1.
    """
    return (d1, d2), ((d3, d5), (d6, d4))


def expit(u):
    """Logistic function, overflow-free for large ``|u|``."""
    return _expit(u)


def gen_predictors(cfg: GenConfig, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """i.i.d. rows from ``N(mu, sigma)`` via the Cholesky factor."""
    n = cfg.n if n is None else n
    sigma = np.asarray(cfg.sigma, dtype=float)
    if not np.allclose(sigma, sigma.T):
        raise MechanismError("sigma is not symmetric")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise MechanismError("sigma is not positive definite") from None
    z = rng.standard_normal((n, cfg.p))
    return np.asarray(cfg.mu, dtype=float) + z @ chol.T


def _composite(y, xcol):
    sd_y = np.std(y, ddof=1)
    r = np.corrcoef(y, xcol)[0, 1]
    return (y / sd_y + xcol) / np.sqrt(2.0 * (1.0 + r))


def mechanism_score(spec: MechanismSpec, x, y=None) -> np.ndarray:
    """Linear score added to ``nu0`` inside the expit."""
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    kind = spec.kind
    if kind.uses_y and y is None:
        raise MechanismError(f"{kind.value} needs the response")
    if kind is MechanismKind.MCAR:
        return np.zeros(n)
    if kind is MechanismKind.MAR:
        return spec.nu2 * x[:, spec.driver(p)]
    if kind is MechanismKind.MNAR:
        return spec.nu1 * x[:, spec.target_column]
    y = np.asarray(y, dtype=float)
    if kind is MechanismKind.MARY:
        return spec.nu2y * _composite(y, x[:, spec.driver(p)])
    return spec.nu1y * _composite(y, x[:, spec.target_column])


def calibrate_nu0(spec: MechanismSpec, x, y=None, tol: float = 1e-3) -> float:
    """Intercept giving mean missingness probability ``spec.target_prob`` on ``x``.

    Bisection on [-50, 50]; the mean of the expit is monotone in ``nu0``.
    """
    score = mechanism_score(spec, x, y)

    def gap(nu0):
        return float(np.mean(expit(nu0 + score))) - spec.target_prob

    lo, hi = -50.0, 50.0
    if gap(lo) > 0 or gap(hi) < 0:
        raise MechanismError("calibration bracket [-50, 50] does not contain the root")
    nu0 = bisect(gap, lo, hi, xtol=1e-12, maxiter=200)
    if abs(gap(nu0)) > tol:
        raise MechanismError(f"calibration missed target by {gap(nu0):.3g}")
    return float(nu0)


def calibration_sample(cfg: GenConfig, seed: int, rows: int = CALIBRATION_ROWS):
    """Large covariate/outcome sample used only to calibrate ``nu0``."""
    rng = derive_rng(seed, CALIBRATION_SEED_OFFSET)
    x = gen_predictors(cfg, rng, rows)
    y = gen_outcome_selection(x, cfg, rng)
    return x, y


def calibrated(spec: MechanismSpec, cfg: GenConfig, seed: int, rows: int = CALIBRATION_ROWS) -> MechanismSpec:
    x, y = calibration_sample(cfg, seed, rows)
    return replace(spec, nu0=calibrate_nu0(spec, x, y))


def gen_missingness(spec: MechanismSpec, x, y=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Bernoulli mask for ``spec.target_column``; composites use sample moments."""
    if spec.nu0 is None:
        raise MechanismError("nu0 is not calibrated")
    prob = expit(spec.nu0 + mechanism_score(spec, x, y))
    return (rng.random(prob.shape[0]) < prob).astype(np.uint8)


def gen_outcome_selection(x, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    beta = np.asarray(cfg.beta, dtype=float)
    mean = beta[0] + x @ beta[1:]
    return mean + cfg.noise_sd * rng.standard_normal(x.shape[0])


def pattern_mixture_mean(x, mask, cfg: GenConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m = np.asarray(mask, dtype=float)
    beta = np.asarray(cfg.beta, dtype=float)
    mean = beta[0] + x @ beta[1:] + m @ cfg.delta_m
    # sum_jk delta[j, k] x_j M_k
    mean += np.einsum("ij,jk,ik->i", x, cfg.delta_xm, m)
    return mean


def gen_outcome_pattern_mixture(x, mask, cfg: GenConfig, rng: np.random.Generator, kind=None) -> np.ndarray:
    """Outcome from the indicator-augmented mean at the true covariates."""
    if kind is not None and MechanismKind(kind).uses_y:
        raise MechanismError(f"{MechanismKind(kind).value} can only be generated under the selection formulation")
    mean = pattern_mixture_mean(x, mask, cfg)
    return mean + cfg.noise_sd * rng.standard_normal(mean.shape[0])


def cond_draw_x2_given_x1(x1, mu, sigma1, sigma2, rho, rng: np.random.Generator, size=None):
    """Draw from ``X2 | X1 = x1`` for a bivariate normal with means ``mu``."""
    mean = mu[1] + (sigma2 / sigma1) * rho * (np.asarray(x1, dtype=float) - mu[0])
    sd = np.sqrt(1.0 - rho**2) * sigma2
    return mean + sd * rng.standard_normal(size if size is not None else np.shape(mean))


@dataclass(frozen=True)
class Replicate:
    """One simulated dataset plus the covariates before masking."""

    data: Dataset
    x_true: np.ndarray = field(repr=False)


def generate(cfg: GenConfig, mechanisms, rng: np.random.Generator, n: int | None = None) -> Replicate:
    """Covariates, masks (one per calibrated mechanism) and outcome.

    Selection formulation draws ``y`` before the masks; pattern-mixture draws
    the masks first and evaluates the augmented mean at the true covariates.
    """
    if isinstance(mechanisms, MechanismSpec):
        mechanisms = [mechanisms]
    n = cfg.n if n is None else n
    x = gen_predictors(cfg, rng, n)
    mask = np.zeros(x.shape, dtype=np.uint8)
    if cfg.formulation is Formulation.SELECTION:
        y = gen_outcome_selection(x, cfg, rng)
        for mech in mechanisms:
            mask[:, mech.target_column] |= gen_missingness(mech, x, y, rng)
    else:
        for mech in mechanisms:
            if mech.kind.uses_y:
                raise MechanismError(f"{mech.kind.value} can only be generated under the selection formulation")
            mask[:, mech.target_column] |= gen_missingness(mech, x, None, rng)
        y = gen_outcome_pattern_mixture(x, mask, cfg, rng)
    return Replicate(Dataset(y, x, mask, cfg.names), x)
