import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patternkit.linear import (
    DesignError,
    DesignSpec,
    LinearFit,
    design_matrix,
    fit_design,
    fit_least_squares,
    posterior_draw,
    predict_linear,
)


def normal_equations(d, y):
    return np.linalg.solve(d.T @ d, d.T @ y)


def test_two_point_interpolation():
    fit = fit_least_squares(np.array([[0.0], [1.0]]), [1.0, 3.0], DesignSpec(columns=(0,)))
    assert np.allclose(fit.coefficients, [1.0, 2.0])
    assert fit.rss == pytest.approx(0.0, abs=1e-24)
    assert np.isnan(fit.sigma2)  # n_fit == rank


def test_intercept_only_mean_and_variance():
    fit = fit_least_squares(np.zeros((3, 1)), [2.0, 4.0, 6.0], DesignSpec())
    assert fit.coefficients[0] == pytest.approx(4.0)
    assert fit.sigma2 == pytest.approx(4.0)


def test_duplicated_column_matches_deduplicated_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 2))
    y = rng.normal(size=30)
    dup = fit_least_squares(np.column_stack([x, x[:, 0]]), y, DesignSpec(columns=(0, 1, 2)))
    d = np.column_stack([np.ones(30), x])
    oracle = d @ normal_equations(d, y)
    assert dup.rank == 3
    assert np.max(np.abs(dup.predict(np.column_stack([x, x[:, 0]])) - oracle)) < 1e-8


def test_predict_linear_examples():
    fit = fit_least_squares(np.array([[0.0], [1.0]]), [1.0, 3.0], DesignSpec(columns=(0,)))
    assert predict_linear(fit, [3.0]) == pytest.approx(7.0)
    c = fit_least_squares(np.zeros((4, 1)), [5.0] * 4, DesignSpec())
    assert predict_linear(c, [123.0]) == pytest.approx(5.0)
    with pytest.raises(DesignError):
        predict_linear(fit, [np.nan])


def test_prediction_at_training_row_matches_oracle():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, 3))
    y = x @ [1.0, -2.0, 0.5] + rng.normal(size=20)
    fit = fit_least_squares(x, y, DesignSpec(columns=(0, 1, 2)))
    d = np.column_stack([np.ones(20), x])
    fitted = d @ normal_equations(d, y)
    for i in (0, 7, 19):
        assert predict_linear(fit, x[i]) == pytest.approx(fitted[i], abs=1e-8)


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_oracle_equivalence(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(k + 2, 51))
    d = rng.normal(size=(n, k))
    y = rng.normal(size=n)
    fit = fit_design(d, y)
    oracle = normal_equations(d, y)
    assert np.allclose(fit.coefficients, oracle, rtol=1e-8, atol=1e-8 * np.abs(oracle).max())
    assert fit.sigma2 >= 0


@given(st.integers(0, 2**32 - 1))
def test_fitted_values_invariant_to_affine_augmentation(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(8, 40)), int(rng.integers(1, 5))
    x = rng.normal(size=(n, k))
    y = rng.normal(size=n)
    base = fit_least_squares(x, y, DesignSpec(columns=tuple(range(k))))
    extra = rng.normal(size=(k, 2))
    aug_x = np.column_stack([x, x @ extra + rng.normal(size=2)])
    aug = fit_least_squares(aug_x, y, DesignSpec(columns=tuple(range(k + 2))))
    assert aug.rank == base.rank
    assert np.max(np.abs(aug.predict(aug_x) - base.predict(x))) < 1e-8


@given(st.integers(0, 2**32 - 1))
def test_row_permutation(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(25, 3))
    y = rng.normal(size=25)
    spec = DesignSpec(columns=(0, 1, 2))
    perm = rng.permutation(25)
    a = fit_least_squares(x, y, spec).coefficients
    b = fit_least_squares(x[perm], y[perm], spec).coefficients
    assert np.allclose(a, b, rtol=0, atol=1e-10)


def test_exact_fit_sigma2_zero():
    x = np.arange(10.0).reshape(-1, 1)
    fit = fit_least_squares(x, 2 + 3 * x[:, 0], DesignSpec(columns=(0,)))
    assert abs(fit.sigma2) < 1e-12


def test_gram_inverse_matches_oracle():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 2))
    fit = fit_least_squares(x, rng.normal(size=40), DesignSpec(columns=(0, 1)))
    d = np.column_stack([np.ones(40), x])
    assert np.allclose(fit.gram_inverse, np.linalg.inv(d.T @ d), atol=1e-12)


def test_errors():
    with pytest.raises(DesignError):
        fit_least_squares(np.zeros((0, 1)), [], DesignSpec())
    with pytest.raises(DesignError):
        fit_least_squares(np.zeros((3, 1)), [1.0, 2.0], DesignSpec())
    with pytest.raises(DesignError):
        DesignSpec(columns=(0, 0))


def test_design_terms_and_interactions():
    spec = DesignSpec(columns=(0, 1), indicator_columns=(0,), interactions=((1, 0),))
    assert spec.term_names(["a", "b"]) == ["(Intercept)", "a", "b", "M[a]", "b:M[a]"]
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    mask = np.array([[1, 0], [0, 0]])
    assert design_matrix(spec, x, mask).tolist() == [[1, 1, 2, 1, 2], [1, 3, 4, 0, 0]]


def test_json_round_trip():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(12, 2))
    fit = fit_least_squares(x, rng.normal(size=12), DesignSpec(columns=(0, 1)))
    back = LinearFit.from_dict(json.loads(json.dumps(fit.to_dict())))
    assert np.array_equal(back.coefficients, fit.coefficients)
    assert np.array_equal(back.gram_inverse, fit.gram_inverse)
    assert back.spec == fit.spec and back.sigma2 == fit.sigma2


def test_posterior_draw_moments():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(200, 1))
    fit = fit_least_squares(x, 1 + 2 * x[:, 0] + rng.normal(size=200), DesignSpec(columns=(0,)))
    draws = posterior_draw(fit, np.random.default_rng(1), size=20000)
    assert np.allclose(draws.mean(axis=0), fit.coefficients, atol=4 * np.sqrt(np.diag(fit.gram_inverse)).max())
    # covariance of the marginal t posterior is sigma2 * G * df / (df - 2)
    df = fit.df_resid
    target = fit.sigma2 * fit.gram_inverse * df / (df - 2)
    emp = np.cov(draws.T)
    assert np.allclose(np.diag(emp), np.diag(target), rtol=0.05)
    corr = lambda c: c[0, 1] / np.sqrt(c[0, 0] * c[1, 1])  # noqa: E731
    assert abs(corr(emp) - corr(target)) < 0.03
