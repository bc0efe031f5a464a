import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from patternkit.linear import DesignSpec, fit_least_squares
from patternkit.mechanisms import (
    Formulation,
    GenConfig,
    MechanismError,
    MechanismKind,
    MechanismSpec,
    calibrate_nu0,
    calibrated,
    cond_draw_x2_given_x1,
    mixture_deltas,
    expit,
    gen_missingness,
    gen_outcome_pattern_mixture,
    gen_outcome_selection,
    gen_predictors,
    generate,
    pattern_mixture_mean,
)

DEFAULT = GenConfig()


def rng(seed=0):
    return np.random.default_rng(seed)


def test_standard_normal_predictors():
    cfg = GenConfig(mu=(0.0, 0.0), sigma=((1.0, 0.0), (0.0, 1.0)))
    x = gen_predictors(cfg, rng(), 20_000)
    assert np.all(np.abs(x.mean(axis=0)) < 3 / np.sqrt(20_000))


def test_default_profile_correlation():
    n = 100_000
    x = gen_predictors(DEFAULT, rng(1), n)
    r = np.corrcoef(x.T)[0, 1]
    se = (1 - 0.25) / np.sqrt(n)
    assert abs(r - 0.5) < 3 * se
    assert np.allclose(x.mean(axis=0), 3.0, atol=3 * np.sqrt(1 / n))


def test_empty_and_invalid_predictors():
    assert gen_predictors(DEFAULT, rng(), 0).shape == (0, 2)
    with pytest.raises(MechanismError):
        gen_predictors(GenConfig(sigma=((1.0, 2.0), (2.0, 1.0))), rng())


def test_expit():
    assert expit(0.0) == 0.5
    assert expit(-3.0) + expit(3.0) == pytest.approx(1.0)
    with np.errstate(over="raise"):
        assert expit(710.0) <= 1.0
        assert expit(-710.0) >= 0.0


@given(st.floats(-800, 800), st.floats(-800, 800))
def test_expit_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert 0.0 <= expit(lo) <= expit(hi) <= 1.0


@pytest.fixture(scope="module")
def sample():
    x = gen_predictors(DEFAULT, rng(2), 100_000)
    return x, gen_outcome_selection(x, DEFAULT, rng(3))


def test_calibration_examples(sample):
    x, y = sample
    assert calibrate_nu0(MechanismSpec(MechanismKind.MCAR, 0.5), x) == pytest.approx(0.0, abs=1e-9)
    nu0 = calibrate_nu0(MechanismSpec(MechanismKind.MAR, 0.5, nu2=1.0), x)
    # symmetric driver around 3 makes nu0 = -3 up to sampling error in the calibration sample
    assert nu0 == pytest.approx(-3.0, abs=0.02)


@pytest.mark.parametrize("kind", list(MechanismKind))
@pytest.mark.parametrize("target", [0.2, 0.5, 0.75])
def test_calibration_contract(kind, target):
    spec = calibrated(MechanismSpec(kind, target), DEFAULT, seed=13)
    x = gen_predictors(DEFAULT, rng(99), 100_000)
    y = gen_outcome_selection(x, DEFAULT, rng(98))
    m = gen_missingness(spec, x, y, rng(97))
    assert abs(m.mean() - target) < 0.01


def test_mcar_fraction(sample):
    x, _ = sample
    m = gen_missingness(MechanismSpec(MechanismKind.MCAR, nu0=0.0), x, rng=rng(5))
    assert abs(m.mean() - 0.5) < 0.01


def test_mnar_selects_on_x1(sample):
    x, _ = sample
    m = gen_missingness(calibrated(MechanismSpec(MechanismKind.MNAR, 0.5), DEFAULT, 1), x, rng=rng(6)).astype(bool)
    a, b = x[m, 0], x[~m, 0]
    se = np.sqrt(a.var() / a.size + b.var() / b.size)
    assert a.mean() - b.mean() > 3 * se


def test_mar_independent_of_x1_given_x2(sample):
    x, _ = sample
    m = gen_missingness(calibrated(MechanismSpec(MechanismKind.MAR, 0.5), DEFAULT, 1), x, rng=rng(7))
    # thin x2 bins: missing fraction should not differ between low and high x1 halves
    bins = np.quantile(x[:, 1], np.linspace(0, 1, 41))
    z = []
    for lo, hi in zip(bins[:-1], bins[1:]):
        sel = (x[:, 1] >= lo) & (x[:, 1] < hi)
        med = np.median(x[sel, 0])
        a, b = m[sel & (x[:, 0] < med)], m[sel & (x[:, 0] >= med)]
        pa, pb = a.mean(), b.mean()
        se = np.sqrt(pa * (1 - pa) / a.size + pb * (1 - pb) / b.size)
        z.append((pa - pb) / se)
    z = np.asarray(z)
    # Bonferroni-style bound over 40 bins
    assert np.max(np.abs(z)) < 3.5
    # the mask does depend on x2
    assert m[x[:, 1] > 3].mean() > m[x[:, 1] < 3].mean() + 0.1


def test_mcar_independent_of_covariates(sample):
    x, y = sample
    m = gen_missingness(MechanismSpec(MechanismKind.MCAR, nu0=0.0), x, rng=rng(8))
    for col in (x[:, 0], x[:, 1], y):
        q = np.quantile(col, [0.25, 0.5, 0.75])
        b = np.searchsorted(q, col)
        rates = np.array([m[b == k].mean() for k in range(4)])
        se = np.sqrt(0.25 / (col.size / 4))
        assert np.max(np.abs(rates - 0.5)) < 3.5 * se


def test_y_mechanisms_need_response(sample):
    x, _ = sample
    with pytest.raises(MechanismError):
        gen_missingness(MechanismSpec(MechanismKind.MARY, nu0=0.0), x, None, rng())


def test_selection_outcome_examples():
    cfg = GenConfig(noise_sd=0.0)
    x = gen_predictors(cfg, rng(), 50)
    y = gen_outcome_selection(x, cfg, rng())
    assert np.allclose(y, 1 + 3 * x[:, 0] + x[:, 1])
    assert gen_outcome_selection(np.array([[3.0, 3.0]]), cfg, rng())[0] == pytest.approx(13.0)


def test_selection_residual_variance():
    n = 10_000
    x = gen_predictors(DEFAULT, rng(4), n)
    y = gen_outcome_selection(x, DEFAULT, rng(5))
    fit = fit_least_squares(x, y, DesignSpec(columns=(0, 1)))
    assert abs(fit.sigma2 - 1.0) < 3 * np.sqrt(2 / n)


def test_pattern_mixture_mean_example():
    dm, dxm = mixture_deltas(d1=1.0, d3=1.0)
    cfg = GenConfig(delta_indicator=dm, delta_interaction=dxm, noise_sd=0.0)
    assert pattern_mixture_mean(np.array([[3.0, 3.0]]), np.array([[1, 0]]), cfg)[0] == pytest.approx(17.0)
    assert pattern_mixture_mean(np.array([[3.0, 3.0]]), np.array([[0, 0]]), cfg)[0] == pytest.approx(13.0)


def test_mixture_delta_mapping():
    dm, dxm = mixture_deltas(1, 2, 3, 4, 5, 6)
    cfg = GenConfig(delta_indicator=dm, delta_interaction=dxm, beta=(0, 0, 0))
    x = np.array([[2.0, 7.0]])
    # d1 M1 + d2 M2 + d3 X1M1 + d4 X2M2 + d5 X1M2 + d6 X2M1
    expect = 1 + 2 + 3 * 2 + 4 * 7 + 5 * 2 + 6 * 7
    assert pattern_mixture_mean(x, np.array([[1, 1]]), cfg)[0] == pytest.approx(expect)


def test_pattern_mixture_rejects_y_mechanisms():
    x = gen_predictors(DEFAULT, rng(), 10)
    with pytest.raises(MechanismError):
        gen_outcome_pattern_mixture(x, np.zeros((10, 2)), DEFAULT, rng(), kind="MARY")
    cfg = GenConfig(formulation=Formulation.PATTERN_MIXTURE)
    with pytest.raises(MechanismError):
        generate(cfg, MechanismSpec(MechanismKind.MNARY, nu0=0.0), rng())


def test_null_delta_pattern_mixture_matches_selection():
    # same draws in the same order give identical outcomes when all deltas vanish
    x = gen_predictors(DEFAULT, rng(), 500)
    mask = np.zeros((500, 2))
    mask[::2, 0] = 1
    a = gen_outcome_pattern_mixture(x, mask, DEFAULT, rng(1))
    b = gen_outcome_selection(x, DEFAULT, rng(1))
    assert np.allclose(a, b)


def test_formulations_agree_in_distribution_under_mar():
    mech = calibrated(MechanismSpec(MechanismKind.MAR, 0.5), DEFAULT, 3)
    pm = GenConfig(formulation=Formulation.PATTERN_MIXTURE)
    stats = {"sel": [], "pm": []}
    for r in range(60):
        for key, cfg in (("sel", DEFAULT), ("pm", pm)):
            d = generate(cfg, mech, rng(1000 * r + (key == "pm"))).data
            stats[key].append([d.y.mean(), d.mask[:, 0].mean(), np.nanmean(d.x[:, 1])])
    a, b = np.array(stats["sel"]), np.array(stats["pm"])
    se = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
    assert np.all(np.abs(a.mean(axis=0) - b.mean(axis=0)) < 3 * se)


def test_cond_draw():
    d = cond_draw_x2_given_x1(0.0, (3.0, 3.0), 1.0, 2.0, 0.0, rng(), size=50_000)
    assert abs(d.mean() - 3.0) < 3 * 2 / np.sqrt(50_000)
    assert d.std() == pytest.approx(2.0, rel=0.02)
    d = cond_draw_x2_given_x1(3.0, (3.0, 3.0), 1.0, 1.0, 0.999, rng(), size=50_000)
    assert d.var() == pytest.approx(1 - 0.999**2, rel=0.03)
    d = cond_draw_x2_given_x1(4.0, (3.0, 3.0), 1.0, 1.0, 0.5, rng(), size=100_000)
    assert abs(d.mean() - 3.5) < 3 * np.sqrt(0.75 / 100_000)


def test_generate_reproducible():
    mech = calibrated(MechanismSpec(MechanismKind.MNARY, 0.4), DEFAULT, 5)
    a = generate(DEFAULT, mech, rng(42))
    b = generate(DEFAULT, mech, rng(42))
    assert a.data.equals(b.data) and np.array_equal(a.x_true, b.x_true)


def test_masks_compose_across_columns():
    cfg = GenConfig()
    m1 = calibrated(MechanismSpec(MechanismKind.MCAR, 0.3, target_column=0), cfg, 1)
    m2 = calibrated(MechanismSpec(MechanismKind.MAR, 0.3, target_column=1), cfg, 1)
    d = generate(cfg, [m1, m2], rng(3)).data
    assert d.mask[:, 0].any() and d.mask[:, 1].any() and (d.mask.sum(axis=1) == 2).any()


def test_uncalibrated_mechanism_errors():
    with pytest.raises(MechanismError):
        gen_missingness(MechanismSpec(MechanismKind.MCAR), np.zeros((3, 2)), rng=rng())
    with pytest.raises(MechanismError):
        MechanismSpec(MechanismKind.MCAR, target_prob=1.5)
