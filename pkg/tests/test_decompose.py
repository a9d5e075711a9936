import warnings

import numpy as np
import pytest

from agemig.core import DomainError, PeriodAxis, RateKind, RatePanel
from agemig.decompose import (
    decompose_nmr,
    fit_mixed_effects,
    predict_imr,
    split_rate,
)
from agemig import synth


def _statsmodels_fit(imr_panel, nmr_panel):
    import statsmodels.api as sm

    groups, y, x = [], [], []
    for k, code in enumerate(imr_panel.countries):
        for j in range(len(imr_panel.periods)):
            yi = imr_panel.values[k, j]
            ni = nmr_panel.values[k, j]
            if np.isfinite(yi) and np.isfinite(ni):
                groups.append(code)
                y.append(yi)
                x.append(max(ni, 0.0))
    y = np.asarray(y)
    X = np.column_stack([np.ones(len(y)), np.asarray(x)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return sm.MixedLM(y, X, groups=np.asarray(groups)).fit(reml=True, method="lbfgs")


@pytest.mark.parametrize("seed", [0, 7, 99])
def test_reml_matches_statsmodels(seed):
    imr, nmr, _ = synth.regression_panel(seed)
    fit = fit_mixed_effects(imr, nmr)
    ref = _statsmodels_fit(imr, nmr)
    assert fit.beta0 == pytest.approx(ref.fe_params[0], abs=1e-6)
    assert fit.beta1 == pytest.approx(ref.fe_params[1], abs=1e-6)
    cov_re = float(np.asarray(ref.cov_re, float).ravel()[0])
    assert fit.sigma2_between == pytest.approx(cov_re, rel=1e-3)
    assert fit.sigma2_within == pytest.approx(float(ref.scale), rel=1e-3)
    for code in fit.intercepts:
        blup = ref.fe_params[0] + float(np.asarray(ref.random_effects[code], float).ravel()[0])
        assert fit.intercepts[code] == pytest.approx(blup, abs=1e-5)


def test_shift_equivariance():
    imr, nmr, _ = synth.regression_panel(3)
    fit = fit_mixed_effects(imr, nmr)
    shifted = fit_mixed_effects(imr.with_values(imr.values + 2.5), nmr)
    assert shifted.beta0 == pytest.approx(fit.beta0 + 2.5, abs=1e-8)
    assert shifted.beta1 == pytest.approx(fit.beta1, abs=1e-8)
    for code in fit.intercepts:
        assert shifted.intercepts[code] == pytest.approx(fit.intercepts[code] + 2.5, abs=1e-7)


def test_refit_on_fitted_values_reproduces_coefficients():
    # the repair rule perturbs a few cells, so agreement is close, not exact
    imr, nmr, _ = synth.regression_panel(5)
    fit = fit_mixed_effects(imr, nmr)
    imr_hat, _ = decompose_nmr(fit, nmr)
    refit = fit_mixed_effects(imr_hat, nmr)
    assert refit.beta0 == pytest.approx(fit.beta0, abs=0.05)
    assert refit.beta1 == pytest.approx(fit.beta1, abs=0.02)


def test_no_between_variance_shrinks_intercepts():
    imr, nmr, _ = synth.regression_panel(5, sigma_between=0.0)
    fit = fit_mixed_effects(imr, nmr)
    spread = np.ptp(list(fit.intercepts.values()))
    assert spread < 0.15
    assert fit.sigma2_between < 0.05 * fit.sigma2_within


def test_recovers_known_coefficients():
    imr, nmr, truth = synth.regression_panel(1, n_countries=120, n_periods=12)
    fit = fit_mixed_effects(imr, nmr)
    assert fit.beta1 == pytest.approx(truth["beta1"], abs=0.05)
    assert fit.beta0 == pytest.approx(truth["beta0"], abs=0.2)
    assert fit.n_countries == 120
    assert fit.n_obs == 120 * 12
    assert 0.0 <= fit.r2_imr <= 1.0


def test_split_rate_hand_values():
    # negative net rates carry no slope term
    assert split_rate(8.0, 0.9, -50.0) == (8.0, 58.0)
    assert split_rate(8.0, 0.9, 10.0) == (17.0, 7.0)
    assert split_rate(8.0, 0.9, 0.0) == (8.0, 8.0)


def test_split_rate_repairs_negative_out_rate():
    imr, omr = split_rate(1.0, 0.0, 5.0)
    assert (imr, omr) == (5.0, 0.0)
    # identity holds after repair too
    assert imr - omr == pytest.approx(5.0)
    # a negative intercept cannot push the in-rate below zero
    imr, omr = split_rate(-3.0, 0.0, -2.0)
    assert imr == 0.0 and omr == pytest.approx(2.0)


def test_predict_imr_floors_at_zero():
    imr, nmr, _ = synth.regression_panel(2)
    fit = fit_mixed_effects(imr, nmr)
    code = imr.countries[0]
    assert predict_imr(fit, code, -4.0) == pytest.approx(fit.intercepts[code])
    assert predict_imr(fit, code, 2.0) == pytest.approx(fit.intercepts[code] + 2.0 * fit.beta1)


def test_decompose_nmr_identity_and_signs():
    imr, nmr, _ = synth.regression_panel(4)
    fit = fit_mixed_effects(imr, nmr)
    imr_hat, omr_hat = decompose_nmr(fit, nmr)
    np.testing.assert_allclose(imr_hat.values - omr_hat.values, nmr.values,
                               rtol=0, atol=1e-12)
    assert np.all(imr_hat.values >= 0)
    assert np.all(omr_hat.values >= 0)
    assert imr_hat.kind is RateKind.IMR
    assert omr_hat.kind is RateKind.OMR


def test_sparse_country_falls_back_to_global_intercept():
    ax = PeriodAxis.inclusive(1990, 2010)
    vals_imr = np.array([
        [8.0, 8.2, 7.9, 8.1, 8.0],
        [9.0, 9.1, 8.9, 9.2, 9.0],
        [np.nan, np.nan, np.nan, np.nan, 7.0],
    ])
    vals_nmr = np.zeros((3, 5))
    vals_nmr[2, :4] = np.nan
    imr = RatePanel(RateKind.IMR, ["AAA", "BBB", "CCC"], ax, vals_imr)
    nmr = RatePanel(RateKind.NMR, ["AAA", "BBB", "CCC"], ax, vals_nmr)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = fit_mixed_effects(imr, nmr)
    assert fit.skipped_countries == ("CCC",)
    assert fit.intercept("CCC") == pytest.approx(fit.beta0)
    assert fit.n_countries == 2


def test_all_sparse_panel_raises():
    ax = PeriodAxis.inclusive(2000, 2005)
    vals = np.array([[1.0, np.nan], [np.nan, 2.0]])
    imr = RatePanel(RateKind.IMR, ["A", "B"], ax, vals)
    nmr = RatePanel(RateKind.NMR, ["A", "B"], ax, np.zeros((2, 2)))
    with pytest.raises(DomainError):
        fit_mixed_effects(imr, nmr)


def test_all_negative_net_rates_pin_slope():
    ax = PeriodAxis.inclusive(1990, 2010)
    gen = np.random.default_rng(0)
    imr_vals = 6.0 + gen.normal(0, 0.3, size=(4, 5)) + gen.normal(0, 0.4, size=(4, 1))
    nmr_vals = -np.abs(gen.normal(2.0, 0.5, size=(4, 5)))
    imr = RatePanel(RateKind.IMR, ["A", "B", "C", "D"], ax, imr_vals)
    nmr = RatePanel(RateKind.NMR, ["A", "B", "C", "D"], ax, nmr_vals)
    with pytest.warns(UserWarning):
        fit = fit_mixed_effects(imr, nmr)
    assert fit.beta1 == 0.0
    assert fit.beta1_fixed
