import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agemig.core import (
    AgeGrid,
    AgeSchedule,
    DomainError,
    PeriodAxis,
    RateKind,
    RatePanel,
)
from agemig.masi import (
    Masi,
    destandardize_panel,
    masi,
    oracle_standardized_omr,
    standardize_imr,
    standardize_omr,
    standardize_panel,
    standardized_nmr,
)
from agemig import pipeline


def test_masi_is_a_dot_product():
    sched = AgeSchedule([0.2, 0.8], AgeGrid(2))
    assert masi([0.5, 0.5], sched) == pytest.approx(0.5, abs=1e-15)
    assert masi([1.0, 0.0], sched) == pytest.approx(0.2, abs=1e-15)


def test_masi_rejects_bad_shares():
    sched = AgeSchedule([0.2, 0.8], AgeGrid(2))
    with pytest.raises(DomainError):
        masi([0.7, 0.7], sched)
    with pytest.raises(DomainError):
        masi([1.2, -0.2], sched)
    with pytest.raises(DomainError):
        masi([0.5, 0.3, 0.2], sched)


@given(st.lists(st.floats(0.01, 10.0), min_size=3, max_size=21))
@settings(max_examples=100, deadline=None)
def test_flat_schedule_makes_index_age_blind(raw):
    """With equal weights the index is 1/A for every composition."""
    n = len(raw)
    shares = np.asarray(raw) / np.sum(raw)
    sched = AgeSchedule(np.ones(n), AgeGrid(n))
    assert masi(shares, sched) == pytest.approx(1.0 / n, rel=1e-12)


@given(
    seed=st.integers(0, 10_000),
    n=st.integers(3, 21),
    level=st.floats(1.0, 100.0),
)
@settings(max_examples=150, deadline=None)
def test_index_scaling_matches_age_summed_rates(seed, n, level):
    """When age out-rates follow the schedule shape, rescaling a total rate
    by the index ratio reproduces the directly age-summed total under the
    reference composition."""
    gen = np.random.default_rng(seed)
    weights = gen.uniform(0.05, 1.0, size=n)
    sched = AgeSchedule(weights)
    cur = gen.uniform(0.05, 1.0, size=n)
    cur /= cur.sum()
    ref = gen.uniform(0.05, 1.0, size=n)
    ref /= ref.sum()
    age_rates = level * sched.weights

    omr_cur = float(cur @ age_rates)
    c_cur = masi(cur, sched)
    c_ref = masi(ref, sched)
    via_index = standardize_omr(omr_cur, c_cur, c_ref)
    direct = oracle_standardized_omr(age_rates, cur, ref)
    assert via_index == pytest.approx(direct, rel=1e-12)


def test_oracle_rejects_degenerate_inputs():
    with pytest.raises(DomainError):
        oracle_standardized_omr([0.0, 0.0], [0.5, 0.5], [0.5, 0.5])
    with pytest.raises(DomainError):
        oracle_standardized_omr([1.0, -1.0], [0.5, 0.5], [0.5, 0.5])


def test_standardize_helpers_hand_values():
    # index fell from 0.04 to 0.02: the structure now produces half the
    # migration, so the standardized rate doubles
    assert standardize_omr(6.0, 0.02, 0.04) == pytest.approx(12.0)
    assert standardize_imr(6.0, 0.04, 0.02) == pytest.approx(3.0)
    assert standardized_nmr(12.0, 3.0) == pytest.approx(9.0)
    with pytest.raises(DomainError):
        standardize_omr(6.0, 0.0, 0.04)
    with pytest.raises(DomainError):
        standardize_imr(6.0, 0.04, -0.1)


def test_agnostic_index_is_identity():
    ax = PeriodAxis.inclusive(2000, 2010)
    idx = Masi.agnostic(["A", "B"], ax, baseline=2010)
    assert np.all(idx.country_ratios() == 1.0)
    assert np.all(idx.world_ratios() == 1.0)
    panel = RatePanel(RateKind.OMR, ["A", "B"], ax, np.full((2, 3), 4.0))
    assert np.array_equal(standardize_panel(panel, idx).values, panel.values)


def test_index_from_at_risk(small_dataset):
    ds = small_dataset
    idx = Masi.from_at_risk(ds.at_risk, ds.schedule, ds.baseline_period,
                            include=ds.include)
    base = ds.baseline_period
    for code in ds.countries:
        assert idx.country_ratio(code, base) == pytest.approx(1.0, abs=1e-15)
        assert idx.country_value(code, base) > 0
    assert idx.world_ratio(base) == pytest.approx(1.0, abs=1e-15)
    # ratios vary away from the baseline in an aging world
    other = ds.at_risk.periods.first
    ratios = [idx.country_ratio(c, other) for c in ds.countries]
    assert np.std(ratios) > 0


def test_imr_standardizes_with_world_index(small_dataset):
    ds = small_dataset
    idx = Masi.from_at_risk(ds.at_risk, ds.schedule, ds.baseline_period,
                            include=ds.include)
    imr_star = standardize_panel(ds.imr_obs, idx)
    omr_star = standardize_panel(ds.omr_obs, idx)
    assert imr_star.kind is RateKind.IMR_STAR
    assert omr_star.kind is RateKind.OMR_STAR
    k = ds.countries.index(ds.countries[0])
    for j, period in enumerate(ds.imr_obs.periods):
        w = idx.world_ratio(period)
        c = idx.country_ratio(ds.countries[0], period)
        np.testing.assert_allclose(imr_star.values[k, j],
                                   ds.imr_obs.values[k, j] / w, rtol=1e-13)
        np.testing.assert_allclose(omr_star.values[k, j],
                                   ds.omr_obs.values[k, j] / c, rtol=1e-13)


def test_panel_round_trip_is_identity(small_dataset):
    ds = small_dataset
    idx = Masi.from_at_risk(ds.at_risk, ds.schedule, ds.baseline_period,
                            include=ds.include)
    for panel in (ds.imr_obs, ds.omr_obs):
        back = destandardize_panel(standardize_panel(panel, idx), idx)
        scale = np.maximum(np.abs(panel.values), 1e-300)
        assert np.max(np.abs(back.values - panel.values) / scale) < 1e-12
        assert back.kind is panel.kind


def test_standardize_panel_guards_kinds():
    ax = PeriodAxis((2000,))
    idx = Masi.agnostic(["A"], ax, baseline=2000)
    nmr = RatePanel(RateKind.NMR, ["A"], ax, [[1.0]])
    with pytest.raises(DomainError):
        standardize_panel(nmr, idx)
    starred = RatePanel(RateKind.OMR_STAR, ["A"], ax, [[1.0]])
    with pytest.raises(DomainError):
        standardize_panel(starred, idx)
    with pytest.raises(DomainError):
        destandardize_panel(RatePanel(RateKind.OMR, ["A"], ax, [[1.0]]), idx)


def test_standardized_history_preserves_identity(small_dataset):
    hist = pipeline.standardize_history(small_dataset)
    diff = hist.imr_star.values - hist.omr_star.values
    np.testing.assert_allclose(diff, hist.nmr_star.values, rtol=1e-10, atol=1e-12)
    assert hist.nmr_star.kind is RateKind.NMR_STAR
