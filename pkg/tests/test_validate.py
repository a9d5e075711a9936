import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agemig.validate import (
    BacktestPlan,
    coverage_and_halfwidth,
    lmae,
    log_rate,
    mase,
    run_backtest,
)
from agemig.nmr_model import McmcConfig
from agemig import io as agio
from agemig import synth


# ---------------------------------------------------------------------------
# error metrics
# ---------------------------------------------------------------------------

def test_log_rate_hand_values():
    assert log_rate(0.0) == 0.0
    assert log_rate(np.e - 1.0) == pytest.approx(1.0)
    assert log_rate(-(np.e - 1.0)) == pytest.approx(-1.0)
    # with c=2: sign(y) * (log(|y|+2) - log 2)
    assert log_rate(6.0, c=2.0) == pytest.approx(np.log(8.0) - np.log(2.0))


@given(st.floats(-1e4, 1e4))
@settings(max_examples=200, deadline=None)
def test_log_rate_is_odd(y):
    assert log_rate(-y) == pytest.approx(-log_rate(y), rel=1e-12, abs=1e-12)


def test_lmae_hand_value():
    f = [np.e - 1.0, 0.0]
    t = [0.0, np.e - 1.0]
    # both cells err by exactly 1 on the log scale
    assert lmae(f, t) == pytest.approx(1.0, rel=1e-12)


def test_mase_hand_value():
    got = mase([2.0, 4.0], [1.0, 1.0], [1.0, 2.0, 3.0])
    # mean forecast error 2.0, mean naive change 2.0
    assert got == pytest.approx(1.0, rel=1e-12)
    assert mase([3.0], [1.0], [4.0]) == pytest.approx(0.5, rel=1e-12)


def test_mase_degenerate_denominator_is_nan():
    assert np.isnan(mase([1.0], [2.0], [0.0, 0.0]))


@pytest.mark.parametrize("lam", [0.1, 10.0])
def test_mase_is_scale_invariant(lam):
    gen = np.random.default_rng(8)
    f = gen.normal(0, 5, 40)
    t = gen.normal(0, 5, 40)
    naive = gen.normal(0, 5, 60)
    base = mase(f, t, naive)
    scaled = mase(lam * f, lam * t, lam * naive)
    assert scaled == pytest.approx(base, rel=1e-12)


def test_coverage_and_halfwidth_hand_case():
    lower = [0.0, 0.0, 0.0, 0.0]
    upper = [2.0, 2.0, 2.0, 4.0]
    truths = [1.0, 1.0, 3.0, 3.0]
    cov, hw = coverage_and_halfwidth(lower, upper, truths)
    assert cov == pytest.approx(0.75)
    assert hw == pytest.approx((1.0 + 1.0 + 1.0 + 2.0) / 4.0)


# ---------------------------------------------------------------------------
# backtest plan
# ---------------------------------------------------------------------------

def test_standard_plan_enumeration():
    plan = BacktestPlan.standard()
    assert plan.horizons == (1, 2, 3, 4)
    assert plan.forecast_origins[1] == (2000, 2005, 2010, 2015)
    assert plan.forecast_origins[2] == (2000, 2005, 2010)
    assert plan.forecast_origins[4] == (2000,)
    # persistence scaling uses every origin with an observed target
    assert plan.insample_origins[1] == tuple(range(1950, 1995, 5))
    assert len(plan.insample_origins[1]) == 9
    assert len(plan.insample_origins[4]) == 6
    assert plan.all_origins() == (2000, 2005, 2010, 2015)


def test_plan_with_short_history():
    plan = BacktestPlan.standard(first_origin=2010, last_period=2015,
                                 insample_first=1990, horizons=(1, 2))
    assert plan.forecast_origins[1] == (2010, 2015)
    assert plan.forecast_origins[2] == (2010,)
    # the scaling change must land strictly before the first forecast period
    assert plan.insample_origins[2] == (1990, 1995)


# ---------------------------------------------------------------------------
# end-to-end backtest
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def backtest_report(tmp_path_factory):
    spec = synth.SynthSpec(seed=29, n_countries=6, n_age_groups=21,
                           first_year=1975, last_year=2020, vitals_through=2060)
    world = synth.generate_world(spec)
    ds = agio.ingest(world.emit(tmp_path_factory.mktemp("bt")))
    plan = BacktestPlan.standard(first_origin=2010, last_period=2015,
                                 insample_first=1975, horizons=(1, 2))
    mc = McmcConfig(seed=6, chains=2, iterations=900, burn_in=450)
    return run_backtest(ds, seed=60, plan=plan, trajectories=120, mcmc=mc)


def test_backtest_report_structure(backtest_report):
    frame = backtest_report.to_frame()
    assert set(frame["method"]) == {"persistence", "agnostic", "standardized"}
    assert set(frame["horizon"]) == {1, 2}
    for col in ("mae", "lmae", "mase", "coverage_80", "halfwidth_80",
                "coverage_95", "halfwidth_95"):
        assert col in frame.columns
    probed = frame[(frame.method == "standardized") & (frame.horizon == 1)]
    assert len(probed) == 1
    assert np.isfinite(probed["mae"].iloc[0])


def test_backtest_persistence_has_no_intervals(backtest_report):
    frame = backtest_report.to_frame()
    pers = frame[frame.method == "persistence"]
    assert pers["coverage_80"].isna().all()
    assert pers["halfwidth_80"].isna().all()


def test_backtest_details_align_with_summary(backtest_report):
    det = backtest_report.details
    frame = backtest_report.to_frame()
    sub = det[(det.method == "standardized") & (det.horizon == 1)]
    want = frame[(frame.method == "standardized") & (frame.horizon == 1)]["mae"].iloc[0]
    got = float(np.mean(np.abs(sub["forecast"] - sub["truth"])))
    assert got == pytest.approx(want, rel=1e-12)
