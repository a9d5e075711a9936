"""Acceptance suite: ten gate checks with one printed verdict line each.

Each test emits ``ACCEPTANCE <n> PASS|FAIL <summary>`` through pytest's
terminal reporter, which bypasses output capture, then asserts.
"""
import dataclasses
import sys
import time

import numpy as np
import pytest

from agemig import cli, pipeline, synth
from agemig import io as agio
from agemig.core import AgeGrid, RateKind
from agemig.decompose import fit_mixed_effects, decompose_nmr
from agemig.masi import (
    Masi,
    destandardize_panel,
    masi,
    oracle_standardized_omr,
    standardize_omr,
    standardize_panel,
)
from agemig.nmr_model import McmcConfig, fit_mcmc
from agemig.project import ForecastConfig
from agemig.schedule import AgeSchedule, save_schedule
from agemig.validate import BacktestPlan, lmae, mase, run_backtest


_REPORTER = None


@pytest.fixture(scope="module", autouse=True)
def _grab_reporter(request):
    global _REPORTER
    _REPORTER = request.config.pluginmanager.get_plugin("terminalreporter")


def _verdict(n: int, ok: bool, summary: str) -> None:
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}  {summary}"
    if _REPORTER is not None:
        _REPORTER.ensure_newline()
        _REPORTER.write_line(line)
    else:
        print(line, file=sys.__stdout__, flush=True)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. index scaling against the age-summed oracle
# ---------------------------------------------------------------------------

def test_01_index_scaling_oracle():
    gen = np.random.default_rng(1001)
    t0 = time.perf_counter()
    worst = 0.0
    n_instances = 1000
    for _ in range(n_instances):
        n = int(gen.integers(3, 22))
        sched = AgeSchedule(gen.uniform(0.05, 1.0, size=n))
        cur = gen.uniform(0.05, 1.0, size=n)
        cur /= cur.sum()
        ref = gen.uniform(0.05, 1.0, size=n)
        ref /= ref.sum()
        level = float(gen.uniform(0.5, 80.0))
        age_rates = level * sched.weights
        omr_cur = float(cur @ age_rates)
        via_index = standardize_omr(omr_cur, masi(cur, sched), masi(ref, sched))
        direct = oracle_standardized_omr(age_rates, cur, ref)
        worst = max(worst, abs(via_index - direct) / abs(direct))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    _verdict(1, ok, f"index-vs-oracle on {n_instances} random instances: "
                    f"max rel err {worst:.2e} (<=1e-12), {elapsed:.2f}s (<1s)")


# ---------------------------------------------------------------------------
# 2. standardize/destandardize round trip
# ---------------------------------------------------------------------------

def test_02_round_trip_identity(small_dataset):
    ds = small_dataset
    idx = Masi.from_at_risk(ds.at_risk, ds.schedule, ds.baseline_period,
                            include=ds.include)
    worst = 0.0
    for panel in (ds.imr_obs, ds.omr_obs):
        back = destandardize_panel(standardize_panel(panel, idx), idx)
        with np.errstate(invalid="ignore"):
            rel = np.abs(back.values - panel.values) / np.maximum(np.abs(panel.values), 1e-300)
        worst = max(worst, float(np.nanmax(rel)))
    # and on synthetic panels against a synthetic index
    gen = np.random.default_rng(1002)
    raw = ds.imr_obs.with_values(np.abs(gen.normal(5.0, 2.0, ds.imr_obs.values.shape)),
                                 kind=RateKind.OMR)
    back = destandardize_panel(standardize_panel(raw, idx), idx)
    rel = np.abs(back.values - raw.values) / np.abs(raw.values)
    worst = max(worst, float(np.max(rel)))
    ok = worst <= 1e-12
    _verdict(2, ok, f"standardize->destandardize round trip: max rel dev "
                    f"{worst:.2e} (<=1e-12)")


# ---------------------------------------------------------------------------
# 3. decomposition identity and reconstruction quality
# ---------------------------------------------------------------------------

def test_03_decomposition_identity_and_correlation():
    imr_obs, nmr, _ = synth.regression_panel(1003)
    fit = fit_mixed_effects(imr_obs, nmr)
    imr_hat, omr_hat = decompose_nmr(fit, nmr)
    ident = float(np.max(np.abs(imr_hat.values - omr_hat.values - nmr.values)))
    corr = float(np.corrcoef(imr_hat.values.ravel(), imr_obs.values.ravel())[0, 1])
    ok = ident <= 1e-12 and corr > 0.95
    _verdict(3, ok, f"net-rate decomposition: identity residual {ident:.2e} "
                    f"(<=1e-12) in every cell, reconstruction corr {corr:.3f} (>0.95)")


# ---------------------------------------------------------------------------
# 4. regression recovery across simulated panels
# ---------------------------------------------------------------------------

def test_04_mixed_effects_recovery():
    n_seeds = 20
    beta1_errs, s2b, s2w = [], [], []
    for seed in range(n_seeds):
        imr, nmr, truth = synth.regression_panel(seed, n_countries=200, n_periods=6)
        fit = fit_mixed_effects(imr, nmr)
        beta1_errs.append(abs(fit.beta1 - truth["beta1"]))
        s2b.append(fit.sigma2_between)
        s2w.append(fit.sigma2_within)
    true_s2b = truth["sigma_between"] ** 2
    true_s2w = truth["sigma_within"] ** 2
    worst_b1 = max(beta1_errs)
    rel_b = abs(np.mean(s2b) - true_s2b) / true_s2b
    rel_w = abs(np.mean(s2w) - true_s2w) / true_s2w
    ok = worst_b1 <= 0.05 and rel_b <= 0.20 and rel_w <= 0.20
    _verdict(4, ok, f"coefficient recovery over {n_seeds} panels of 200x6: "
                    f"max slope err {worst_b1:.3f} (<=0.05), variance components "
                    f"off by {rel_b:.1%}/{rel_w:.1%} (<=20%)")


# ---------------------------------------------------------------------------
# 5. posterior calibration of the hierarchical model
# ---------------------------------------------------------------------------

def test_05_posterior_calibration():
    t0 = time.perf_counter()
    coverages, worst_rhat = [], 0.0
    for seed in (5, 11, 42):
        panel, truth = synth.ar1_panel(seed, n_countries=50)
        post = fit_mcmc(panel, McmcConfig(seed=1105, chains=2,
                                          iterations=2000, burn_in=1000))
        lo = np.quantile(post.mu, 0.025, axis=0)
        hi = np.quantile(post.mu, 0.975, axis=0)
        coverages.append(float(np.mean((truth["mu"] >= lo) & (truth["mu"] <= hi))))
        rhat = post.diagnostics["rhat"]
        vals = rhat.values() if isinstance(rhat, dict) else [rhat]
        worst_rhat = max(worst_rhat, max(float(np.max(np.asarray(v))) for v in vals))
    elapsed = time.perf_counter() - t0
    cov = float(np.mean(coverages))
    ok = 0.90 <= cov <= 0.99 and worst_rhat < 1.1 and elapsed < 300.0
    _verdict(5, ok, f"95% intervals on 3x50 simulated countries: mean coverage "
                    f"{cov:.3f} (in [0.90, 0.99]), worst split-Rhat {worst_rhat:.3f} "
                    f"(<1.1), {elapsed:.0f}s (<300s)")


# ---------------------------------------------------------------------------
# 6. world closure at scale
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def closure_run(tmp_path_factory):
    spec = synth.SynthSpec(seed=6, n_countries=20, n_age_groups=21,
                           first_year=1950, last_year=2020, vitals_through=2105)
    world = synth.generate_world(spec)
    ds = agio.ingest(world.emit(tmp_path_factory.mktemp("closure")))
    t0 = time.perf_counter()
    hist = pipeline.fit_history(ds, McmcConfig(seed=61, chains=2,
                                               iterations=800, burn_in=400))
    ts = pipeline.forecast(hist, ForecastConfig(seed=62, horizon=16,
                                                trajectories=1000))
    elapsed = time.perf_counter() - t0
    return ds, ts, elapsed


def test_06_world_net_migration_closes(closure_run):
    ds, ts, elapsed = closure_run
    cell_worst = float(np.max(ts.closure_max))
    total_worst = float(np.max(np.abs(ts.net[:, ds.include, :].sum(axis=1))))
    worst = max(cell_worst, total_worst)
    ok = worst < 1e-6 and elapsed < 60.0
    _verdict(6, ok, f"closure over 1000 trajectories x 20 countries x 16 periods: "
                    f"worst |world net| {worst:.2e} persons (<1e-6), "
                    f"{elapsed:.0f}s (<60s)")


# ---------------------------------------------------------------------------
# 7. age-blind schedule collapses the two modes
# ---------------------------------------------------------------------------

def test_07_flat_schedule_modes_agree(tmp_path):
    spec = synth.SynthSpec(seed=23, n_countries=12, n_age_groups=21,
                           first_year=1980, last_year=2020, vitals_through=2080)
    world = synth.generate_world(spec)
    paths = world.emit(tmp_path / "flatworld")
    flat = AgeSchedule(np.full(21, 1.0 / 21.0), AgeGrid(21))
    save_schedule(tmp_path / "flat_schedule.csv", flat)
    paths = dataclasses.replace(paths, schedule=str(tmp_path / "flat_schedule.csv"))
    ds = agio.ingest(paths)
    mc = McmcConfig(seed=303, iterations=1500, burn_in=700)
    worst = 0.0
    runs = {}
    for mode in ("standardized", "agnostic"):
        hist = pipeline.fit_history(ds, mc, mode=mode)
        cfg = ForecastConfig(seed=505, horizon=6, trajectories=150, mode=mode)
        runs[mode] = pipeline.forecast(hist, cfg)
    for name in ("nmr", "inflow", "outflow", "net", "pop_totals"):
        a = np.asarray(getattr(runs["standardized"], name), float)
        b = np.asarray(getattr(runs["agnostic"], name), float)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
        worst = max(worst, float(np.max(np.abs(a - b) / scale)))
    ok = worst <= 1e-9
    _verdict(7, ok, f"flat age schedule: standardized vs agnostic trajectories "
                    f"max rel dev {worst:.2e} (<=1e-9)")


# ---------------------------------------------------------------------------
# 8. standardization tightens long-horizon intervals
# ---------------------------------------------------------------------------

def test_08_interval_width_at_horizon_four(tmp_path):
    spec = synth.SynthSpec(seed=19, n_countries=10, n_age_groups=21,
                           first_year=1950, last_year=2020, vitals_through=2060,
                           aging_strength=1.3)
    world = synth.generate_world(spec)
    ds = agio.ingest(world.emit(tmp_path / "aging"))
    plan = BacktestPlan.standard(first_origin=2000, last_period=2015, horizons=(4,))
    rep = run_backtest(ds, seed=80, plan=plan,
                       methods=("agnostic", "standardized"), trajectories=500,
                       mcmc=McmcConfig(seed=8, chains=2, iterations=1200, burn_in=600))
    frame = rep.to_frame().set_index("method")
    std_w = float(frame.loc["standardized", "halfwidth_80"])
    agn_w = float(frame.loc["agnostic", "halfwidth_80"])
    ok = std_w <= agn_w
    _verdict(8, ok, f"mean 80% half-width at 4-period horizon: standardized "
                    f"{std_w:.3f} <= agnostic {agn_w:.3f}")


# ---------------------------------------------------------------------------
# 9. error metric definitions
# ---------------------------------------------------------------------------

def test_09_error_metric_microexamples():
    e1 = np.e - 1.0
    checks = [
        abs(lmae([e1, 0.0], [0.0, e1]) - 1.0),
        abs(mase([2.0, 4.0], [1.0, 1.0], [1.0, 2.0, 3.0]) - 1.0),
        abs(mase([3.0], [1.0], [4.0]) - 0.5),
    ]
    gen = np.random.default_rng(1009)
    f = gen.normal(0, 5, 40)
    t = gen.normal(0, 5, 40)
    naive = gen.normal(0, 5, 60)
    base = mase(f, t, naive)
    for lam in (0.1, 10.0):
        checks.append(abs(mase(lam * f, lam * t, lam * naive) - base) / base)
    worst = max(checks)
    ok = worst <= 1e-12
    _verdict(9, ok, f"error metric micro-examples and scale invariance "
                    f"(x0.1, x10): max dev {worst:.2e} (<=1e-12)")


# ---------------------------------------------------------------------------
# 10. rerun determinism
# ---------------------------------------------------------------------------

def test_10_reruns_are_byte_identical(tmp_path):
    import yaml

    world_dir = tmp_path / "world"
    assert cli.main(["synth", "--seed", "10", "--out", str(world_dir),
                     "--countries", "5", "--first-year", "1995",
                     "--last-year", "2015", "--vitals-through", "2045"]) == 0
    cfg = {
        "inputs": {
            "population": str(world_dir / "population.csv"),
            "nmr": str(world_dir / "nmr.csv"),
            "flows": str(world_dir / "flows.csv"),
            "vitals": str(world_dir / "vitals.csv"),
            "countries": str(world_dir / "countries.csv"),
        },
        "seed": 1010,
        "mcmc": {"iterations": 400, "burn_in": 200},
        "forecast": {"horizon": 3, "trajectories": 40},
    }
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    out1, out2 = tmp_path / "run1", tmp_path / "run2"
    assert cli.main(["forecast", "--config", str(cfg_path), "--out", str(out1)]) == 0
    assert cli.main(["forecast", "--config", str(cfg_path), "--out", str(out2)]) == 0
    man1 = agio.Manifest.load(out1 / "manifest.json")
    man2 = agio.Manifest.load(out2 / "manifest.json")
    same_hashes = man1.outputs == man2.outputs and man1.config_hash == man2.config_hash
    diff_files = [name for name in man1.outputs
                  if (out1 / name).read_bytes() != (out2 / name).read_bytes()]
    ok = same_hashes and not diff_files and len(man1.outputs) >= 10
    _verdict(10, ok, f"rerun with identical configuration: {len(man1.outputs)} "
                     f"result files byte-identical"
                     + (f" (differs: {diff_files})" if diff_files else ""))
