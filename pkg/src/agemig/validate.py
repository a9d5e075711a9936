"""Forecast accuracy metrics and the rolling-origin backtest harness.

Point accuracy is judged against the posterior median on three scales:
plain MAE, MAE after a signed log transform that tames heavy-tailed rates
(LMAE), and MAE relative to in-sample naive persistence at the same
horizon (MASE).  Interval quality is empirical coverage plus mean
half-width.  The backtest refits the whole pipeline at each origin with
data truncated to what would have been observable, then scores every
horizon from the same ensemble.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .core import PERIOD_YEARS, DomainError, RatePanel
from .io import Dataset
from .nmr_model import McmcConfig
from .pipeline import fit_history, forecast
from .project import ForecastConfig

METHODS = ("persistence", "agnostic", "standardized")


def log_rate(y, c: float = 1.0):
    """Signed log transform: sign(y) * (log(|y| + c) - log c).

    Odd in y, zero at zero, and approximately linear within |y| < c; the
    offset c sets the scale below which rates pass through untouched.
    """
    if c <= 0:
        raise DomainError("log offset must be positive")
    y = np.asarray(y, dtype=float)
    return np.sign(y) * (np.log(np.abs(y) + c) - np.log(c))


def lmae(forecasts, truths, c: float = 1.0) -> float:
    """Mean absolute error on the signed log scale, NaN pairs dropped."""
    f = np.asarray(forecasts, dtype=float)
    r = np.asarray(truths, dtype=float)
    if f.shape != r.shape:
        raise DomainError("forecast and truth arrays differ in shape")
    err = np.abs(log_rate(f, c) - log_rate(r, c))
    ok = ~np.isnan(err)
    if not ok.any():
        return float("nan")
    return float(err[ok].mean())


def mase(forecasts, truths, naive_changes) -> float:
    """MAE scaled by the mean absolute in-sample naive change.

    ``naive_changes`` are the k-step changes |r(s+5k) - r(s)| that naive
    persistence would have missed over the in-sample origins.  Returns NaN
    when either side has no valid entries or the scale is zero.
    """
    f = np.asarray(forecasts, dtype=float)
    r = np.asarray(truths, dtype=float)
    if f.shape != r.shape:
        raise DomainError("forecast and truth arrays differ in shape")
    err = np.abs(f - r)
    err = err[~np.isnan(err)]
    base = np.asarray(naive_changes, dtype=float)
    base = base[~np.isnan(base)]
    if err.size == 0 or base.size == 0:
        return float("nan")
    denom = float(base.mean())
    if denom == 0.0:
        return float("nan")
    return float(err.mean()) / denom


def coverage_and_halfwidth(lower, upper, truths) -> tuple[float, float]:
    """Fraction of truths inside [lower, upper] and the mean (hi-lo)/2."""
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    r = np.asarray(truths, dtype=float)
    if not (lo.shape == hi.shape == r.shape):
        raise DomainError("interval and truth arrays differ in shape")
    ok = ~(np.isnan(lo) | np.isnan(hi) | np.isnan(r))
    if not ok.any():
        return float("nan"), float("nan")
    inside = (r[ok] >= lo[ok]) & (r[ok] <= hi[ok])
    return float(inside.mean()), float(((hi[ok] - lo[ok]) / 2.0).mean())


# ---------------------------------------------------------------------------
# backtest design
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BacktestPlan:
    """Which origins feed which horizons, out of sample and in sample.

    ``forecast_origins[k]`` are jump-off years whose horizon-k target is
    observed; ``insample_origins[k]`` are the periods whose k-step-ahead
    change defines the persistence scale for MASE.
    """

    horizons: tuple[int, ...]
    last_period: int
    forecast_origins: dict[int, tuple[int, ...]]
    insample_origins: dict[int, tuple[int, ...]]

    @classmethod
    def standard(cls, first_origin: int = 2000, last_period: int = 2015,
                 insample_first: int = 1950,
                 horizons: tuple[int, ...] = (1, 2, 3, 4)) -> "BacktestPlan":
        """Rolling origins from ``first_origin``, targets through ``last_period``.

        Horizon k uses jump-off years first_origin .. last_period - 5(k-1);
        its in-sample origins run from ``insample_first`` to the last period
        whose k-step target still precedes ``first_origin``.
        """
        fo = {}
        so = {}
        insample_last_target = first_origin - PERIOD_YEARS
        for k in horizons:
            lo_last = last_period - PERIOD_YEARS * (k - 1)
            if lo_last < first_origin:
                raise DomainError(f"horizon {k} has no usable jump-off year")
            fo[k] = tuple(range(first_origin, lo_last + 1, PERIOD_YEARS))
            s_last = insample_last_target - PERIOD_YEARS * k
            if s_last < insample_first:
                raise DomainError(f"horizon {k} has no in-sample origins")
            so[k] = tuple(range(insample_first, s_last + 1, PERIOD_YEARS))
        return cls(horizons=tuple(horizons), last_period=last_period,
                   forecast_origins=fo, insample_origins=so)

    def all_origins(self) -> tuple[int, ...]:
        out = set()
        for years in self.forecast_origins.values():
            out.update(years)
        return tuple(sorted(out))


@dataclass
class BacktestReport:
    """Aggregated scores per (horizon, method) plus per-cell detail."""

    plan: BacktestPlan
    levels: tuple[float, ...]
    rows: list = field(default_factory=list)
    details: pd.DataFrame | None = None

    def to_frame(self) -> pd.DataFrame:
        cols = ["horizon", "method", "mae", "lmae", "mase", "n_cells", "n_undefined"]
        recs = []
        for row in self.rows:
            rec = {k: row[k] for k in cols}
            for lv in self.levels:
                tag = f"{int(round(lv * 100))}"
                rec[f"coverage_{tag}"] = row["coverage"].get(lv, float("nan"))
                rec[f"halfwidth_{tag}"] = row["halfwidth"].get(lv, float("nan"))
            recs.append(rec)
        return pd.DataFrame(recs)


def _naive_changes(nmr: RatePanel, include: np.ndarray, k: int,
                   origins: tuple[int, ...]) -> np.ndarray:
    vals = []
    for s0 in origins:
        a = nmr.values[include, nmr.periods.index(s0)]
        b = nmr.values[include, nmr.periods.index(s0 + PERIOD_YEARS * k)]
        vals.append(np.abs(b - a))
    return np.concatenate(vals) if vals else np.empty(0)


def _ensemble_summaries(nmr_paths: np.ndarray, levels) -> dict:
    """Median and interval bounds over the trajectory axis."""
    out = {"point": np.quantile(nmr_paths, 0.5, axis=0)}
    for lv in levels:
        a = (1.0 - lv) / 2.0
        out[(lv, "lo")] = np.quantile(nmr_paths, a, axis=0)
        out[(lv, "hi")] = np.quantile(nmr_paths, 1.0 - a, axis=0)
    return out


def run_backtest(ds: Dataset, *, seed: int, plan: BacktestPlan | None = None,
                 methods: tuple[str, ...] = METHODS,
                 trajectories: int = 2000, mcmc: McmcConfig | None = None,
                 levels: tuple[float, ...] = (0.8, 0.95),
                 jobs: int = 1, verbose: bool = False) -> BacktestReport:
    """Refit at every origin, forecast to the last target, score everything.

    One ensemble per (origin, method) serves all horizons.  Persistence
    repeats the last observed rate and gets no intervals.  Scores cover
    countries modeled at every origin; cells lost to missing data are
    excluded and counted.
    """
    if plan is None:
        plan = BacktestPlan.standard()
    for m in methods:
        if m not in METHODS:
            raise DomainError(f"unknown method {m!r}; choose from {METHODS}")
    for k in plan.horizons:
        for t0 in plan.forecast_origins[k]:
            target = t0 + PERIOD_YEARS * (k - 1)
            if target not in ds.nmr.periods:
                raise DomainError(f"target period {target} not observed")

    origins = plan.all_origins()
    forecasts: dict[tuple[str, int], dict] = {}
    include_all = ds.include.copy()
    for t0 in origins:
        sub = ds.window(t0)
        include_all &= sub.include
        H = (plan.last_period - t0) // PERIOD_YEARS + 1
        for m, method in enumerate(methods):
            t_start = time.monotonic()
            if method == "persistence":
                last = sub.nmr.values[:, -1]
                forecasts[(method, t0)] = {
                    "point": np.repeat(last[:, None], H, axis=1)}
            else:
                ss = np.random.SeedSequence([seed, t0, m])
                fit_seed, path_seed = [int(s) for s in ss.generate_state(2)]
                cfg = mcmc if mcmc is not None else McmcConfig(seed=fit_seed)
                if mcmc is not None:
                    cfg = McmcConfig(**{**cfg.__dict__, "seed": fit_seed})
                hist = fit_history(sub, cfg, mode=method)
                ts = forecast(hist, ForecastConfig(
                    seed=path_seed, horizon=H, trajectories=trajectories,
                    mode=method, jobs=jobs))
                forecasts[(method, t0)] = _ensemble_summaries(ts.nmr, levels)
            if verbose:
                print(f"  origin {t0} {method}: {time.monotonic() - t_start:.1f}s")

    report = BacktestReport(plan=plan, levels=tuple(levels))
    detail_rows = []
    ctry = np.asarray(ds.countries)[include_all]
    for k in plan.horizons:
        base = _naive_changes(ds.nmr, include_all, k, plan.insample_origins[k])
        for method in methods:
            points, truths = [], []
            los = {lv: [] for lv in levels}
            his = {lv: [] for lv in levels}
            n_undef = 0
            for t0 in plan.forecast_origins[k]:
                summ = forecasts[(method, t0)]
                target = t0 + PERIOD_YEARS * (k - 1)
                tt = ds.nmr.periods.index(target)
                truth = ds.nmr.values[include_all, tt]
                point = summ["point"][include_all, k - 1]
                n_undef += int(np.isnan(truth).sum() + np.isnan(point).sum())
                points.append(point)
                truths.append(truth)
                for lv in levels:
                    if (lv, "lo") in summ:
                        los[lv].append(summ[(lv, "lo")][include_all, k - 1])
                        his[lv].append(summ[(lv, "hi")][include_all, k - 1])
                detail_rows.append(pd.DataFrame({
                    "horizon": k, "method": method, "origin": t0,
                    "target": target, "country": ctry,
                    "truth": truth, "forecast": point}))
            f = np.concatenate(points)
            r = np.concatenate(truths)
            err = np.abs(f - r)
            ok = ~np.isnan(err)
            row = {
                "horizon": k, "method": method,
                "mae": float(err[ok].mean()) if ok.any() else float("nan"),
                "lmae": lmae(f, r),
                "mase": mase(f, r, base),
                "n_cells": int(ok.sum()), "n_undefined": n_undef,
                "coverage": {}, "halfwidth": {},
            }
            for lv in levels:
                if los[lv]:
                    cov, hw = coverage_and_halfwidth(
                        np.concatenate(los[lv]), np.concatenate(his[lv]), r)
                else:
                    cov, hw = float("nan"), float("nan")
                row["coverage"][lv] = cov
                row["halfwidth"][lv] = hw
            report.rows.append(row)
    report.details = pd.concat(detail_rows, ignore_index=True)
    return report
