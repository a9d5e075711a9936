"""End-to-end fitting pipeline from an ingested dataset to forecasts.

The stages compose: decompose net rates into in/out components, build the
age-composition index, standardize, fit the standardized decomposition and
the rate process, then hand everything to the trajectory engine.  Each
stage is callable on its own so partial runs (and the command line) can
stop wherever they need to.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DomainError, RateKind, RatePanel
from .decompose import MixedEffectsFit, decompose_nmr, fit_mixed_effects
from .io import Dataset
from .masi import Masi, standardize_panel
from .nmr_model import McmcConfig, PosteriorSample, fit_mcmc
from .project import ForecastConfig, TrajectorySet, run_forecast


def _masked(panel: RatePanel, include: np.ndarray) -> RatePanel:
    """Copy of a panel with excluded countries' values hidden as NaN."""
    vals = panel.values.copy()
    vals[~include] = np.nan
    return panel.with_values(vals)


def decompose_history(ds: Dataset) -> tuple[MixedEffectsFit, RatePanel, RatePanel]:
    """Fit the in/out decomposition on observed flows, apply to all periods.

    The regression runs on the flow-covered window of included countries;
    the fitted model then splits the full net-rate history, including the
    decades before flow counts exist.
    """
    if ds.imr_obs is None:
        raise DomainError("flow counts are required to fit the rate decomposition")
    fit = fit_mixed_effects(_masked(ds.imr_obs, ds.include), _masked(ds.nmr, ds.include))
    imr, omr = decompose_nmr(fit, ds.nmr)
    return fit, imr, omr


def build_index(ds: Dataset, mode: str, baseline: int) -> Masi:
    if mode == "agnostic":
        return Masi.agnostic(ds.countries, ds.at_risk.periods, baseline)
    return Masi.from_at_risk(ds.at_risk, ds.schedule, baseline, include=ds.include)


@dataclass
class HistoryFit:
    """Everything fitted from history that the forecast step consumes."""

    dataset: Dataset
    mode: str
    baseline: int
    fit_raw: MixedEffectsFit
    imr: RatePanel
    omr: RatePanel
    index: Masi
    imr_star: RatePanel
    omr_star: RatePanel
    nmr_star: RatePanel
    fit_star: MixedEffectsFit
    posterior: PosteriorSample | None = None

    def jumpoff_nmr_star(self) -> np.ndarray:
        """Standardized net rate at the last observed period, zero if excluded."""
        vals = self.nmr_star.values[:, -1]
        return np.where(self.dataset.include, vals, 0.0)

    def baseline_country_values(self) -> np.ndarray:
        t_ref = self.index.periods.index(self.baseline)
        return self.index.country_values[:, t_ref]

    def baseline_world_value(self) -> float:
        return float(self.index.world_values[self.index.periods.index(self.baseline)])


def standardize_history(ds: Dataset, mode: str = "standardized",
                        baseline: int | None = None) -> HistoryFit:
    """Decompose and standardize the full net-rate history.

    ``baseline`` is the reference period start; by default the last
    observed period, whose at-risk structure ends at the jump-off year.
    """
    if baseline is None:
        baseline = ds.baseline_period
    fit_raw, imr, omr = decompose_history(ds)
    index = build_index(ds, mode, baseline)
    imr_star = standardize_panel(imr, index)
    omr_star = standardize_panel(omr, index)
    nmr_star = RatePanel(RateKind.NMR_STAR, ds.countries, imr_star.periods,
                         imr_star.values - omr_star.values)

    imr_obs_star = standardize_panel(_masked(ds.imr_obs, ds.include), index)
    omr_obs_star = standardize_panel(_masked(ds.omr_obs, ds.include), index)
    nmr_obs_star = RatePanel(RateKind.NMR_STAR, ds.countries, imr_obs_star.periods,
                             imr_obs_star.values - omr_obs_star.values)
    fit_star = fit_mixed_effects(imr_obs_star, nmr_obs_star)
    return HistoryFit(dataset=ds, mode=mode, baseline=baseline, fit_raw=fit_raw,
                      imr=imr, omr=omr, index=index, imr_star=imr_star,
                      omr_star=omr_star, nmr_star=nmr_star, fit_star=fit_star)


def fit_history(ds: Dataset, mcmc: McmcConfig, mode: str = "standardized",
                baseline: int | None = None, verbose: bool = False) -> HistoryFit:
    """Standardize history and sample the rate process posterior."""
    hist = standardize_history(ds, mode=mode, baseline=baseline)
    codes = [c for c, keep in zip(ds.countries, ds.include) if keep]
    if not codes:
        raise DomainError("no countries large enough to model")
    panel = RatePanel(RateKind.NMR_STAR, codes, hist.nmr_star.periods,
                      hist.nmr_star.values[ds.include])
    hist.posterior = fit_mcmc(panel, mcmc)
    if verbose:
        for w in hist.posterior.diagnostics["warnings"]:
            print(f"  mcmc: {w}")
    return hist


def forecast(hist: HistoryFit, config: ForecastConfig,
             verbose: bool = False) -> TrajectorySet:
    """Run the trajectory engine from a fitted history."""
    if hist.posterior is None:
        raise DomainError("fit the rate process before forecasting")
    if config.mode != hist.mode:
        raise DomainError(f"forecast mode {config.mode!r} differs from the "
                          f"fitted mode {hist.mode!r}")
    ds = hist.dataset
    initial = ds.pop.window(first=ds.jumpoff_year, last=ds.jumpoff_year)
    return run_forecast(
        initial, ds.vitals, hist.posterior, hist.fit_star, config,
        schedule=ds.schedule,
        baseline_country=hist.baseline_country_values(),
        baseline_world=hist.baseline_world_value(),
        jumpoff_nmr_star=hist.jumpoff_nmr_star(),
        meta=ds.meta, include=ds.include, verbose=verbose)
