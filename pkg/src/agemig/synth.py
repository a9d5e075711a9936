"""Synthetic worlds with known generating processes, for tests and demos.

The world generator produces a closed system of countries whose
age-specific out-rates are exactly proportional to the shipped migration
age profile (``omr_a = g * R_a``), with the gross level g following a
stationary log-AR(1) per country.  Inflows reallocate the pooled outflow
by fixed attractiveness weights, so world net migration closes to zero by
construction.  Fertility decline drives age-structure waves whose
strength is tunable; mortality improves smoothly over time.

Also provides small panel generators for the regression and rate-process
fitters, with their true parameters returned alongside.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from .core import (
    PERIOD_YEARS,
    RATE_SCALE,
    AgeGrid,
    AgeSchedule,
    CountryGroup,
    CountryMeta,
    DomainError,
    PeriodAxis,
    PopulationGrid,
    RateKind,
    RatePanel,
    SEXES,
    default_meta,
)
from .io import BIRTH_ROW, InputPaths, UNITS_ANNUAL
from .project import VitalRates, _step_cohorts
from .schedule import default_schedule

_GCC_SYNTH = ("SAU", "ARE", "QAT", "KWT")
_ORIGIN_SYNTH = ("IND", "PAK", "BGD", "PHL")


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the world generator.  The seed is required."""

    seed: int
    n_countries: int = 20
    n_age_groups: int = 21
    first_year: int = 1950
    last_year: int = 2020
    vitals_through: int = 2100
    gcc: bool = False
    small_country: bool = False
    zero_migration: bool = False
    #: scales the fertility decline; 0 freezes age structures, larger
    #: values carve deeper cohort waves into the pyramids
    aging_strength: float = 1.0
    gross_level: float = 40.0
    gross_spread: float = 0.5
    gross_phi: float = 0.7
    gross_sigma: float = 0.08

    def __post_init__(self) -> None:
        if self.n_countries < 2:
            raise DomainError("need at least two countries")
        if self.gcc and self.n_countries < len(_GCC_SYNTH) + len(_ORIGIN_SYNTH) + 2:
            raise DomainError("gcc worlds need at least ten countries")
        if (self.last_year - self.first_year) % PERIOD_YEARS or \
                (self.vitals_through - self.first_year) % PERIOD_YEARS:
            raise DomainError("years must differ by multiples of the period length")
        if self.last_year <= self.first_year or self.vitals_through < self.last_year:
            raise DomainError("year range is empty or vital rates end too early")


@dataclass
class SynthWorld:
    """A generated world plus the truth behind it."""

    spec: SynthSpec
    pop: PopulationGrid
    nmr: RatePanel
    inflow: np.ndarray            # (C, T) per-period counts
    outflow: np.ndarray
    at_risk_true: np.ndarray      # (C, T, A, 2) exact exposure cells
    vitals: VitalRates
    schedule: AgeSchedule
    meta: dict[str, CountryMeta]
    include: np.ndarray
    gross: np.ndarray             # (C, T) true gross out-rate level g
    attractiveness: np.ndarray    # (C,) inflow pool weights

    @property
    def countries(self) -> tuple[str, ...]:
        return self.pop.countries

    def emit(self, outdir) -> InputPaths:
        """Write the standard input file set; returns the paths."""
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        codes = self.countries
        years = self.pop.years.start_years
        ages = self.pop.ages.lower_bounds
        C, Y, A, _ = self.pop.values.shape

        pop_df = pd.DataFrame({
            "country": np.repeat(np.asarray(codes), Y * A * 2),
            "year": np.tile(np.repeat(years, A * 2), C),
            "age_lower": np.tile(np.repeat(ages, 2), C * Y),
            "sex": np.tile(np.asarray(SEXES), C * Y * A),
            "population": self.pop.values.ravel(),
        })
        pop_df.to_csv(outdir / "population.csv", index=False)

        periods = self.nmr.periods.start_years
        T = len(periods)
        nmr_df = pd.DataFrame({
            "country": np.repeat(np.asarray(codes), T),
            "period_start": np.tile(periods, C),
            "nmr": self.nmr.values.ravel(),
            "units": UNITS_ANNUAL,
        })
        nmr_df.to_csv(outdir / "nmr.csv", index=False)

        flow_df = pd.DataFrame({
            "country": np.repeat(np.asarray(codes), T),
            "period_start": np.tile(periods, C),
            "inflow": self.inflow.ravel(),
            "outflow": self.outflow.ravel(),
        })
        flow_df.to_csv(outdir / "flows.csv", index=False)

        vp = self.vitals.periods.start_years
        Tv = len(vp)
        rows_per_country = Tv * (A + 1) * 2
        age_col = np.tile(np.repeat(np.concatenate(([BIRTH_ROW], ages)), 2), C * Tv)
        sex_col = np.tile(np.asarray(SEXES), C * Tv * (A + 1))
        surv_col = np.empty((C, Tv, A + 1, 2))
        surv_col[:, :, 0, :] = self.vitals.birth_survival
        surv_col[:, :, 1:, :] = self.vitals.survivorship
        fert_col = np.full((C, Tv, A + 1, 2), np.nan)
        fert_col[:, :, 1:, 1] = self.vitals.fertility
        vit_df = pd.DataFrame({
            "country": np.repeat(np.asarray(codes), rows_per_country),
            "period_start": np.tile(np.repeat(vp, (A + 1) * 2), C),
            "age_lower": age_col,
            "sex": sex_col,
            "survivorship": surv_col.ravel(),
            "fertility": fert_col.ravel(),
        })
        vit_df.to_csv(outdir / "vitals.csv", index=False)

        meta_df = pd.DataFrame({
            "country": list(codes),
            "area": [self.meta[c].area for c in codes],
            "group": [self.meta[c].group.value for c in codes],
        })
        meta_df.to_csv(outdir / "countries.csv", index=False)

        truth_df = pd.DataFrame({
            "country": np.repeat(np.asarray(codes), T),
            "period_start": np.tile(periods, C),
            "gross_rate": self.gross.ravel(),
        })
        truth_df.to_csv(outdir / "truth_gross.csv", index=False)
        with open(outdir / "truth_spec.json", "w", encoding="utf-8") as fh:
            json.dump(asdict(self.spec), fh, indent=2, sort_keys=True)
            fh.write("\n")

        return InputPaths(population=str(outdir / "population.csv"),
                          nmr=str(outdir / "nmr.csv"),
                          vitals=str(outdir / "vitals.csv"),
                          flows=str(outdir / "flows.csv"),
                          countries=str(outdir / "countries.csv"))


def _codes(spec: SynthSpec) -> list[str]:
    n_generic = spec.n_countries
    named: list[str] = []
    if spec.gcc:
        named = list(_GCC_SYNTH + _ORIGIN_SYNTH)
        n_generic -= len(named)
    codes = named + [f"C{k:02d}" for k in range(n_generic)]
    if spec.small_country:
        codes.append("XSM")
    return codes


def _build_vitals(spec: SynthSpec, codes, ages: AgeGrid,
                  rng: np.random.Generator) -> VitalRates:
    periods = PeriodAxis.inclusive(spec.first_year, spec.vitals_through)
    C, T, A = len(codes), len(periods), ages.n_groups
    mid = ages.lower_bounds + 2.5
    t_years = np.asarray(periods.start_years, dtype=float)

    # mortality: Gompertz plus background, improving toward a floor
    decline = 0.5 + 0.5 * np.exp(-(t_years - spec.first_year) / 75.0)
    hazard = 0.0008 * np.exp(0.085 * mid) + 0.002
    sex_factor = np.array([1.15, 0.90])
    m = decline[None, :, None, None] * hazard[None, None, :, None] \
        * sex_factor[None, None, None, :]
    surv = np.exp(-PERIOD_YEARS * m)
    surv = np.broadcast_to(surv, (C, T, A, 2)).copy()
    bsurv = np.exp(-PERIOD_YEARS * (0.002 + 0.010 * decline))
    bsurv = np.stack([bsurv * 0.998, bsurv], axis=-1)
    bsurv = np.broadcast_to(bsurv, (C, T, 2)).copy()

    # fertility: per-country logistic decline from a peak to a floor
    fertile = (mid >= 15.0) & (mid < 50.0)
    shape = np.where(fertile, np.exp(-0.5 * ((mid - 27.0) / 6.5) ** 2), 0.0)
    shape = shape / shape.sum()
    peak = rng.uniform(4.0, 6.5, size=C)
    floor = rng.uniform(1.3, 1.9, size=C)
    midyear = rng.uniform(1975.0, 2005.0, size=C)
    slope = rng.uniform(6.0, 12.0, size=C)
    for k, code in enumerate(codes):
        if code == "XSM":
            # the pass-through entity must stay below the modeling threshold
            peak[k] = floor[k] = 1.6
    sig = 1.0 / (1.0 + np.exp(-(t_years[None, :] - midyear[:, None]) / slope[:, None]))
    drop = np.clip(spec.aging_strength, 0.0, None) * (peak - floor)[:, None] * sig
    tfr = np.maximum(peak[:, None] - drop, 0.8)
    fert = tfr[:, :, None] * shape[None, None, :] / PERIOD_YEARS
    return VitalRates(codes, periods, ages, surv, fert, bsurv, srb=1.05)


def _initial_pyramids(spec: SynthSpec, codes, ages: AgeGrid,
                      rng: np.random.Generator) -> np.ndarray:
    C, A = len(codes), ages.n_groups
    mid = ages.lower_bounds + 2.5
    sizes = np.exp(rng.uniform(np.log(1.0e6), np.log(4.0e7), size=C))
    for k, code in enumerate(codes):
        if code == "XSM":
            sizes[k] = 4.0e4
    steep = rng.uniform(0.8, 2.2, size=C)
    shares = np.exp(-steep[:, None] * mid[None, :] / 60.0)
    shares = shares / shares.sum(axis=1, keepdims=True)
    cells = (sizes[:, None] * shares)[:, :, None] * np.full(2, 0.5)[None, None, :]
    return cells


def generate_world(spec: SynthSpec) -> SynthWorld:
    """Run the generator; arrays are aligned to sorted country codes."""
    codes = sorted(_codes(spec))
    ages = AgeGrid(spec.n_age_groups)
    C, A = len(codes), ages.n_groups
    schedule = default_schedule(ages)
    R = np.asarray(schedule.weights)
    rng = np.random.default_rng(spec.seed)

    vitals = _build_vitals(spec, codes, ages, rng)
    pyramids = _initial_pyramids(spec, codes, ages, rng)

    modeled = np.array([c != "XSM" for c in codes])
    alpha = np.exp(rng.normal(0.0, 0.7, size=C))
    for k, code in enumerate(codes):
        if code in _GCC_SYNTH:
            alpha[k] *= 8.0
    alpha[~modeled] = 0.0
    alpha = alpha / alpha.sum()

    years = PeriodAxis.inclusive(spec.first_year, spec.last_year)
    periods = PeriodAxis(years.start_years[:-1])
    T = len(periods)

    level = spec.gross_level * np.exp(rng.normal(0.0, spec.gross_spread, size=C))
    x = rng.normal(0.0, 1.0, size=C) * spec.gross_sigma \
        / np.sqrt(1.0 - spec.gross_phi ** 2)
    shocks = rng.normal(0.0, spec.gross_sigma, size=(T, C))
    gross = np.empty((C, T))
    for t in range(T):
        gross[:, t] = level * np.exp(x)
        x = spec.gross_phi * x + shocks[t]
    gross[~modeled] = 0.0
    if spec.zero_migration:
        gross[:] = 0.0

    pop_values = np.empty((C, len(years), A, 2))
    pop_values[:, 0] = pyramids
    at_risk = np.empty((C, T, A, 2))
    inflow = np.empty((C, T))
    outflow = np.empty((C, T))

    vt = [vitals.periods.index(p) for p in periods]
    current = pyramids
    for t in range(T):
        tv = vt[t]
        tilde = _step_cohorts(current, vitals.survivorship[:, tv],
                              vitals.fertility[:, tv], vitals.birth_survival[:, tv],
                              vitals.srb)
        at_risk[:, t] = tilde
        out_cells = gross[:, t, None, None] * R[None, :, None] * tilde \
            * PERIOD_YEARS / RATE_SCALE
        pool = out_cells.sum()
        in_total = alpha * pool
        sex_frac = tilde / np.maximum(tilde.sum(axis=2, keepdims=True), 1e-300)
        in_cells = in_total[:, None, None] * R[None, :, None] * sex_frac
        current = tilde + in_cells - out_cells
        if np.any(current < 0.0):
            raise DomainError("generator produced a negative population cell")
        pop_values[:, t + 1] = current
        inflow[:, t] = in_cells.sum(axis=(1, 2))
        outflow[:, t] = out_cells.sum(axis=(1, 2))

    pop = PopulationGrid(codes, years, ages, pop_values)
    net = inflow - outflow
    end_tot = pop.totals[:, 1:]
    nmr_vals = RATE_SCALE * net / ((end_tot - net) * PERIOD_YEARS)
    nmr = RatePanel(RateKind.NMR, codes, periods, nmr_vals)

    meta = default_meta(codes)
    include = pop.totals[:, -1] >= 1.0e5
    return SynthWorld(spec=spec, pop=pop, nmr=nmr, inflow=inflow, outflow=outflow,
                      at_risk_true=at_risk, vitals=vitals, schedule=schedule,
                      meta=meta, include=include, gross=gross,
                      attractiveness=alpha)


# ---------------------------------------------------------------------------
# panel generators with known parameters
# ---------------------------------------------------------------------------

def regression_panel(seed: int, n_countries: int = 40, n_periods: int = 10,
                     beta0: float = 8.0, beta1: float = 0.9,
                     sigma_between: float = 0.5, sigma_within: float = 0.3):
    """In-rate/net-rate panels drawn from the random-intercept model.

    Returns (imr_panel, nmr_panel, truth) where truth carries the drawn
    intercepts and the variance components actually used.
    """
    rng = np.random.default_rng(seed)
    codes = [f"G{k:03d}" for k in range(n_countries)]
    periods = PeriodAxis.inclusive(1950, 1950 + PERIOD_YEARS * (n_periods - 1))
    b0 = beta0 + rng.normal(0.0, sigma_between, size=n_countries)
    nmr = np.clip(rng.normal(1.5, 2.0, size=(n_countries, n_periods)), -6.0, 6.0)
    eps = rng.normal(0.0, sigma_within, size=(n_countries, n_periods))
    imr = b0[:, None] + beta1 * np.maximum(nmr, 0.0) + eps
    if np.any(imr < 0.0) or np.any(imr - nmr < 0.0):
        raise DomainError("panel draw produced a negative component rate")
    truth = {"beta0": beta0, "beta1": beta1, "sigma_between": sigma_between,
             "sigma_within": sigma_within, "intercepts": dict(zip(codes, b0))}
    return (RatePanel(RateKind.IMR, codes, periods, imr),
            RatePanel(RateKind.NMR, codes, periods, nmr), truth)


def ar1_panel(seed: int, n_countries: int = 25, n_periods: int = 15,
              mu0: float = 0.5, tau: float = 1.2,
              phi_a: float = 6.0, phi_b: float = 3.0, sigma_scale: float = 0.8):
    """Standardized net-rate panel drawn from the hierarchical AR(1) prior.

    Country parameters are drawn from the same hierarchy the sampler
    assumes, so posterior intervals should cover them at their nominal
    rate.  Returns (panel, truth).
    """
    rng = np.random.default_rng(seed)
    codes = [f"H{k:03d}" for k in range(n_countries)]
    periods = PeriodAxis.inclusive(1950, 1950 + PERIOD_YEARS * (n_periods - 1))
    mu = rng.normal(mu0, tau, size=n_countries)
    phi = rng.beta(phi_a, phi_b, size=n_countries)
    sigma = np.abs(rng.normal(0.0, sigma_scale, size=n_countries))
    sigma = np.maximum(sigma, 0.05 * sigma_scale)
    y = np.empty((n_countries, n_periods))
    y[:, 0] = mu + rng.normal(0.0, 1.0, size=n_countries) \
        * sigma / np.sqrt(1.0 - phi ** 2)
    for t in range(1, n_periods):
        y[:, t] = mu + phi * (y[:, t - 1] - mu) \
            + rng.normal(0.0, 1.0, size=n_countries) * sigma
    truth = {"mu": mu, "phi": phi, "sigma": sigma, "mu0": mu0, "tau": tau,
             "sigma_scale": sigma_scale}
    return RatePanel(RateKind.NMR_STAR, codes, periods, y), truth
