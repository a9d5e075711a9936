"""Trajectory engine: cohort-component projection with probabilistic migration.

Each trajectory advances the world five years at a time.  A period step
projects every country forward without migration (survivorship shifts the
cohorts, surviving births fill the first group, the open-ended top group
accumulates), measures the age structure of that at-risk population, draws
the next standardized net rate from one posterior parameter set, splits it
into in/out rates, maps both back to the current age structure, spreads the
implied flow counts over age and sex, rebalances so world net migration
closes to zero within each rebalancing group, and finally applies the net
flows to the projected population.

The balanced flows are re-standardized into the jump-off net rate for the
next period, so rebalancing feeds back into the autoregression.  Randomness
enters only through the rate draw, whose stream is keyed by (trajectory,
country, period); everything downstream of the draw is deterministic.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

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
    count_to_rate,
    default_meta,
    rate_to_count,
)
from .decompose import MixedEffectsFit, split_rate
from .nmr_model import HierarchicalAr1, PosteriorSample
from .rng import philox_key, trajectory_stream

_MODES = ("standardized", "agnostic")


# ---------------------------------------------------------------------------
# vital rates
# ---------------------------------------------------------------------------

class VitalRates:
    """Survivorship, fertility and birth survival per country and period.

    ``survivorship[i, t, a, s]`` is the fraction of the cohort in age group a
    at the period start that survives the five years to enter group a+1 (the
    top group survives into itself).  ``fertility[i, t, a]`` is annual births
    per woman in group a, applied to start-of-period women for five years.
    ``birth_survival[i, t, s]`` is the fraction of newborns alive and in
    group 0 at the period's end.  ``srb`` is male births per female birth.
    """

    def __init__(self, countries, periods: PeriodAxis, ages: AgeGrid,
                 survivorship, fertility, birth_survival, srb: float = 1.05) -> None:
        codes = tuple(str(c) for c in countries)
        order = np.argsort(np.asarray(codes))
        self.countries = tuple(codes[k] for k in order)
        self.periods = periods
        self.ages = ages
        survivorship = np.asarray(survivorship, dtype=float)[order]
        fertility = np.asarray(fertility, dtype=float)[order]
        birth_survival = np.asarray(birth_survival, dtype=float)[order]
        C, T, A = len(codes), len(periods), ages.n_groups
        if survivorship.shape != (C, T, A, 2):
            raise DomainError(f"survivorship shape {survivorship.shape} != {(C, T, A, 2)}")
        if fertility.shape != (C, T, A):
            raise DomainError(f"fertility shape {fertility.shape} != {(C, T, A)}")
        if birth_survival.shape != (C, T, 2):
            raise DomainError(f"birth survival shape {birth_survival.shape} != {(C, T, 2)}")
        if np.any(survivorship <= 0) or np.any(survivorship > 1):
            raise DomainError("survivorship must lie in (0, 1]")
        if np.any(fertility < 0):
            raise DomainError("fertility must be non-negative")
        if np.any(birth_survival <= 0) or np.any(birth_survival > 1):
            raise DomainError("birth survival must lie in (0, 1]")
        if srb <= 0:
            raise DomainError("sex ratio at birth must be positive")
        for arr in (survivorship, fertility, birth_survival):
            arr.setflags(write=False)
        self.survivorship = survivorship
        self.fertility = fertility
        self.birth_survival = birth_survival
        self.srb = float(srb)

    def country_index(self, code: str) -> int:
        try:
            return self.countries.index(code)
        except ValueError:
            raise DomainError(f"unknown country {code!r}") from None


def _step_cohorts(pop: np.ndarray, surv: np.ndarray, fert: np.ndarray,
                  bsurv: np.ndarray, srb: float) -> np.ndarray:
    """Advance (..., A, 2) populations one period without migration."""
    survived = pop * surv
    out = np.zeros_like(pop)
    out[..., 1:, :] = survived[..., :-1, :]
    out[..., -1, :] += survived[..., -1, :]
    births = (fert * pop[..., 1]).sum(axis=-1) * PERIOD_YEARS
    male_share = srb / (1.0 + srb)
    out[..., 0, 0] = births * male_share * bsurv[..., 0]
    out[..., 0, 1] = births * (1.0 - male_share) * bsurv[..., 1]
    return out


def project_no_migration(pop: PopulationGrid, vitals: VitalRates, country: str,
                         year: int) -> np.ndarray:
    """At-risk (age, sex) population of one country at year+5, no migration."""
    if pop.ages.n_groups != vitals.ages.n_groups:
        raise DomainError("population and vital rates use different age grids")
    pyramid = pop.pyramid(country, year)
    i = vitals.country_index(country)
    t = vitals.periods.index(year)
    return _step_cohorts(pyramid, vitals.survivorship[i, t], vitals.fertility[i, t],
                         vitals.birth_survival[i, t], vitals.srb)


# ---------------------------------------------------------------------------
# single-period operations
# ---------------------------------------------------------------------------

def split_standardized_rate(nmr_star: float, fit_star: MixedEffectsFit,
                            country: str) -> tuple[float, float]:
    """Split a standardized net rate into (imr*, omr*) with repair."""
    return split_rate(fit_star.intercept(country), fit_star.beta1, nmr_star)


def destandardize(imr_star: float, omr_star: float,
                  country_current: float, country_reference: float,
                  world_current: float, world_reference: float) -> tuple[float, float]:
    """Map standardized rates back to the current age structures."""
    for v in (country_current, country_reference, world_current, world_reference):
        if v <= 0:
            raise DomainError("index values must be positive")
    return (imr_star * world_current / world_reference,
            omr_star * country_current / country_reference)


def gcc_outflow_schedule(pop_shares: np.ndarray, base: AgeSchedule,
                         ages: AgeGrid) -> AgeSchedule:
    """Outflow age profile for high-inflow labor destinations.

    Outflows leave from where the population bulges above the base migration
    profile, restricted to prime working ages; a degenerate difference falls
    back to the base schedule.
    """
    pop_shares = np.asarray(pop_shares, dtype=float)
    if pop_shares.shape != (ages.n_groups,) or len(base) != ages.n_groups:
        raise DomainError("shares, schedule and age grid must agree")
    w = np.where(ages.working_age_mask(), np.maximum(pop_shares - base.weights, 0.0), 0.0)
    if w.sum() <= 0:
        warnings.warn("degenerate working-age surplus; falling back to base schedule",
                      stacklevel=2)
        return base
    return AgeSchedule(w, ages)


def _sex_fractions(cells: np.ndarray) -> np.ndarray:
    """Within-age sex composition of (..., A, 2) cells; empty ages split evenly."""
    by_age = cells.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(by_age > 0, cells / by_age, 0.5)
    return frac


def _cap_and_respread(flow: np.ndarray, cap: np.ndarray) -> tuple[np.ndarray, float]:
    """Clip cell flows at their caps, respreading the excess proportionally.

    Returns the adjusted flows and any amount that could not be placed.
    """
    out = flow.copy()
    for _ in range(2 * flow.size):
        over = out > cap
        if not np.any(over):
            return out, 0.0
        excess = float((out - cap)[over].sum())
        out[over] = cap[over]
        free = ~over & (out > 0) & (out < cap)
        weight = out[free].sum()
        if weight <= 0:
            return out, excess
        out[free] += excess * out[free] / weight
    return out, 0.0


def disaggregate_flows(imr: float, omr: float, at_risk_cells: np.ndarray,
                       schedule: AgeSchedule, meta: CountryMeta | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Spread one country's in/out rates into (age, sex) flow counts.

    Inflows follow the base schedule; outflows follow the base schedule or,
    for a GCC country, the population-pressure profile.  Sex splits are
    proportional to the cell composition of the at-risk population, and no
    cell's outflow may exceed its at-risk population.
    """
    cells = np.asarray(at_risk_cells, dtype=float)
    A = cells.shape[0]
    if cells.shape != (A, 2) or len(schedule) != A:
        raise DomainError("at-risk cells and schedule must agree on the age grid")
    if imr < 0 or omr < 0:
        raise DomainError("in- and out-rates must be non-negative")
    total = cells.sum()
    if total <= 0:
        raise DomainError("non-positive at-risk population")
    frac = _sex_fractions(cells)
    inflow_total = rate_to_count(imr, total)
    outflow_total = rate_to_count(omr, total)
    inflow = inflow_total * schedule.weights[:, None] * frac
    out_sched = schedule
    if meta is not None and meta.group == CountryGroup.GCC:
        shares = cells.sum(axis=1) / total
        ages = schedule.ages or AgeGrid(A)
        out_sched = gcc_outflow_schedule(shares, schedule, ages)
    outflow = outflow_total * out_sched.weights[:, None] * frac
    outflow, shortfall = _cap_and_respread(outflow, cells)
    if shortfall > 0:
        warnings.warn(f"outflow exceeds population; {shortfall:.3g} persons dropped",
                      stacklevel=2)
    return inflow, outflow


def rebalance_global(inflows: np.ndarray, outflows: np.ndarray, at_risk: np.ndarray,
                     weight: float, group_masks, tol: float = 1e-9,
                     max_passes: int = 100) -> tuple[np.ndarray, np.ndarray, int]:
    """Force net migration to close within each country group, cell by cell.

    For every (age, sex) cell the group's net imbalance is removed by
    lowering inflows (fraction ``weight``) and raising outflows (the rest)
    in proportion to each country's at-risk cell population.  Negative
    results are clamped at zero and the residual is respread, up to
    ``max_passes`` passes per group.

    Returns adjusted (inflows, outflows) and the number of passes used.
    """
    if not 0.0 <= weight <= 1.0:
        raise DomainError("rebalance weight must lie in [0, 1]")
    I = np.asarray(inflows, dtype=float).copy()
    O = np.asarray(outflows, dtype=float).copy()
    at_risk = np.asarray(at_risk, dtype=float)
    passes_used = 0
    for mask in group_masks:
        mask = np.asarray(mask, dtype=bool)
        if not np.any(mask):
            continue
        denom = at_risk[mask].sum(axis=0)
        n_g = int(mask.sum())
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(denom > 0, at_risk[mask] / denom, 1.0 / n_g)
        for p in range(max_passes):
            net = (I[mask] - O[mask]).sum(axis=0)
            if np.max(np.abs(net)) <= tol:
                break
            I[mask] = np.maximum(I[mask] - weight * net * share, 0.0)
            O[mask] = np.maximum(O[mask] + (1.0 - weight) * net * share, 0.0)
            passes_used = max(passes_used, p + 1)
        else:
            worst = float(np.max(np.abs((I[mask] - O[mask]).sum(axis=0))))
            warnings.warn(f"rebalancing left {worst:.3g} persons unclosed after "
                          f"{max_passes} passes", stacklevel=2)
    return I, O, passes_used


def recompute_standardized_nmr(inflow_total: float, outflow_total: float,
                               at_risk_total: float, country_ratio: float,
                               world_ratio: float) -> float:
    """Standardized net rate implied by balanced flow counts."""
    if country_ratio <= 0 or world_ratio <= 0:
        raise DomainError("index ratios must be positive")
    imr = count_to_rate(inflow_total, at_risk_total)
    omr = count_to_rate(outflow_total, at_risk_total)
    return imr / world_ratio - omr / country_ratio


def apply_migration(at_risk_cells: np.ndarray, net_cells: np.ndarray
                    ) -> tuple[np.ndarray, float]:
    """End-of-period population: at-risk plus net migration, floored at zero.

    Returns the population and the clamped mass (people that the floor
    removed from negative cells).
    """
    pop = np.asarray(at_risk_cells, dtype=float) + np.asarray(net_cells, dtype=float)
    clamped = float(-pop[pop < 0].sum()) if np.any(pop < 0) else 0.0
    return np.maximum(pop, 0.0), clamped


# ---------------------------------------------------------------------------
# the trajectory engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ForecastConfig:
    """Settings of one forecast run.  The seed is required."""

    seed: int
    horizon: int
    trajectories: int
    mode: str = "standardized"
    rebalance_weight: float = 0.5
    rebalance_tol: float = 1e-9
    max_rebalance_passes: int = 100
    keep_age_detail: bool = False
    jobs: int = 1

    def __post_init__(self) -> None:
        if self.mode not in _MODES:
            raise DomainError(f"mode must be one of {_MODES}")
        if self.horizon < 1 or self.trajectories < 1:
            raise DomainError("horizon and trajectories must be at least 1")
        if self.jobs < 1:
            raise DomainError("jobs must be at least 1")


@dataclass
class TrajectorySet:
    """Per-trajectory forecast output plus summary helpers.

    Populations are point values at years; flows and rates belong to the
    period starting at the same label.  ``pop_totals[:, :, 0]`` repeats the
    (deterministic) initial populations for convenience.
    """

    countries: tuple[str, ...]
    start_year: int
    period_starts: tuple[int, ...]
    pop_totals: np.ndarray        # (J, C, H+1)
    inflow: np.ndarray            # (J, C, H)
    outflow: np.ndarray
    net: np.ndarray
    nmr: np.ndarray
    nmr_star: np.ndarray
    masi_ratio: np.ndarray
    world_ratio: np.ndarray       # (J, H)
    closure_max: np.ndarray       # (J, H)
    clamp_mass: np.ndarray        # (J, H)
    seed: int
    mode: str
    pop_age: np.ndarray | None = None   # (J, C, H+1, A, 2) when kept
    age_lower: tuple[int, ...] = ()

    @property
    def n_trajectories(self) -> int:
        return self.pop_totals.shape[0]

    @property
    def years(self) -> tuple[int, ...]:
        return (self.start_year,) + tuple(y + PERIOD_YEARS for y in self.period_starts)

    def quantiles(self, levels=(0.1, 0.9, 0.025, 0.975)):
        """Median and interval bounds per (country, year, variable)."""
        import pandas as pd

        qs = sorted(set(levels) | {0.5})
        named = {0.5: "median"}
        for q in qs:
            if q != 0.5:
                named[q] = f"q{q * 100:g}".replace(".", "_")
        frames = []
        per_period = {
            "nmr": self.nmr, "nmr_star": self.nmr_star, "inflow": self.inflow,
            "outflow": self.outflow, "net": self.net, "masi_ratio": self.masi_ratio,
        }
        for var, arr in per_period.items():
            vals = np.quantile(arr, qs, axis=0)  # (Q, C, H)
            for k, code in enumerate(self.countries):
                df = pd.DataFrame({"country": code, "year": self.period_starts,
                                   "variable": var})
                for qi, q in enumerate(qs):
                    df[named[q]] = vals[qi, k]
                frames.append(df)
        vals = np.quantile(self.pop_totals, qs, axis=0)  # (Q, C, H+1)
        for k, code in enumerate(self.countries):
            df = pd.DataFrame({"country": code, "year": self.years,
                               "variable": "population"})
            for qi, q in enumerate(qs):
                df[named[q]] = vals[qi, k]
            frames.append(df)
        wvals = np.quantile(self.world_ratio, qs, axis=0)
        df = pd.DataFrame({"country": "WORLD", "year": self.period_starts,
                           "variable": "world_masi_ratio"})
        for qi, q in enumerate(qs):
            df[named[q]] = wvals[qi]
        frames.append(df)
        out = pd.concat(frames, ignore_index=True)
        cols = ["country", "year", "variable"] + [named[q] for q in qs]
        return out[cols].sort_values(["variable", "country", "year"], kind="stable",
                                     ignore_index=True)


def _as_aligned(values, countries, what: str) -> np.ndarray:
    """Accept a dict keyed by code or an aligned array; return the array."""
    if isinstance(values, dict):
        missing = [c for c in countries if c not in values]
        if missing:
            raise DomainError(f"{what} missing for {missing}")
        return np.array([float(values[c]) for c in countries])
    arr = np.asarray(values, dtype=float)
    if arr.shape != (len(countries),):
        raise DomainError(f"{what} must align with {len(countries)} countries")
    return arr


class _Engine:
    """Precomputed, trajectory-independent state of one forecast run."""

    def __init__(self, initial_pop: PopulationGrid, vitals: VitalRates,
                 posterior: PosteriorSample, fit_star: MixedEffectsFit,
                 config: ForecastConfig, schedule: AgeSchedule,
                 baseline_country, baseline_world: float,
                 jumpoff_nmr_star, meta: dict[str, CountryMeta] | None,
                 include) -> None:
        if len(initial_pop.years) != 1:
            raise DomainError("initial population must carry exactly one year")
        codes = initial_pop.countries
        self.codes = codes
        C = len(codes)
        A = initial_pop.ages.n_groups
        self.A = A
        self.start_year = initial_pop.years.first
        self.period_starts = tuple(self.start_year + PERIOD_YEARS * h
                                   for h in range(config.horizon))
        for y in self.period_starts:
            if y not in vitals.periods:
                raise DomainError(f"vital rates missing forecast period {y}")
        if vitals.ages.n_groups != A:
            raise DomainError("vital rates use a different age grid")
        if len(schedule) != A:
            raise DomainError("schedule uses a different age grid")
        vi = [vitals.country_index(c) for c in codes]
        ti = [vitals.periods.index(y) for y in self.period_starts]
        self.surv = vitals.survivorship[np.ix_(vi, ti)]
        self.fert = vitals.fertility[np.ix_(vi, ti)]
        self.bsurv = vitals.birth_survival[np.ix_(vi, ti)]
        self.srb = vitals.srb
        self.R = np.asarray(schedule.weights)
        self.schedule = schedule
        self.ages = initial_pop.ages
        self.working = self.ages.working_age_mask()
        self.config = config
        self.posterior = posterior
        self.b0 = np.array([fit_star.intercept(c) for c in codes])
        self.b1 = fit_star.beta1
        self.P0 = np.asarray(initial_pop.values[:, 0])
        if include is None:
            include = np.ones(C, dtype=bool)
        self.include = np.asarray(include, dtype=bool)
        if self.include.shape != (C,):
            raise DomainError("include mask must align with the countries")
        if not np.any(self.include):
            raise DomainError("no countries carry modeled migration")
        for k in np.nonzero(self.include)[0]:
            posterior.country_index(codes[k])
        self.jumpoff = _as_aligned(jumpoff_nmr_star, codes, "jump-off rates")
        if config.mode == "standardized":
            if baseline_country is None:
                raise DomainError("baseline index values are required in standardized mode")
            self.c_ref = _as_aligned(baseline_country, codes, "baseline country index")
            if np.any(self.c_ref[self.include] <= 0) or baseline_world <= 0:
                raise DomainError("baseline index values must be positive")
            self.w_ref = float(baseline_world)
        else:
            self.c_ref = np.ones(C)
            self.w_ref = 1.0
        metas = meta or default_meta(codes)
        groups = np.array([metas.get(c, CountryMeta.from_code(c)).group for c in codes])
        self.gcc_mask = (groups == CountryGroup.GCC) & self.include
        corridor = ((groups == CountryGroup.GCC) | (groups == CountryGroup.GCC_LABOR_ORIGIN)) \
            & self.include
        rest = self.include & ~corridor
        self.group_masks = [m for m in (corridor, rest) if np.any(m)]
        self.key = philox_key(config.seed)
        self.n_draws = posterior.n_draws

    def run_trajectory(self, j: int) -> dict:
        cfg = self.config
        C, A, H = len(self.codes), self.A, cfg.horizon
        params = self.posterior.draw(j % self.n_draws)
        pidx = np.array([params.country_index(c) if self.include[k] else 0
                         for k, c in enumerate(self.codes)])
        mu, phi, sig = params.mu[pidx], params.phi[pidx], params.sigma[pidx]
        P = self.P0.copy()
        nmr_star = self.jumpoff.copy()
        rec = {name: np.zeros((C, H)) for name in
               ("inflow", "outflow", "net", "nmr", "nmr_star", "masi_ratio")}
        rec["pop_totals"] = np.zeros((C, H + 1))
        rec["pop_totals"][:, 0] = P.sum(axis=(1, 2))
        rec["world_ratio"] = np.zeros(H)
        rec["closure_max"] = np.zeros(H)
        rec["clamp_mass"] = np.zeros(H)
        if cfg.keep_age_detail:
            rec["pop_age"] = np.zeros((C, H + 1, A, 2))
            rec["pop_age"][:, 0] = P

        inc = self.include
        for h, year in enumerate(self.period_starts):
            at_risk = _step_cohorts(P, self.surv[:, h], self.fert[:, h],
                                    self.bsurv[:, h], self.srb)
            tot = at_risk.sum(axis=(1, 2))
            if np.any(tot[inc] <= 0):
                dead = [self.codes[k] for k in np.nonzero(inc & (tot <= 0))[0]]
                raise DomainError(f"population collapsed to zero for {dead} at {year}")

            if cfg.mode == "standardized":
                shares = at_risk.sum(axis=2) / np.where(tot > 0, tot, 1.0)[:, None]
                c_now = shares @ self.R
                world_share = at_risk[inc].sum(axis=(0, 2))
                world_share = world_share / world_share.sum()
                w_now = float(world_share @ self.R)
                c_ratio = np.where(inc, c_now / self.c_ref, 1.0)
                w_ratio = w_now / self.w_ref
            else:
                shares = at_risk.sum(axis=2) / np.where(tot > 0, tot, 1.0)[:, None]
                c_ratio = np.ones(C)
                w_ratio = 1.0

            # one stream per (trajectory, country, period): draw the next rate
            eps = np.zeros(C)
            for k in np.nonzero(inc)[0]:
                stream = trajectory_stream(self.key, j, self.codes[k], year)
                eps[k] = stream.standard_normal()
            nmr_star = np.where(inc, mu + phi * (nmr_star - mu) + sig * eps, 0.0)

            imr_star = np.maximum(self.b0 + self.b1 * np.maximum(nmr_star, 0.0), 0.0)
            omr_star = imr_star - nmr_star
            neg = omr_star < 0
            imr_star = np.where(neg, nmr_star, imr_star)
            omr_star = np.where(neg, 0.0, omr_star)

            imr = imr_star * w_ratio
            omr = omr_star * c_ratio

            in_tot = np.where(inc, rate_to_count(imr, tot), 0.0)
            out_tot = np.where(inc, rate_to_count(omr, tot), 0.0)
            frac = _sex_fractions(at_risk)
            inflows = in_tot[:, None, None] * self.R[None, :, None] * frac
            out_w = np.broadcast_to(self.R, (C, A)).copy()
            for k in np.nonzero(self.gcc_mask)[0]:
                w = np.where(self.working, np.maximum(shares[k] - self.R, 0.0), 0.0)
                s = w.sum()
                if s > 0:
                    out_w[k] = w / s
            outflows = out_tot[:, None, None] * out_w[:, :, None] * frac
            over = outflows > at_risk
            if np.any(over):
                for k in np.nonzero(over.any(axis=(1, 2)))[0]:
                    outflows[k], shortfall = _cap_and_respread(outflows[k], at_risk[k])
                    if shortfall > 0:
                        rec["clamp_mass"][h] += shortfall

            inflows, outflows, _ = rebalance_global(
                inflows, outflows, at_risk, cfg.rebalance_weight, self.group_masks,
                tol=cfg.rebalance_tol, max_passes=cfg.max_rebalance_passes)
            net = inflows - outflows
            rec["closure_max"][h] = float(np.max(np.abs(net[inc].sum(axis=0)))) \
                if np.any(inc) else 0.0

            in_tot = inflows.sum(axis=(1, 2))
            out_tot = outflows.sum(axis=(1, 2))
            net_tot = in_tot - out_tot
            safe_tot = np.where(tot > 0, tot, 1.0)
            nmr_raw = RATE_SCALE * net_tot / (safe_tot * PERIOD_YEARS)
            imr_real = RATE_SCALE * in_tot / (safe_tot * PERIOD_YEARS)
            omr_real = RATE_SCALE * out_tot / (safe_tot * PERIOD_YEARS)
            nmr_star = np.where(inc, imr_real / w_ratio - omr_real / c_ratio, 0.0)

            P = at_risk + net
            if np.any(P < 0):
                rec["clamp_mass"][h] += float(-P[P < 0].sum())
                P = np.maximum(P, 0.0)

            rec["inflow"][:, h] = in_tot
            rec["outflow"][:, h] = out_tot
            rec["net"][:, h] = net_tot
            rec["nmr"][:, h] = np.where(inc, nmr_raw, 0.0)
            rec["nmr_star"][:, h] = nmr_star
            rec["masi_ratio"][:, h] = c_ratio
            rec["world_ratio"][h] = w_ratio
            rec["pop_totals"][:, h + 1] = P.sum(axis=(1, 2))
            if cfg.keep_age_detail:
                rec["pop_age"][:, h + 1] = P
        return rec


def _run_chunk(engine: _Engine, trajectories: list[int]) -> dict:
    recs = [engine.run_trajectory(j) for j in trajectories]
    out = {}
    for name in recs[0]:
        out[name] = np.stack([r[name] for r in recs])
    return out


def run_forecast(initial_pop: PopulationGrid, vitals: VitalRates,
                 posterior: PosteriorSample, fit_star: MixedEffectsFit,
                 config: ForecastConfig, *, schedule: AgeSchedule,
                 baseline_country=None, baseline_world: float = 1.0,
                 jumpoff_nmr_star=None, meta: dict[str, CountryMeta] | None = None,
                 include=None, verbose: bool = False) -> TrajectorySet:
    """Simulate the forecast ensemble.

    Parameters
    ----------
    initial_pop : PopulationGrid
        One-year grid at the jump-off year.
    vitals : VitalRates
        Must cover every forecast period for every country.
    posterior : PosteriorSample
        Trajectory j uses parameter draw ``j % n_draws``.
    fit_star : MixedEffectsFit
        Splits standardized net rates into in/out components.
    config : ForecastConfig
        Horizon, trajectory count, seed, mode and rebalancing settings.
    schedule : AgeSchedule
        Base migration age profile.
    baseline_country, baseline_world
        Baseline index values (ignored in agnostic mode).
    jumpoff_nmr_star
        Standardized net rate per country at the last observed period.
    include
        Boolean mask of countries with modeled migration; excluded countries
        are projected with zero flows and stay out of world aggregates.

    Results are identical for any ``jobs`` split: each (trajectory, country,
    period) draw has its own counter-derived stream.
    """
    if jumpoff_nmr_star is None:
        raise DomainError("jump-off standardized rates are required")
    engine = _Engine(initial_pop, vitals, posterior, fit_star, config, schedule,
                     baseline_country, baseline_world, jumpoff_nmr_star, meta, include)
    J = config.trajectories
    t0 = time.monotonic()
    if config.jobs > 1 and J > 1:
        from multiprocessing import get_context

        n_workers = min(config.jobs, J)
        chunks = [list(range(w, J, n_workers)) for w in range(n_workers)]
        with get_context("fork").Pool(n_workers) as pool:
            parts = pool.starmap(_run_chunk, [(engine, ch) for ch in chunks])
        merged = {}
        order = np.argsort(np.concatenate([np.asarray(ch) for ch in chunks]))
        for name in parts[0]:
            merged[name] = np.concatenate([p[name] for p in parts])[order]
    else:
        merged = _run_chunk(engine, list(range(J)))
    if verbose:
        print(f"{J} trajectories x {config.horizon} periods in "
              f"{time.monotonic() - t0:.1f}s")
    return TrajectorySet(
        countries=engine.codes,
        start_year=engine.start_year,
        period_starts=engine.period_starts,
        pop_totals=merged["pop_totals"],
        inflow=merged["inflow"],
        outflow=merged["outflow"],
        net=merged["net"],
        nmr=merged["nmr"],
        nmr_star=merged["nmr_star"],
        masi_ratio=merged["masi_ratio"],
        world_ratio=merged["world_ratio"],
        closure_max=merged["closure_max"],
        clamp_mass=merged["clamp_mass"],
        seed=config.seed,
        mode=config.mode,
        pop_age=merged.get("pop_age"),
        age_lower=tuple(int(a) for a in initial_pop.ages.lower_bounds),
    )
