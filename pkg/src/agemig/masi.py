"""Migration age structure index (MASI) and age standardization of rates.

The index of a population is the dot product of its at-risk age composition
with a normalized migration age schedule: the annual per-person emigration
rate the population would have if every age group migrated exactly at the
schedule's intensity.  Dividing a rate by the ratio of current to baseline
index removes the part of its movement that is driven purely by population
age structure.

Out-rates standardize with the country's own index; in-rates standardize
with the index of the pooled world population, in-migration being
out-migration from the rest of the world under a world-shares approximation.
"""
from __future__ import annotations

import numpy as np

from .core import (
    AgeSchedule,
    AtRiskPopulation,
    DomainError,
    PeriodAxis,
    RateKind,
    RatePanel,
    age_share,
    global_age_share,
)

_SHARE_TOL = 1e-8


def _check_shares(shares: np.ndarray, n: int, what: str) -> np.ndarray:
    shares = np.asarray(shares, dtype=float)
    if shares.shape != (n,):
        raise DomainError(f"{what}: grid mismatch, {shares.shape[0] if shares.ndim == 1 else shares.shape} vs {n} age groups")
    if not np.all(np.isfinite(shares)) or np.any(shares < 0):
        raise DomainError(f"{what}: shares must be finite and non-negative")
    if abs(shares.sum() - 1.0) > _SHARE_TOL:
        raise DomainError(f"{what}: shares sum to {shares.sum():.6f}, not 1")
    return shares


def masi(shares, schedule: AgeSchedule) -> float:
    """Index value of one age composition under one schedule."""
    shares = _check_shares(shares, len(schedule), "age shares")
    return float(shares @ schedule.weights)


class Masi:
    """Country and world index values over a period axis, with a baseline.

    ``country_values[i, t]`` is the index of country i's at-risk population
    for period t; ``world_values[t]`` is the index of the pooled at-risk
    population of the modeled world.
    """

    def __init__(self, countries, periods: PeriodAxis, country_values, world_values,
                 baseline: int) -> None:
        self.countries = tuple(countries)
        self.periods = periods
        country_values = np.asarray(country_values, dtype=float)
        world_values = np.asarray(world_values, dtype=float)
        if country_values.shape != (len(self.countries), len(periods)):
            raise DomainError("country index values shaped wrong")
        if world_values.shape != (len(periods),):
            raise DomainError("world index values shaped wrong")
        if np.any(country_values <= 0) or np.any(world_values <= 0):
            raise DomainError("index values must be positive")
        self.baseline = int(baseline)
        self._t_ref = periods.index(baseline)
        country_values = country_values.copy()
        world_values = world_values.copy()
        country_values.setflags(write=False)
        world_values.setflags(write=False)
        self.country_values = country_values
        self.world_values = world_values

    @classmethod
    def from_at_risk(cls, pop: AtRiskPopulation, schedule: AgeSchedule, baseline: int,
                     include: np.ndarray | None = None) -> "Masi":
        """Compute index series from at-risk populations.

        ``include`` masks countries out of the world aggregate (entities
        passed through without modeled migration stay out of the pooled
        population); country-level values are computed for everyone.
        """
        if len(schedule) != pop.ages.n_groups:
            raise DomainError(f"schedule length {len(schedule)} != {pop.ages.n_groups} age groups")
        nC, nT = len(pop.countries), len(pop.periods)
        country_values = np.empty((nC, nT))
        world_values = np.empty(nT)
        for t, year in enumerate(pop.periods):
            for i, code in enumerate(pop.countries):
                country_values[i, t] = masi(age_share(pop, code, year), schedule)
            world_values[t] = masi(global_age_share(pop, year, include), schedule)
        return cls(pop.countries, pop.periods, country_values, world_values, baseline)

    @classmethod
    def agnostic(cls, countries, periods: PeriodAxis, baseline: int) -> "Masi":
        """Index pinned to one everywhere: standardization becomes a no-op."""
        countries = tuple(countries)
        ones = np.ones((len(countries), len(periods)))
        return cls(countries, periods, ones, np.ones(len(periods)), baseline)

    def country_index(self, code: str) -> int:
        try:
            return self.countries.index(code)
        except ValueError:
            raise DomainError(f"unknown country {code!r}") from None

    def country_value(self, code: str, period: int) -> float:
        return float(self.country_values[self.country_index(code), self.periods.index(period)])

    def world_value(self, period: int) -> float:
        return float(self.world_values[self.periods.index(period)])

    def country_ratio(self, code: str, period: int) -> float:
        """Current over baseline index for one country."""
        i = self.country_index(code)
        return float(self.country_values[i, self.periods.index(period)] / self.country_values[i, self._t_ref])

    def world_ratio(self, period: int) -> float:
        return float(self.world_values[self.periods.index(period)] / self.world_values[self._t_ref])

    def country_ratios(self) -> np.ndarray:
        """(country, period) matrix of current/baseline ratios; baseline column is 1."""
        return self.country_values / self.country_values[:, self._t_ref][:, None]

    def world_ratios(self) -> np.ndarray:
        return self.world_values / self.world_values[self._t_ref]

    def country_baseline(self, code: str) -> float:
        return float(self.country_values[self.country_index(code), self._t_ref])

    def world_baseline(self) -> float:
        return float(self.world_values[self._t_ref])


def standardize_omr(omr, index_current, index_reference):
    """Scale an out-rate to the baseline age structure of its own country."""
    if np.any(np.asarray(index_current) <= 0) or np.any(np.asarray(index_reference) <= 0):
        raise DomainError("index values must be positive")
    return omr * (index_reference / index_current)


def standardize_imr(imr, world_current, world_reference):
    """Scale an in-rate to the baseline age structure of the world."""
    if np.any(np.asarray(world_current) <= 0) or np.any(np.asarray(world_reference) <= 0):
        raise DomainError("index values must be positive")
    return imr * (world_reference / world_current)


def standardized_nmr(imr_star, omr_star):
    """Net standardized rate: standardized in-rate minus standardized out-rate."""
    return imr_star - omr_star


def oracle_standardized_omr(age_rates, shares, ref_shares) -> float:
    """Directly age-summed standardized out-rate, for checking index scaling.

    Computes the total out-rate under the current composition and rescales
    it by the ratio of the reference-composition total to the current one,
    with no assumption that age rates are proportional to any schedule.
    """
    age_rates = np.asarray(age_rates, dtype=float)
    n = len(age_rates)
    shares = _check_shares(shares, n, "current shares")
    ref_shares = _check_shares(ref_shares, n, "reference shares")
    if not np.all(np.isfinite(age_rates)) or np.any(age_rates < 0):
        raise DomainError("age-specific out-rates must be finite and non-negative")
    current_total = float(shares @ age_rates)
    if current_total == 0.0:
        raise DomainError("zero total out-rate under the current composition")
    reference_total = float(ref_shares @ age_rates)
    return current_total * (reference_total / current_total)


def _aligned_ratio(panel: RatePanel, index: Masi) -> np.ndarray:
    """Current/baseline ratio matrix aligned to a panel's countries x periods."""
    rows = [index.country_index(c) for c in panel.countries]
    cols = [index.periods.index(p) for p in panel.periods]
    if panel.kind.unstar() == RateKind.IMR:
        world = index.world_ratios()[cols]
        return np.broadcast_to(world, (len(rows), len(cols)))
    return index.country_ratios()[np.ix_(rows, cols)]


def standardize_panel(panel: RatePanel, index: Masi) -> RatePanel:
    """Map a raw in- or out-rate panel to its standardized counterpart."""
    if panel.kind.signed:
        raise DomainError("net rates standardize via their in/out components")
    if panel.kind.standardized:
        raise DomainError(f"panel {panel.kind.value} is already standardized")
    ratio = _aligned_ratio(panel, index)
    return panel.with_values(panel.values / ratio, kind=panel.kind.star())


def destandardize_panel(panel: RatePanel, index: Masi) -> RatePanel:
    """Map a standardized in- or out-rate panel back to the raw scale."""
    if panel.kind.signed:
        raise DomainError("net rates destandardize via their in/out components")
    if not panel.kind.standardized:
        raise DomainError(f"panel {panel.kind.value} is not standardized")
    ratio = _aligned_ratio(panel, index)
    return panel.with_values(panel.values * ratio, kind=panel.kind.unstar())
