"""Core data model for the migration forecasting engine.

Everything downstream works on a shared index space: countries are ISO3-style
codes held in sorted order, time is a five-year axis labelled by start year,
people are counted on five-year age groups with an open-ended top group, and
sex is binary.  Rates are annual migrants per thousand at-risk persons
everywhere in the engine; flow counts for a five-year period convert via
``count = rate * at_risk * PERIOD_YEARS / RATE_SCALE``.

Country order is canonicalized (sorted by code) inside every container so
that reductions over countries are reproducible regardless of input order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

PERIOD_YEARS = 5
RATE_SCALE = 1000.0
SEXES = ("male", "female")
N_SEXES = 2

#: Gulf Cooperation Council members, which get a population-pressure outflow
#: age profile during forecasting instead of the base schedule.
GCC_CODES = frozenset({"BHR", "KWT", "OMN", "QAT", "SAU", "ARE"})

#: Major labor-origin countries rebalanced jointly with the GCC.
GCC_LABOR_ORIGIN_CODES = frozenset({"BGD", "IND", "IDN", "PHL", "PAK"})

#: Countries below this start-year population are passed through with zero
#: modeled migration.
SMALL_COUNTRY_THRESHOLD = 100_000.0


class DomainError(ValueError):
    """Mathematically invalid input (empty population, grid mismatch, ...)."""


class SchemaError(ValueError):
    """Malformed or internally inconsistent input data."""


class ConvergenceError(RuntimeError):
    """An iterative procedure failed to converge."""


# ---------------------------------------------------------------------------
# index axes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgeGrid:
    """Contiguous five-year age groups 0-4, 5-9, ... with an open top group."""

    n_groups: int
    group_width: int = PERIOD_YEARS

    def __post_init__(self) -> None:
        if self.n_groups < 2:
            raise DomainError(f"age grid needs at least 2 groups, got {self.n_groups}")
        if self.group_width != PERIOD_YEARS:
            raise DomainError("only 5-year age groups are supported")

    @property
    def lower_bounds(self) -> np.ndarray:
        return np.arange(self.n_groups) * self.group_width

    def labels(self) -> list[str]:
        lows = self.lower_bounds
        out = [f"{lo}-{lo + self.group_width - 1}" for lo in lows[:-1]]
        out.append(f"{lows[-1]}+")
        return out

    def index_of(self, age_lower: int) -> int:
        low = int(age_lower)
        if low % self.group_width or not 0 <= low < self.n_groups * self.group_width:
            raise DomainError(f"no age group starts at {age_lower}")
        return low // self.group_width

    def working_age_mask(self, low: int = 15, high: int = 65) -> np.ndarray:
        """Boolean mask over groups lying fully inside [low, high)."""
        lows = self.lower_bounds
        return (lows >= low) & (lows + self.group_width <= high)


@dataclass(frozen=True)
class PeriodAxis:
    """Strictly increasing five-year time axis labelled by start year.

    The same axis type serves population measurement years (points in time)
    and flow periods (the interval [t, t+5) labelled by its start t); which
    reading applies is a property of the container using the axis.
    """

    start_years: tuple[int, ...]

    def __post_init__(self) -> None:
        years = self.start_years
        if not years:
            raise DomainError("empty period axis")
        steps = np.diff(years)
        if len(years) > 1 and not np.all(steps == PERIOD_YEARS):
            raise DomainError(f"period axis must advance in {PERIOD_YEARS}-year steps: {years}")
        object.__setattr__(self, "start_years", tuple(int(y) for y in years))

    @classmethod
    def inclusive(cls, first: int, last: int) -> "PeriodAxis":
        return cls(tuple(range(first, last + 1, PERIOD_YEARS)))

    def index(self, year: int) -> int:
        try:
            return self.start_years.index(int(year))
        except ValueError:
            raise DomainError(f"year {year} not on axis {self.start_years[0]}..{self.start_years[-1]}") from None

    def window(self, first: int | None = None, last: int | None = None) -> "PeriodAxis":
        lo = self.start_years[0] if first is None else first
        hi = self.start_years[-1] if last is None else last
        kept = tuple(y for y in self.start_years if lo <= y <= hi)
        return PeriodAxis(kept)

    def __len__(self) -> int:
        return len(self.start_years)

    def __iter__(self):
        return iter(self.start_years)

    def __contains__(self, year) -> bool:
        return int(year) in self.start_years

    @property
    def first(self) -> int:
        return self.start_years[0]

    @property
    def last(self) -> int:
        return self.start_years[-1]


def _canonical_order(countries) -> tuple[tuple[str, ...], np.ndarray]:
    codes = tuple(str(c) for c in countries)
    if len(set(codes)) != len(codes):
        dupes = sorted({c for c in codes if codes.count(c) > 1})
        raise SchemaError(f"duplicate country codes: {dupes}")
    order = np.argsort(np.asarray(codes))
    return tuple(codes[k] for k in order), order


# ---------------------------------------------------------------------------
# population containers
# ---------------------------------------------------------------------------

class PopulationGrid:
    """People counts on (country, year, age group, sex).

    ``years`` are measurement points: ``values[i, t]`` is the pyramid of
    country i at the start of year ``years.start_years[t]``.  Values are
    non-negative, finite and immutable; per-(country, year) totals are
    precomputed once.
    """

    def __init__(self, countries, years: PeriodAxis, ages: AgeGrid, values) -> None:
        values = np.asarray(values, dtype=float)
        codes, order = _canonical_order(countries)
        expected = (len(codes), len(years), ages.n_groups, N_SEXES)
        if values.shape != expected:
            raise DomainError(f"population shape {values.shape} != {expected}")
        if not np.all(np.isfinite(values)):
            raise DomainError("non-finite population values")
        if np.any(values < 0):
            raise DomainError("negative population values")
        self.countries = codes
        self.years = years
        self.ages = ages
        vals = np.ascontiguousarray(values[order])
        vals.setflags(write=False)
        self.values = vals
        totals = vals.sum(axis=(2, 3))
        totals.setflags(write=False)
        self.totals = totals

    def country_index(self, code: str) -> int:
        try:
            return self.countries.index(code)
        except ValueError:
            raise DomainError(f"unknown country {code!r}") from None

    def pyramid(self, code: str, year: int) -> np.ndarray:
        """(age, sex) counts for one country at one measurement year."""
        return self.values[self.country_index(code), self.years.index(year)]

    def total(self, code: str, year: int) -> float:
        return float(self.totals[self.country_index(code), self.years.index(year)])

    def window(self, first: int | None = None, last: int | None = None) -> "PopulationGrid":
        sub = self.years.window(first, last)
        idx = [self.years.index(y) for y in sub]
        return PopulationGrid(self.countries, sub, self.ages, self.values[:, idx])


class AtRiskPopulation:
    """Population exposed to migration over each five-year period.

    For period t (the interval [t, t+5)) the at-risk population is the
    population at t+5 net of the period's migration.  When the age/sex
    detail of net migration is unknown, the t+5 age/sex pattern is kept and
    scaled so the total matches the identity ``total = P(t+5) - N(t)``.
    """

    def __init__(self, countries, periods: PeriodAxis, ages: AgeGrid, values) -> None:
        values = np.asarray(values, dtype=float)
        codes, order = _canonical_order(countries)
        expected = (len(codes), len(periods), ages.n_groups, N_SEXES)
        if values.shape != expected:
            raise DomainError(f"at-risk shape {values.shape} != {expected}")
        if not np.all(np.isfinite(values)):
            raise DomainError("non-finite at-risk values")
        if np.any(values < 0):
            raise DomainError("negative at-risk values")
        self.countries = codes
        self.periods = periods
        self.ages = ages
        vals = np.ascontiguousarray(values[order])
        vals.setflags(write=False)
        self.values = vals
        totals = vals.sum(axis=(2, 3))
        totals.setflags(write=False)
        self.totals = totals

    @classmethod
    def from_history(cls, pop: PopulationGrid, net_counts: np.ndarray) -> "AtRiskPopulation":
        """Build historic at-risk populations from end-of-period pyramids.

        Parameters
        ----------
        pop : PopulationGrid
            Populations measured at years t0, t0+5, ..., tN.
        net_counts : ndarray, shape (n_countries, n_years - 1)
            Net migrant counts per period, aligned with ``pop.countries``
            (canonical order) and periods t0 .. tN-5.
        """
        if len(pop.years) < 2:
            raise DomainError("need at least two population years to form at-risk periods")
        net_counts = np.asarray(net_counts, dtype=float)
        periods = PeriodAxis(pop.years.start_years[:-1])
        if net_counts.shape != (len(pop.countries), len(periods)):
            raise DomainError(f"net counts shape {net_counts.shape} != {(len(pop.countries), len(periods))}")
        end_pop = pop.values[:, 1:]                      # (C, T, A, S) at t+5
        end_tot = pop.totals[:, 1:]
        if np.any(end_tot <= 0):
            bad = np.argwhere(end_tot <= 0)[0]
            raise DomainError(
                f"non-positive end-of-period population for {pop.countries[bad[0]]} "
                f"at {periods.start_years[bad[1]]}"
            )
        scale = (end_tot - net_counts) / end_tot
        if np.any(scale < 0):
            bad = np.argwhere(scale < 0)[0]
            raise DomainError(
                f"net outflow exceeds population for {pop.countries[bad[0]]} "
                f"at {periods.start_years[bad[1]]}"
            )
        values = end_pop * scale[:, :, None, None]
        return cls(pop.countries, periods, pop.ages, values)

    def country_index(self, code: str) -> int:
        try:
            return self.countries.index(code)
        except ValueError:
            raise DomainError(f"unknown country {code!r}") from None

    def total(self, code: str, period: int) -> float:
        return float(self.totals[self.country_index(code), self.periods.index(period)])

    def cells(self, code: str, period: int) -> np.ndarray:
        """(age, sex) at-risk counts for one country-period."""
        return self.values[self.country_index(code), self.periods.index(period)]


# ---------------------------------------------------------------------------
# rate panels and schedules
# ---------------------------------------------------------------------------

class RateKind(str, Enum):
    NMR = "nmr"
    IMR = "imr"
    OMR = "omr"
    NMR_STAR = "nmr_star"
    IMR_STAR = "imr_star"
    OMR_STAR = "omr_star"

    @property
    def signed(self) -> bool:
        """Net rates may be negative; in/out rates may not."""
        return self in (RateKind.NMR, RateKind.NMR_STAR)

    @property
    def standardized(self) -> bool:
        return self.value.endswith("_star")

    def star(self) -> "RateKind":
        return self if self.standardized else RateKind(self.value + "_star")

    def unstar(self) -> "RateKind":
        return RateKind(self.value.removesuffix("_star"))


class RatePanel:
    """Country x period panel of migration rates, annual per thousand.

    NaN marks a missing observation.  In- and out-rates must be non-negative
    wherever observed.
    """

    def __init__(self, kind: RateKind, countries, periods: PeriodAxis, values) -> None:
        values = np.asarray(values, dtype=float)
        codes, order = _canonical_order(countries)
        expected = (len(codes), len(periods))
        if values.shape != expected:
            raise DomainError(f"rate panel shape {values.shape} != {expected}")
        if np.any(np.isinf(values)):
            raise DomainError("infinite rate values")
        if not kind.signed and np.any(values[~np.isnan(values)] < 0):
            raise DomainError(f"negative {kind.value} rates")
        self.kind = RateKind(kind)
        self.countries = codes
        self.periods = periods
        vals = np.ascontiguousarray(values[order])
        vals.setflags(write=False)
        self.values = vals

    def country_index(self, code: str) -> int:
        try:
            return self.countries.index(code)
        except ValueError:
            raise DomainError(f"unknown country {code!r}") from None

    def value(self, code: str, period: int) -> float:
        return float(self.values[self.country_index(code), self.periods.index(period)])

    def series(self, code: str) -> np.ndarray:
        return self.values[self.country_index(code)]

    def window(self, first: int | None = None, last: int | None = None) -> "RatePanel":
        sub = self.periods.window(first, last)
        idx = [self.periods.index(y) for y in sub]
        return RatePanel(self.kind, self.countries, sub, self.values[:, idx])

    def with_values(self, values, kind: RateKind | None = None) -> "RatePanel":
        return RatePanel(kind or self.kind, self.countries, self.periods, values)


def check_rate_identity(nmr: RatePanel, imr: RatePanel, omr: RatePanel, rtol: float = 1e-12) -> None:
    """Verify NMR = IMR - OMR entry-wise wherever all three are observed."""
    diff = imr.values - omr.values
    mask = ~(np.isnan(nmr.values) | np.isnan(diff))
    scale = np.maximum(np.abs(nmr.values[mask]), 1.0)
    err = np.abs(diff[mask] - nmr.values[mask]) / scale
    if err.size and err.max() > rtol:
        k = int(np.argmax(err))
        flat = np.argwhere(mask)[k]
        raise SchemaError(
            f"net rate does not equal in minus out for {nmr.countries[flat[0]]} "
            f"at {nmr.periods.start_years[flat[1]]} (rel err {err.max():.3e})"
        )


class AgeSchedule:
    """Normalized age profile of migration intensity over an AgeGrid.

    Weights are non-negative and renormalized to sum to one on construction.
    """

    def __init__(self, weights, ages: AgeGrid | None = None) -> None:
        weights = np.asarray(weights, dtype=float)
        if weights.ndim != 1:
            raise DomainError("schedule weights must be one-dimensional")
        if ages is not None and len(weights) != ages.n_groups:
            raise DomainError(f"schedule length {len(weights)} != {ages.n_groups} age groups")
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise DomainError("schedule weights must be finite and non-negative")
        total = weights.sum()
        if total <= 0:
            raise DomainError("schedule weights sum to zero")
        w = weights / total
        w.setflags(write=False)
        self.weights = w
        self.ages = ages

    def __len__(self) -> int:
        return len(self.weights)


# ---------------------------------------------------------------------------
# country metadata
# ---------------------------------------------------------------------------

class CountryGroup(str, Enum):
    GCC = "gcc"
    GCC_LABOR_ORIGIN = "gcc_labor_origin"
    OTHER = "other"


@dataclass(frozen=True)
class CountryMeta:
    code: str
    area: str = ""
    group: CountryGroup = CountryGroup.OTHER

    @classmethod
    def from_code(cls, code: str, area: str = "") -> "CountryMeta":
        if code in GCC_CODES:
            group = CountryGroup.GCC
        elif code in GCC_LABOR_ORIGIN_CODES:
            group = CountryGroup.GCC_LABOR_ORIGIN
        else:
            group = CountryGroup.OTHER
        return cls(code=code, area=area, group=group)


def default_meta(countries) -> dict[str, CountryMeta]:
    return {c: CountryMeta.from_code(c) for c in countries}


# ---------------------------------------------------------------------------
# rate arithmetic
# ---------------------------------------------------------------------------

def net_migration_rate(inflow, outflow, at_risk, period_years: int = PERIOD_YEARS,
                       *, country=None, period=None):
    """Annual net migration rate per thousand at-risk persons.

    ``inflow`` and ``outflow`` are migrant counts over the whole period.
    """
    at_risk_arr = np.asarray(at_risk, dtype=float)
    if np.any(at_risk_arr <= 0):
        where = "" if country is None else f" for {country}" + ("" if period is None else f" at {period}")
        raise DomainError(f"non-positive at-risk population{where}")
    out = RATE_SCALE * (np.asarray(inflow, dtype=float) - outflow) / (at_risk_arr * period_years)
    return float(out) if np.isscalar(inflow) and np.isscalar(outflow) and np.isscalar(at_risk) else out


def count_to_rate(count, at_risk, period_years: int = PERIOD_YEARS):
    """Convert a per-period migrant count to an annual per-thousand rate."""
    at_risk_arr = np.asarray(at_risk, dtype=float)
    if np.any(at_risk_arr <= 0):
        raise DomainError("non-positive at-risk population")
    out = RATE_SCALE * np.asarray(count, dtype=float) / (at_risk_arr * period_years)
    return float(out) if np.isscalar(count) and np.isscalar(at_risk) else out


def rate_to_count(rate, at_risk, period_years: int = PERIOD_YEARS):
    """Convert an annual per-thousand rate to a per-period migrant count."""
    out = np.asarray(rate, dtype=float) * at_risk * period_years / RATE_SCALE
    return float(out) if np.isscalar(rate) and np.isscalar(at_risk) else out


def age_share(pop: AtRiskPopulation, country: str, period: int) -> np.ndarray:
    """Age composition (both sexes pooled) of one country's at-risk population."""
    cells = pop.cells(country, period)
    total = cells.sum()
    if total <= 0:
        raise DomainError(f"non-positive at-risk population for {country} at {period}")
    return cells.sum(axis=1) / total


def global_age_share(pop: AtRiskPopulation, period: int, include: np.ndarray | None = None) -> np.ndarray:
    """Age composition of the pooled at-risk population over all countries.

    ``include`` optionally masks countries (e.g. to drop entities passed
    through without modeled migration).
    """
    t = pop.periods.index(period)
    vals = pop.values[:, t]
    if include is not None:
        vals = vals[np.asarray(include, dtype=bool)]
    by_age = vals.sum(axis=(0, 2))
    total = by_age.sum()
    if total <= 0:
        raise DomainError(f"non-positive world at-risk population at {period}")
    return by_age / total
