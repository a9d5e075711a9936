"""File interfaces: CSV ingestion, result emission, and run manifests.

All tabular data moves through headered UTF-8 CSV files; exact column
contracts live in docs/formats.md.  Floats are written with shortest
round-trip precision, so emitted files re-ingest to identical values.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .core import (
    PERIOD_YEARS,
    RATE_SCALE,
    AgeGrid,
    AgeSchedule,
    AtRiskPopulation,
    CountryGroup,
    CountryMeta,
    DomainError,
    PeriodAxis,
    PopulationGrid,
    RateKind,
    RatePanel,
    SchemaError,
    SEXES,
    SMALL_COUNTRY_THRESHOLD,
    check_rate_identity,
    default_meta,
)
from .project import TrajectorySet, VitalRates
from .schedule import load_schedule, packaged_default

UNITS_ANNUAL = "annual_per_thousand"
UNITS_PER_PERIOD = "per_period_per_thousand"

#: age_lower value marking the birth-cohort survival row in the vitals file
BIRTH_ROW = -5


def _read_csv(path, columns: tuple[str, ...]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"{path}: file not found")
    try:
        # round_trip parsing keeps emitted floats bit-identical on re-ingest
        df = pd.read_csv(path, comment="#", float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: empty file") from None
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}; found {list(df.columns)}")
    if len(df) == 0:
        raise SchemaError(f"{path}: no data rows")
    return df


def _require_numeric(df: pd.DataFrame, path, column: str) -> np.ndarray:
    vals = pd.to_numeric(df[column], errors="coerce")
    bad = df.index[vals.isna() & df[column].notna()]
    if len(bad):
        raise SchemaError(f"{path}: non-numeric {column!r} at data row(s) {list(bad[:5] + 2)}")
    return vals.to_numpy()


def read_population(path) -> PopulationGrid:
    """Read a (country, year, age_lower, sex, population) CSV into a grid."""
    df = _read_csv(path, ("country", "year", "age_lower", "sex", "population"))
    df["population"] = _require_numeric(df, path, "population")
    if df["population"].isna().any():
        raise SchemaError(f"{path}: missing population values")
    bad_sex = set(df["sex"].unique()) - set(SEXES)
    if bad_sex:
        raise SchemaError(f"{path}: unknown sex labels {sorted(bad_sex)}; expected {SEXES}")
    dupes = df.duplicated(["country", "year", "age_lower", "sex"])
    if dupes.any():
        row = df[dupes].iloc[0]
        raise SchemaError(f"{path}: duplicate cell for {row['country']} year {row['year']} "
                          f"age {row['age_lower']} {row['sex']}")
    countries = sorted(df["country"].unique())
    years = sorted(int(y) for y in df["year"].unique())
    ages_lower = sorted(int(a) for a in df["age_lower"].unique())
    expect = list(range(0, 5 * len(ages_lower), 5))
    if ages_lower != expect:
        raise SchemaError(f"{path}: age groups must be 0,5,... in 5-year steps, got {ages_lower}")
    ages = AgeGrid(len(ages_lower))
    axis = PeriodAxis(tuple(years))
    cube = df.set_index(["country", "year", "age_lower", "sex"])["population"]
    full = pd.MultiIndex.from_product([countries, years, ages_lower, list(SEXES)],
                                      names=["country", "year", "age_lower", "sex"])
    missing = full.difference(cube.index)
    if len(missing):
        raise SchemaError(f"{path}: incomplete grid; first missing cell {tuple(missing[0])}")
    values = cube.reindex(full).to_numpy().reshape(len(countries), len(years),
                                                  len(ages_lower), 2)
    return PopulationGrid(countries, axis, ages, values)


def read_nmr(path, countries, periods: PeriodAxis) -> RatePanel:
    """Read net rates, converting to the annual-per-thousand scale.

    Every row carries a units label; per-period values are divided by the
    period length.  The panel is aligned to the given countries and periods,
    NaN where no row exists.
    """
    df = _read_csv(path, ("country", "period_start", "nmr", "units"))
    df["nmr"] = _require_numeric(df, path, "nmr")
    bad_units = set(df["units"].unique()) - {UNITS_ANNUAL, UNITS_PER_PERIOD}
    if bad_units:
        raise SchemaError(f"{path}: unknown units {sorted(bad_units)}; "
                          f"expected {UNITS_ANNUAL} or {UNITS_PER_PERIOD}")
    if df.duplicated(["country", "period_start"]).any():
        row = df[df.duplicated(["country", "period_start"])].iloc[0]
        raise SchemaError(f"{path}: duplicate row for {row['country']} at {row['period_start']}")
    vals = np.where(df["units"] == UNITS_PER_PERIOD, df["nmr"] / PERIOD_YEARS, df["nmr"])
    table = {(c, int(p)): v for c, p, v in zip(df["country"], df["period_start"], vals)}
    out = np.full((len(countries), len(periods)), np.nan)
    for i, c in enumerate(countries):
        for t, p in enumerate(periods):
            if (c, p) in table:
                out[i, t] = table[(c, p)]
    return RatePanel(RateKind.NMR, countries, periods, out)


def read_flows(path, countries, periods: PeriodAxis) -> tuple[np.ndarray, np.ndarray]:
    """Read per-period migrant counts; NaN marks uncovered country-periods."""
    df = _read_csv(path, ("country", "period_start", "inflow", "outflow"))
    df["inflow"] = _require_numeric(df, path, "inflow")
    df["outflow"] = _require_numeric(df, path, "outflow")
    if (df["inflow"] < 0).any() or (df["outflow"] < 0).any():
        raise SchemaError(f"{path}: negative flow counts")
    if df.duplicated(["country", "period_start"]).any():
        row = df[df.duplicated(["country", "period_start"])].iloc[0]
        raise SchemaError(f"{path}: duplicate row for {row['country']} at {row['period_start']}")
    inflow = np.full((len(countries), len(periods)), np.nan)
    outflow = np.full((len(countries), len(periods)), np.nan)
    cmap = {c: i for i, c in enumerate(countries)}
    pmap = {p: t for t, p in enumerate(periods)}
    for c, p, fin, fout in zip(df["country"], df["period_start"], df["inflow"], df["outflow"]):
        if c in cmap and int(p) in pmap:
            inflow[cmap[c], pmap[int(p)]] = fin
            outflow[cmap[c], pmap[int(p)]] = fout
    return inflow, outflow


def read_vitals(path, countries, ages: AgeGrid, srb: float = 1.05) -> VitalRates:
    """Read survivorship/fertility rows into a VitalRates container.

    Fertility is taken from female rows (annual births per woman); the
    special age_lower value -5 carries the birth-cohort survival per sex.
    """
    df = _read_csv(path, ("country", "period_start", "age_lower", "sex",
                          "survivorship", "fertility"))
    df["survivorship"] = _require_numeric(df, path, "survivorship")
    periods = PeriodAxis(tuple(sorted(int(p) for p in df["period_start"].unique())))
    C, T, A = len(countries), len(periods), ages.n_groups
    surv = np.full((C, T, A, 2), np.nan)
    fert = np.zeros((C, T, A))
    bsurv = np.full((C, T, 2), np.nan)
    cmap = {c: i for i, c in enumerate(countries)}
    smap = {s: k for k, s in enumerate(SEXES)}
    fert_vals = pd.to_numeric(df["fertility"], errors="coerce").to_numpy()
    for row, fv in zip(df.itertuples(index=False), fert_vals):
        if row.country not in cmap:
            continue
        i = cmap[row.country]
        t = periods.index(int(row.period_start))
        s = smap.get(row.sex)
        if s is None:
            raise SchemaError(f"{path}: unknown sex label {row.sex!r}")
        a = int(row.age_lower)
        if a == BIRTH_ROW:
            bsurv[i, t, s] = row.survivorship
        else:
            surv[i, t, ages.index_of(a), s] = row.survivorship
            if s == 1 and np.isfinite(fv):
                fert[i, t, ages.index_of(a)] = fv
    for name, arr in (("survivorship", surv), ("birth survival", bsurv)):
        if np.isnan(arr).any():
            miss = np.argwhere(np.isnan(arr))[0]
            raise SchemaError(f"{path}: incomplete {name}; first gap for "
                              f"{countries[miss[0]]} at {periods.start_years[miss[1]]}")
    return VitalRates(countries, periods, ages, surv, fert, bsurv, srb=srb)


def read_countries(path) -> dict[str, CountryMeta]:
    df = _read_csv(path, ("country", "area", "group"))
    out = {}
    for row in df.itertuples(index=False):
        try:
            group = CountryGroup(str(row.group))
        except ValueError:
            raise SchemaError(f"{path}: unknown group {row.group!r} for {row.country}") from None
        out[str(row.country)] = CountryMeta(code=str(row.country), area=str(row.area),
                                            group=group)
    return out


# ---------------------------------------------------------------------------
# the assembled dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """Everything the pipeline needs, on one canonical country order."""

    pop: PopulationGrid
    nmr: RatePanel
    vitals: VitalRates
    schedule: AgeSchedule
    schedule_checksum: str
    meta: dict[str, CountryMeta]
    include: np.ndarray
    at_risk: AtRiskPopulation
    net_counts: np.ndarray
    inflow_counts: np.ndarray | None = None
    outflow_counts: np.ndarray | None = None
    imr_obs: RatePanel | None = None
    omr_obs: RatePanel | None = None

    @property
    def countries(self) -> tuple[str, ...]:
        return self.pop.countries

    @property
    def jumpoff_year(self) -> int:
        return self.pop.years.last

    @property
    def baseline_period(self) -> int:
        """Last period with observed at-risk structure (ends at jump-off)."""
        return self.at_risk.periods.last

    def window(self, last_pop_year: int) -> "Dataset":
        """Restrict to data observable by ``last_pop_year`` (for backtests)."""
        if last_pop_year not in self.pop.years:
            raise DomainError(f"{last_pop_year} is not a population year")
        pop = self.pop.window(last=last_pop_year)
        keep = [t for t, p in enumerate(self.nmr.periods)
                if p <= last_pop_year - PERIOD_YEARS]
        periods = PeriodAxis(tuple(self.nmr.periods.start_years[t] for t in keep))
        nmr = RatePanel(RateKind.NMR, self.countries, periods, self.nmr.values[:, keep])
        include = self.pop.totals[:, self.pop.years.index(last_pop_year)] \
            >= SMALL_COUNTRY_THRESHOLD
        at_risk = AtRiskPopulation(self.countries, periods, self.pop.ages,
                                   self.at_risk.values[:, keep])
        sub = lambda arr: None if arr is None else arr[:, keep]
        imr_obs = None if self.imr_obs is None else RatePanel(
            RateKind.IMR, self.countries, periods, self.imr_obs.values[:, keep])
        omr_obs = None if self.omr_obs is None else RatePanel(
            RateKind.OMR, self.countries, periods, self.omr_obs.values[:, keep])
        return Dataset(pop=pop, nmr=nmr, vitals=self.vitals, schedule=self.schedule,
                       schedule_checksum=self.schedule_checksum, meta=self.meta,
                       include=include, at_risk=at_risk,
                       net_counts=self.net_counts[:, keep],
                       inflow_counts=sub(self.inflow_counts),
                       outflow_counts=sub(self.outflow_counts),
                       imr_obs=imr_obs, omr_obs=omr_obs)


@dataclass(frozen=True)
class InputPaths:
    population: str
    nmr: str
    vitals: str
    flows: str | None = None
    schedule: str | None = None
    countries: str | None = None


def ingest(paths: InputPaths, *, min_population: float = SMALL_COUNTRY_THRESHOLD,
           flows_required_from: int = 1990, srb: float = 1.05) -> Dataset:
    """Read, validate and assemble the input files into a Dataset.

    Included countries (jump-off population at or above ``min_population``)
    must have complete net-rate coverage; flow counts, where present, must
    agree with the net rates through the at-risk identity and must cover
    every period from ``flows_required_from`` on.
    """
    pop = read_population(paths.population)
    countries = pop.countries
    if len(pop.years) < 2:
        raise SchemaError("population must cover at least two measurement years")
    periods = PeriodAxis(pop.years.start_years[:-1])
    nmr = read_nmr(paths.nmr, countries, periods)
    include = pop.totals[:, -1] >= min_population

    missing_nmr = np.isnan(nmr.values) & include[:, None]
    if missing_nmr.any():
        i, t = np.argwhere(missing_nmr)[0]
        raise SchemaError(f"net rates incomplete for included country {countries[i]} "
                          f"at {periods.start_years[t]}")
    nmr_vals = np.where(np.isnan(nmr.values), 0.0, nmr.values)

    # net counts solve N = rate * (P(t+5) - N) * years / 1000
    end_tot = pop.totals[:, 1:]
    q = nmr_vals * PERIOD_YEARS / RATE_SCALE
    net_counts = q * end_tot / (1.0 + q)

    inflow = outflow = None
    if paths.flows is not None:
        inflow, outflow = read_flows(paths.flows, countries, periods)
        covered = ~np.isnan(inflow)
        needed = include[:, None] & (np.asarray(periods.start_years)[None, :]
                                     >= flows_required_from)
        gaps = needed & ~covered
        if gaps.any():
            i, t = np.argwhere(gaps)[0]
            raise SchemaError(f"flow counts missing for {countries[i]} at "
                              f"{periods.start_years[t]}; required from {flows_required_from}")
        flow_net = inflow - outflow
        use = covered & include[:, None]
        implied = np.where(use, flow_net, net_counts)
        tilde = end_tot - implied
        if np.any(tilde[use] <= 0):
            raise SchemaError("flow counts imply non-positive at-risk population")
        implied_rate = RATE_SCALE * implied / (tilde * PERIOD_YEARS)
        scale = np.maximum(np.abs(nmr_vals[use]), 1.0)
        err = np.abs(implied_rate[use] - nmr_vals[use]) / scale
        if err.size and err.max() > 1e-9:
            k = int(np.argmax(err))
            i, t = np.argwhere(use)[k]
            raise SchemaError(f"net rate and flow counts disagree for {countries[i]} at "
                              f"{periods.start_years[t]} (rel err {err.max():.2e})")
        net_counts = implied

    at_risk = AtRiskPopulation.from_history(pop, net_counts)

    imr_obs = omr_obs = None
    if inflow is not None:
        with np.errstate(invalid="ignore"):
            imr_vals = RATE_SCALE * inflow / (at_risk.totals * PERIOD_YEARS)
            omr_vals = RATE_SCALE * outflow / (at_risk.totals * PERIOD_YEARS)
        imr_obs = RatePanel(RateKind.IMR, countries, periods, imr_vals)
        omr_obs = RatePanel(RateKind.OMR, countries, periods, omr_vals)
        check_rate_identity(nmr, imr_obs, omr_obs, rtol=1e-9)

    if paths.schedule is not None:
        try:
            sched, checksum = load_schedule(paths.schedule, pop.ages)
        except DomainError as exc:
            raise SchemaError(f"{paths.schedule}: schedule does not fit the "
                              f"population age grid: {exc}") from None
    else:
        try:
            sched, checksum = packaged_default(pop.ages)
        except DomainError as exc:
            raise SchemaError(f"no schedule file given and the packaged default "
                              f"does not fit this age grid: {exc}") from None

    meta = default_meta(countries)
    if paths.countries is not None:
        meta.update(read_countries(paths.countries))

    vitals = read_vitals(paths.vitals, countries, pop.ages, srb=srb)
    for p in periods:
        if p not in vitals.periods:
            raise SchemaError(f"vital rates missing historic period {p}")

    return Dataset(pop=pop, nmr=nmr, vitals=vitals, schedule=sched,
                   schedule_checksum=checksum, meta=meta, include=include,
                   at_risk=at_risk, net_counts=net_counts,
                   inflow_counts=inflow, outflow_counts=outflow,
                   imr_obs=imr_obs, omr_obs=omr_obs)


# ---------------------------------------------------------------------------
# emission
# ---------------------------------------------------------------------------

def write_rate_panel(path, panel: RatePanel) -> None:
    rows = []
    for i, c in enumerate(panel.countries):
        for t, p in enumerate(panel.periods):
            v = panel.values[i, t]
            if not np.isnan(v):
                rows.append((c, p, v))
    pd.DataFrame(rows, columns=["country", "period_start", "value"]).to_csv(path, index=False)


def write_masi(path, index) -> None:
    """Emit country and world index series with their baseline ratios."""
    rows = []
    cr = index.country_ratios()
    wr = index.world_ratios()
    for i, c in enumerate(index.countries):
        for t, p in enumerate(index.periods):
            rows.append((c, p, index.country_values[i, t], cr[i, t]))
    for t, p in enumerate(index.periods):
        rows.append(("WORLD", p, index.world_values[t], wr[t]))
    pd.DataFrame(rows, columns=["country", "period_start", "index_value",
                                "ratio_to_baseline"]).to_csv(path, index=False)


def write_trajectories(outdir, ts: TrajectorySet) -> list[str]:
    """Emit per-trajectory series; returns the filenames written."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    J, C, H = ts.nmr.shape[0], len(ts.countries), len(ts.period_starts)
    tj = np.repeat(np.arange(J), C * H)
    cc = np.tile(np.repeat(np.asarray(ts.countries), H), J)
    pp = np.tile(np.asarray(ts.period_starts), J * C)
    rates = pd.DataFrame({
        "trajectory": tj, "country": cc, "period_start": pp,
        "inflow": ts.inflow.ravel(), "outflow": ts.outflow.ravel(),
        "net": ts.net.ravel(), "nmr": ts.nmr.ravel(),
        "nmr_star": ts.nmr_star.ravel(), "masi_ratio": ts.masi_ratio.ravel(),
    })
    rates.to_csv(outdir / "trajectories_rates.csv", index=False)
    written.append("trajectories_rates.csv")

    years = np.asarray(ts.years)
    tj = np.repeat(np.arange(J), C * len(years))
    cc = np.tile(np.repeat(np.asarray(ts.countries), len(years)), J)
    yy = np.tile(years, J * C)
    pops = pd.DataFrame({"trajectory": tj, "country": cc, "year": yy,
                         "population": ts.pop_totals.ravel()})
    pops.to_csv(outdir / "trajectories_population.csv", index=False)
    written.append("trajectories_population.csv")

    tj = np.repeat(np.arange(J), H)
    pp = np.tile(np.asarray(ts.period_starts), J)
    world = pd.DataFrame({"trajectory": tj, "period_start": pp,
                          "world_masi_ratio": ts.world_ratio.ravel()})
    world.to_csv(outdir / "trajectories_world.csv", index=False)
    written.append("trajectories_world.csv")

    if ts.pop_age is not None:
        A = len(ts.age_lower)
        tj = np.repeat(np.arange(J), C * len(years) * A * 2)
        cc = np.tile(np.repeat(np.asarray(ts.countries), len(years) * A * 2), J)
        yy = np.tile(np.repeat(years, A * 2), J * C)
        aa = np.tile(np.repeat(np.asarray(ts.age_lower), 2), J * C * len(years))
        ss = np.tile(np.asarray(SEXES), J * C * len(years) * A)
        detail = pd.DataFrame({"trajectory": tj, "country": cc, "year": yy,
                               "age_lower": aa, "sex": ss,
                               "population": ts.pop_age.ravel()})
        detail.to_csv(outdir / "trajectories_population_age.csv", index=False)
        written.append("trajectories_population_age.csv")
    return written


def write_quantiles(path, frame: pd.DataFrame) -> None:
    frame.to_csv(path, index=False)


def write_posterior(outdir, posterior) -> list[str]:
    """Emit posterior draws plus a JSON metadata block."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    posterior.to_frame().to_csv(outdir / "posterior_draws.csv", index=False)
    diag = posterior.diagnostics
    meta = {
        "seed": posterior.seed,
        "n_draws": posterior.n_draws,
        "countries": list(posterior.countries),
        "rhat": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                 for k, v in diag["rhat"].items()},
        "accept_phi": diag["accept_phi"].tolist(),
        "accept_sigma": diag["accept_sigma"].tolist(),
        "warnings": list(diag["warnings"]),
        "config": {k: v for k, v in asdict(posterior.config).items()},
    }
    with open(outdir / "posterior_meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ["posterior_draws.csv", "posterior_meta.json"]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class Manifest:
    """Recorded provenance of one run: config, inputs, outputs, warnings.

    Re-running the same command with the same config and inputs reproduces
    every output file byte for byte; the manifest itself carries the wall
    time and is the one file allowed to differ.
    """

    command: str
    config: dict
    config_hash: str
    seed: int
    engine_version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)
