"""Command line entry points.

Subcommands cover the pipeline stages (decompose, standardize, fit,
forecast), the rolling-origin backtest, re-summarizing a finished run
(report) and generating synthetic worlds (synth).  Every run writes its
files plus a manifest.json recording the resolved configuration, input
checksums and output checksums; re-running with the same configuration
and inputs reproduces every output byte for byte, the manifest's wall
time aside.

Exit codes: 0 on success, 2 on input or configuration problems, 3 on
numeric failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .core import ConvergenceError, DomainError, SchemaError
from .io import (
    InputPaths,
    Manifest,
    config_hash,
    file_sha256,
    ingest,
    write_masi,
    write_posterior,
    write_quantiles,
    write_rate_panel,
    write_trajectories,
)
from .nmr_model import McmcConfig
from .pipeline import decompose_history, fit_history, forecast, standardize_history
from .project import ForecastConfig
from .synth import SynthSpec, generate_world
from .validate import METHODS, BacktestPlan, run_backtest

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

DEFAULT_CONFIG = {
    "inputs": {"population": None, "nmr": None, "flows": None, "vitals": None,
               "schedule": None, "countries": None},
    "mode": "standardized",
    "seed": None,
    "baseline": None,
    "min_population": 100000.0,
    "srb": 1.05,
    "flows_required_from": 1990,
    "mcmc": {"chains": 2, "iterations": 2000, "burn_in": 1000, "thin": 1},
    "forecast": {"horizon": 16, "trajectories": 1000, "rebalance_weight": 0.5,
                 "keep_age_detail": False, "jobs": 1},
    "backtest": {"first_origin": 2000, "last_period": 2015,
                 "insample_first": 1950, "horizons": [1, 2, 3, 4],
                 "trajectories": 2000, "levels": [0.8, 0.95],
                 "methods": list(METHODS), "jobs": 1},
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise SchemaError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise SchemaError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise SchemaError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise SchemaError(f"config file {path} is not valid YAML: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise SchemaError(f"config file {path} must hold a mapping at the top level")
    return _merge(DEFAULT_CONFIG, raw)


def _input_paths(cfg: dict) -> InputPaths:
    inp = cfg["inputs"]
    for key in ("population", "nmr", "vitals"):
        if not inp.get(key):
            raise SchemaError(f"config inputs.{key} is required")
    return InputPaths(population=inp["population"], nmr=inp["nmr"],
                      vitals=inp["vitals"], flows=inp.get("flows"),
                      schedule=inp.get("schedule"), countries=inp.get("countries"))


def _ingest(cfg: dict):
    return ingest(_input_paths(cfg), min_population=float(cfg["min_population"]),
                  flows_required_from=int(cfg["flows_required_from"]),
                  srb=float(cfg["srb"]))


def _require_seed(cfg: dict) -> int:
    if cfg["seed"] is None:
        raise SchemaError("a seed is required (config key 'seed' or --seed)")
    return int(cfg["seed"])


def _outdir(args, command: str, cfg: dict) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        out = Path("runs") / f"{command}-{config_hash(cfg)[:12]}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(command: str, cfg: dict, outdir: Path, files: list[str],
              warnings: list[str], t0: float) -> None:
    inputs = {}
    for key, path in cfg.get("inputs", {}).items():
        if path:
            inputs[key] = file_sha256(path)
    outputs = {name: file_sha256(outdir / name) for name in sorted(files)}
    man = Manifest(command=command, config=cfg, config_hash=config_hash(cfg),
                   seed=int(cfg["seed"] or 0), inputs=inputs, outputs=outputs,
                   warnings=list(warnings), wall_time_s=time.monotonic() - t0)
    man.write(outdir / "manifest.json")
    for name in sorted(files) + ["manifest.json"]:
        print(f"wrote {outdir / name}")


def _mcmc_config(cfg: dict, seed: int, verbose: bool) -> McmcConfig:
    m = cfg["mcmc"]
    return McmcConfig(seed=seed, chains=int(m["chains"]),
                      iterations=int(m["iterations"]), burn_in=int(m["burn_in"]),
                      thin=int(m["thin"]), progress=verbose)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_decompose(args) -> int:
    cfg = load_config(args.config)
    t0 = time.monotonic()
    outdir = _outdir(args, "decompose", cfg)
    ds = _ingest(cfg)
    fit, imr, omr = decompose_history(ds)
    fit.save_report(outdir / "decomposition_fit.txt")
    write_rate_panel(outdir / "imr.csv", imr)
    write_rate_panel(outdir / "omr.csv", omr)
    warnings = [f"countries skipped in the fit: {fit.skipped_countries}"] \
        if fit.skipped_countries else []
    _manifest("decompose", cfg, outdir,
              ["decomposition_fit.txt", "imr.csv", "omr.csv"], warnings, t0)
    return EXIT_OK


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg = {**cfg, "seed": args.seed}
    if getattr(args, "mode", None):
        cfg = {**cfg, "mode": args.mode}
    if getattr(args, "jobs", None) is not None:
        cfg = {**cfg, "forecast": {**cfg["forecast"], "jobs": args.jobs},
               "backtest": {**cfg["backtest"], "jobs": args.jobs}}
    return cfg


def _standardize_files(hist, outdir: Path) -> list[str]:
    hist.fit_raw.save_report(outdir / "decomposition_fit.txt")
    hist.fit_star.save_report(outdir / "decomposition_fit_star.txt")
    write_masi(outdir / "masi.csv", hist.index)
    write_rate_panel(outdir / "imr.csv", hist.imr)
    write_rate_panel(outdir / "omr.csv", hist.omr)
    write_rate_panel(outdir / "imr_star.csv", hist.imr_star)
    write_rate_panel(outdir / "omr_star.csv", hist.omr_star)
    write_rate_panel(outdir / "nmr_star.csv", hist.nmr_star)
    return ["decomposition_fit.txt", "decomposition_fit_star.txt", "masi.csv",
            "imr.csv", "omr.csv", "imr_star.csv", "omr_star.csv", "nmr_star.csv"]


def cmd_standardize(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    t0 = time.monotonic()
    outdir = _outdir(args, "standardize", cfg)
    ds = _ingest(cfg)
    baseline = None if cfg["baseline"] is None else int(cfg["baseline"])
    hist = standardize_history(ds, mode=cfg["mode"], baseline=baseline)
    files = _standardize_files(hist, outdir)
    _manifest("standardize", cfg, outdir, files, [], t0)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    t0 = time.monotonic()
    seed = _require_seed(cfg)
    outdir = _outdir(args, "fit", cfg)
    ds = _ingest(cfg)
    baseline = None if cfg["baseline"] is None else int(cfg["baseline"])
    hist = fit_history(ds, _mcmc_config(cfg, seed, args.verbose),
                       mode=cfg["mode"], baseline=baseline, verbose=args.verbose)
    files = _standardize_files(hist, outdir)
    files += write_posterior(outdir, hist.posterior)
    _manifest("fit", cfg, outdir, files, hist.posterior.diagnostics["warnings"], t0)
    return EXIT_OK


def cmd_forecast(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    t0 = time.monotonic()
    seed = _require_seed(cfg)
    outdir = _outdir(args, "forecast", cfg)
    ds = _ingest(cfg)
    baseline = None if cfg["baseline"] is None else int(cfg["baseline"])
    ss = np.random.SeedSequence([seed, 1])
    fit_seed, path_seed = [int(s) for s in ss.generate_state(2)]
    hist = fit_history(ds, _mcmc_config(cfg, fit_seed, args.verbose),
                       mode=cfg["mode"], baseline=baseline, verbose=args.verbose)
    f = cfg["forecast"]
    fc = ForecastConfig(seed=path_seed, horizon=int(f["horizon"]),
                        trajectories=int(f["trajectories"]), mode=cfg["mode"],
                        rebalance_weight=float(f["rebalance_weight"]),
                        keep_age_detail=bool(f["keep_age_detail"]),
                        jobs=int(f["jobs"]))
    ts = forecast(hist, fc, verbose=args.verbose)
    files = _standardize_files(hist, outdir)
    files += write_posterior(outdir, hist.posterior)
    files += write_trajectories(outdir, ts)
    write_quantiles(outdir / "quantiles.csv", ts.quantiles())
    files.append("quantiles.csv")
    warnings = list(hist.posterior.diagnostics["warnings"])
    clamped = float(ts.clamp_mass.sum())
    if clamped > 0.0:
        warnings.append(f"outflows clamped to available population: "
                        f"{clamped:.3f} persons across all trajectories")
    _manifest("forecast", cfg, outdir, files, warnings, t0)
    return EXIT_OK


def cmd_backtest(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    t0 = time.monotonic()
    seed = _require_seed(cfg)
    outdir = _outdir(args, "backtest", cfg)
    ds = _ingest(cfg)
    b = cfg["backtest"]
    plan = BacktestPlan.standard(first_origin=int(b["first_origin"]),
                                 last_period=int(b["last_period"]),
                                 insample_first=int(b["insample_first"]),
                                 horizons=tuple(int(k) for k in b["horizons"]))
    report = run_backtest(ds, seed=seed, plan=plan,
                          methods=tuple(b["methods"]),
                          trajectories=int(b["trajectories"]),
                          levels=tuple(float(v) for v in b["levels"]),
                          jobs=int(b["jobs"]), verbose=args.verbose)
    report.to_frame().to_csv(outdir / "backtest_metrics.csv", index=False)
    report.details.to_csv(outdir / "backtest_details.csv", index=False)
    _manifest("backtest", cfg, outdir,
              ["backtest_metrics.csv", "backtest_details.csv"], [], t0)
    return EXIT_OK


def _requantile(df: pd.DataFrame, keys: list[str], levels) -> pd.DataFrame:
    qs = sorted(set(levels) | {0.5})
    named = {0.5: "median"}
    for q in qs:
        if q != 0.5:
            named[q] = f"q{q * 100:g}".replace(".", "_")
    value_cols = [c for c in df.columns if c not in keys + ["trajectory"]]
    frames = []
    for var in value_cols:
        wide = df.pivot_table(index="trajectory", columns=keys, values=var,
                              sort=True)
        vals = np.quantile(wide.to_numpy(), qs, axis=0)
        out = pd.DataFrame(list(wide.columns), columns=keys)
        out.insert(len(keys), "variable", var)
        for qi, q in enumerate(qs):
            out[named[q]] = vals[qi]
        frames.append(out)
    return pd.concat(frames, ignore_index=True)


def cmd_report(args) -> int:
    rundir = Path(args.run)
    rates_path = rundir / "trajectories_rates.csv"
    pops_path = rundir / "trajectories_population.csv"
    if not rates_path.exists() or not pops_path.exists():
        raise SchemaError(f"{rundir} does not hold trajectory files; "
                          "run the forecast subcommand first")
    levels = tuple(float(v) for v in args.levels.split(","))
    if any(not 0.0 < v < 1.0 for v in levels):
        raise SchemaError("interval levels must lie strictly between 0 and 1")
    points = []
    for lv in levels:
        # snap the interval bounds to clean decimals so a rebuilt report
        # lands on the same quantile positions as the original run
        points += [round((1.0 - lv) / 2.0, 12), round(1.0 - (1.0 - lv) / 2.0, 12)]
    rates = pd.read_csv(rates_path, float_precision="round_trip")
    pops = pd.read_csv(pops_path, float_precision="round_trip")
    qr = _requantile(rates, ["country", "period_start"], points)
    qr = qr.rename(columns={"period_start": "year"})
    qp = _requantile(pops, ["country", "year"], points)
    parts = [qr, qp]
    world_path = rundir / "trajectories_world.csv"
    if world_path.exists():
        world = pd.read_csv(world_path, float_precision="round_trip")
        qw = _requantile(world, ["period_start"], points)
        qw = qw.rename(columns={"period_start": "year"})
        qw.insert(0, "country", "WORLD")
        parts.append(qw[qr.columns])
    out = pd.concat(parts, ignore_index=True)
    out = out.sort_values(["variable", "country", "year"], kind="stable",
                          ignore_index=True)
    outdir = Path(args.out) if args.out else rundir
    outdir.mkdir(parents=True, exist_ok=True)
    out.to_csv(outdir / "report_quantiles.csv", index=False)
    print(f"wrote {outdir / 'report_quantiles.csv'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    t0 = time.monotonic()
    spec = SynthSpec(seed=args.seed, n_countries=args.countries,
                     n_age_groups=args.age_groups, first_year=args.first_year,
                     last_year=args.last_year, vitals_through=args.vitals_through,
                     gcc=args.gcc, small_country=args.small_country,
                     zero_migration=args.zero_migration,
                     aging_strength=args.aging_strength,
                     gross_level=args.gross_level)
    world = generate_world(spec)
    outdir = Path(args.out)
    world.emit(outdir)
    cfg = {"synth": {k: getattr(spec, k) for k in spec.__dataclass_fields__}}
    files = ["population.csv", "nmr.csv", "flows.csv", "vitals.csv",
             "countries.csv", "truth_gross.csv", "truth_spec.json"]
    outputs = {name: file_sha256(outdir / name) for name in files}
    man = Manifest(command="synth", config=cfg, config_hash=config_hash(cfg),
                   seed=spec.seed, outputs=outputs,
                   wall_time_s=time.monotonic() - t0)
    man.write(outdir / "manifest.json")
    for name in files + ["manifest.json"]:
        print(f"wrote {outdir / name}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="agemig",
        description="Probabilistic migration forecasting with age-composition "
                    "standardization.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, jobs=False):
        sp.add_argument("--config", required=True, help="YAML configuration file")
        sp.add_argument("--out", help="output directory (default: runs/<command>-<hash>)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--mode", choices=("standardized", "agnostic"),
                        help="override the config mode")
        if jobs:
            sp.add_argument("--jobs", type=int, help="worker processes")
        sp.add_argument("--verbose", action="store_true")

    sp = sub.add_parser("decompose", help="fit and apply the in/out decomposition")
    add_common(sp)
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("standardize", help="decompose and age-standardize history")
    add_common(sp)
    sp.set_defaults(func=cmd_standardize)

    sp = sub.add_parser("fit", help="standardize and sample the rate process")
    add_common(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("forecast", help="fit and simulate the forecast ensemble")
    add_common(sp, jobs=True)
    sp.set_defaults(func=cmd_forecast)

    sp = sub.add_parser("backtest", help="rolling-origin accuracy evaluation")
    add_common(sp, jobs=True)
    sp.set_defaults(func=cmd_backtest)

    sp = sub.add_parser("report", help="recompute quantiles from stored trajectories")
    sp.add_argument("--run", required=True, help="directory of a forecast run")
    sp.add_argument("--out", help="output directory (default: the run directory)")
    sp.add_argument("--levels", default="0.8,0.95",
                    help="comma-separated interval levels")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("synth", help="generate a synthetic world")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--countries", type=int, default=20)
    sp.add_argument("--age-groups", type=int, default=21)
    sp.add_argument("--first-year", type=int, default=1950)
    sp.add_argument("--last-year", type=int, default=2020)
    sp.add_argument("--vitals-through", type=int, default=2100)
    sp.add_argument("--gcc", action="store_true")
    sp.add_argument("--small-country", action="store_true")
    sp.add_argument("--zero-migration", action="store_true")
    sp.add_argument("--aging-strength", type=float, default=1.0)
    sp.add_argument("--gross-level", type=float, default=40.0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
