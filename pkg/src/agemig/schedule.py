"""Migration age schedules.

The default schedule is a discretized unimodal curve of the classic
migrant-age form: a labor-migration peak in the early twenties riding on a
declining childhood component (children move with their parents) plus a small
constant floor.  It is versioned data: the package ships it as a CSV and
:func:`default_schedule` reproduces it on any age grid.
"""
from __future__ import annotations

import hashlib
from importlib import resources

import numpy as np

from .core import AgeGrid, AgeSchedule, DomainError

SCHEDULE_VERSION = "1"

# Components evaluated at group midpoints: childhood decay, a double
# exponential labor peak (mode near 23), and a floor keeping old-age
# migration positive.
_CHILD_LEVEL = 0.020
_CHILD_DECAY = 0.08
_LABOR_LEVEL = 0.060
_LABOR_ONSET = 20.0
_LABOR_DECAY = 0.10
_LABOR_RAMP = 0.40
_FLOOR = 0.003


def _curve(midpoints: np.ndarray) -> np.ndarray:
    child = _CHILD_LEVEL * np.exp(-_CHILD_DECAY * midpoints)
    x = midpoints - _LABOR_ONSET
    labor = _LABOR_LEVEL * np.exp(-_LABOR_DECAY * x - np.exp(-_LABOR_RAMP * x))
    return child + labor + _FLOOR


def default_schedule(ages: AgeGrid) -> AgeSchedule:
    """Evaluate the default migration age profile on an age grid."""
    midpoints = ages.lower_bounds + ages.group_width / 2.0
    return AgeSchedule(_curve(midpoints.astype(float)), ages)


def load_schedule(path, ages: AgeGrid | None = None) -> tuple[AgeSchedule, str]:
    """Read an ``age_lower,weight`` CSV and return (schedule, checksum).

    The checksum is the SHA-256 of the raw file bytes, taken before
    normalization so provenance survives the renormalization step.  Lines
    starting with ``#`` are comments.
    """
    raw = open(path, "rb").read()
    checksum = hashlib.sha256(raw).hexdigest()
    lows: list[int] = []
    weights: list[float] = []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if text.lower().startswith("age_lower"):
            continue
        parts = text.split(",")
        if len(parts) != 2:
            raise DomainError(f"{path}:{lineno}: expected 'age_lower,weight', got {text!r}")
        lows.append(int(parts[0]))
        weights.append(float(parts[1]))
    if lows != sorted(lows) or any(b - a != 5 for a, b in zip(lows, lows[1:])):
        raise DomainError(f"{path}: age groups must ascend in 5-year steps")
    if ages is None:
        ages = AgeGrid(len(lows))
    if lows and lows[0] != 0:
        raise DomainError(f"{path}: schedule must start at age 0")
    return AgeSchedule(np.asarray(weights), ages), checksum


def packaged_default(ages: AgeGrid | None = None) -> tuple[AgeSchedule, str]:
    """Load the schedule CSV shipped with the package."""
    ref = resources.files("agemig.data").joinpath("default_age_schedule.csv")
    with resources.as_file(ref) as path:
        return load_schedule(path, ages)


def save_schedule(path, schedule: AgeSchedule) -> None:
    lows = (schedule.ages or AgeGrid(len(schedule))).lower_bounds
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# migration age schedule, version {SCHEDULE_VERSION}\n")
        fh.write("age_lower,weight\n")
        for lo, w in zip(lows, schedule.weights):
            fh.write(f"{int(lo)},{float(w)!r}\n")
