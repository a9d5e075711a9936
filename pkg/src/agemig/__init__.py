"""Age-standardized probabilistic migration and population forecasting."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    AgeGrid,
    AgeSchedule,
    AtRiskPopulation,
    ConvergenceError,
    CountryGroup,
    CountryMeta,
    DomainError,
    PeriodAxis,
    PopulationGrid,
    RateKind,
    RatePanel,
    SchemaError,
    net_migration_rate,
)
from .masi import Masi, masi  # noqa: F401
