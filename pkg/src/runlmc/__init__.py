"""Running-performance prediction by local low-rank matrix completion."""

from .datamodel import EventCatalog, Parameterization, PerformanceTable, read_table, write_table
from .errors import DataError, InsufficientData, ParseError
from .lmc import LmcConfig, impute_all, lmc_predict, solve_circuit

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "EventCatalog",
    "InsufficientData",
    "LmcConfig",
    "Parameterization",
    "ParseError",
    "PerformanceTable",
    "impute_all",
    "lmc_predict",
    "read_table",
    "solve_circuit",
    "write_table",
]
