"""Low-rank model of a complete performance table.

The truncated SVD ``M ~ U S V^T`` of a complete (imputed) log-time table
gives event profiles ``f_i`` (rows of ``V^T``) and per-athlete coefficients
``lambda_i``, so that each athlete's log-time at distance ``s`` is
``sum_i lambda_i f_i(s)``. The first component is close to ``log s``: its
coefficient acts as an individual power-law exponent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import EventCatalog, Parameterization, PerformanceTable
from .errors import DataError


@dataclass(frozen=True)
class ComponentModel:
    components: np.ndarray  # r x n_events, orthonormal rows
    singular_values: np.ndarray  # r
    coefficients: np.ndarray  # n_athletes x r
    catalog: EventCatalog
    parameterization: Parameterization = Parameterization.LOG_TIME
    pure_u: bool = False  # coefficients are U entries without singular values

    @property
    def rank(self) -> int:
        return self.components.shape[0]

    def reconstruct(self) -> np.ndarray:
        coef = self.coefficients * self.singular_values if self.pure_u else self.coefficients
        return coef @ self.components

    def to_json(self) -> dict:
        return {
            "catalog": self.catalog.to_json(),
            "parameterization": self.parameterization.value,
            "components": self.components.tolist(),
            "singular_values": self.singular_values.tolist(),
            "coefficients": self.coefficients.tolist(),
            "coefficients_include_singular_values": not self.pure_u,
        }

    @classmethod
    def from_json(cls, data: dict) -> ComponentModel:
        return cls(
            components=np.array(data["components"], dtype=float),
            singular_values=np.array(data["singular_values"], dtype=float),
            coefficients=np.array(data["coefficients"], dtype=float),
            catalog=EventCatalog.from_json(data["catalog"]),
            parameterization=Parameterization(data["parameterization"]),
            pure_u=not data["coefficients_include_singular_values"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")


def _sign_reference(i: int, comp: np.ndarray, log_distances: np.ndarray) -> float:
    if i == 0:
        ref = float(comp @ (log_distances - log_distances.mean()))
    else:
        ref = float(comp[-1])
    if ref == 0.0:
        ref = float(comp[np.argmax(np.abs(comp))])
    return ref


def extract_components(table: PerformanceTable | np.ndarray, r: int, *, pure_u: bool = False,
                       catalog: EventCatalog | None = None) -> ComponentModel:
    """Rank-``r`` components of a complete table.

    ``f_i`` is the i-th right singular vector, signed so that ``f_1`` rises
    with log-distance and later components are positive at the longest
    event. Coefficients are ``U * S`` (or ``U`` alone with ``pure_u``).
    """
    if isinstance(table, PerformanceTable):
        values, catalog, param = table.values, table.catalog, table.parameterization
    else:
        values, param = np.asarray(table, dtype=float), Parameterization.LOG_TIME
        catalog = catalog or EventCatalog.default()
    if np.isnan(values).any():
        raise DataError("component extraction needs a complete table; impute first")
    u, s, vt = np.linalg.svd(values, full_matrices=False)
    numerical_rank = int(np.sum(s > max(values.shape) * np.finfo(float).eps * s[0])) if s.size else 0
    if not 1 <= r <= numerical_rank:
        raise DataError(f"rank {r} exceeds the table's numerical rank {numerical_rank}")
    u, s, vt = u[:, :r], s[:r], vt[:r]
    logd = catalog.log_distances
    for i in range(r):
        if _sign_reference(i, vt[i], logd) < 0:
            vt[i] *= -1
            u[:, i] *= -1
    coef = u if pure_u else u * s
    return ComponentModel(vt, s, coef, catalog, Parameterization(param), pure_u)


def individual_exponent_diagnostic(f1: np.ndarray, catalog: EventCatalog | None = None) -> tuple[float, float, float]:
    """Least-squares line of ``f1`` against log-distance: ``(slope, intercept, R^2)``.

    A constant profile has no explained variance and reports ``R^2 = 0``.
    """
    catalog = catalog or EventCatalog.default()
    x = catalog.log_distances
    y = np.asarray(f1, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot <= 1e-30 * max(1.0, float(np.sum(y**2))):
        return 0.0, float(y.mean()), 0.0
    return float(slope), float(intercept), 1.0 - float(np.sum(resid**2)) / ss_tot


def fit_world_records(record_log_times: np.ndarray, components: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares fit of a log-time vector on the first ``r`` components.

    Returns the fitted curve and the residuals.
    """
    y = np.asarray(record_log_times, dtype=float)
    basis = np.atleast_2d(np.asarray(components, dtype=float))[:r]
    if basis.shape[0] < r:
        raise DataError(f"only {basis.shape[0]} components available for rank {r}")
    coef, *_ = np.linalg.lstsq(basis.T, y, rcond=None)
    fitted = basis.T @ coef
    return fitted, y - fitted


@dataclass(frozen=True)
class ThreeNumberSummary:
    endurance: float  # lambda_1, individual exponent proxy
    speed_endurance_balance: float  # lambda_2
    middle_distance: float  # lambda_3

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.endurance, self.speed_endurance_balance, self.middle_distance)


def three_number_summary(model: ComponentModel, athlete_row: int) -> ThreeNumberSummary:
    if model.rank < 3:
        raise DataError("the three-number summary needs a model of rank 3 or more")
    if not 0 <= athlete_row < model.coefficients.shape[0]:
        raise DataError(f"athlete row {athlete_row} is not in the model")
    c = model.coefficients[athlete_row]
    return ThreeNumberSummary(float(c[0]), float(c[1]), float(c[2]))


def exponent_of(model: ComponentModel, athlete_row: int | None = None) -> np.ndarray | float:
    """First coefficient expressed as a power-law exponent.

    Uses the slope of ``f_1`` against log-distance; exact when ``f_1`` is
    proportional to centered log-distance up to a constant offset.
    """
    slope, _, _ = individual_exponent_diagnostic(model.components[0], model.catalog)
    lam1 = model.coefficients[:, 0] * (model.singular_values[0] if model.pure_u else 1.0)
    out = lam1 * slope
    return out if athlete_row is None else float(out[athlete_row])
