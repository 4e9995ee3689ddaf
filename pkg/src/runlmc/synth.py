"""Synthetic athlete populations drawn from a three-component log-time model.

Each athlete gets independent Gaussian coefficients ``(l1, l2, l3)`` and
log-times ``l1*f1(s) + l2*f2(s) + l3*f3(s) + noise``. The default
components are synthetic reference shapes, not fitted ones:

* ``f1`` is the normalized ``log(s / s_ref)``; an athlete with only this
  component runs an exact individual power law ``t = (s / s_ref)**alpha``
  with ``alpha = l1 / ||log(s / s_ref)||``.
* ``f2`` is a smooth step around 800 m (speed vs endurance).
* ``f3`` is a bump at middle distances (middle-distance specialization).

``f2`` and ``f3`` are orthogonalized against the preceding components and
signed to be positive at the longest event.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .datamodel import AthleteMeta, EventCatalog, Parameterization, PerformanceTable
from .errors import DataError

REFERENCE_LENGTH = 10.8  # meters; puts the median athlete near 35 min for 10 km
MEDIAN_EXPONENT = 1.12
EXPONENT_P05, EXPONENT_P95 = 1.10, 1.15


def _orthonormalize(v: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    for b in basis:
        v = v - (v @ b) * b
    return v / np.linalg.norm(v)


def reference_components(catalog: EventCatalog | None = None) -> np.ndarray:
    """3 x n_events array of the default unit-norm, mutually orthogonal components."""
    catalog = catalog or EventCatalog.default()
    logd = catalog.log_distances
    x = np.log(catalog.distances / REFERENCE_LENGTH)
    f1 = x / np.linalg.norm(x)
    f2 = _orthonormalize(np.tanh(logd - np.log(800.0)), [f1])
    f2 *= np.sign(f2[-1])
    f3 = _orthonormalize(-np.exp(-0.5 * (logd - np.log(800.0)) ** 2), [f1, f2])
    f3 *= np.sign(f3[-1])
    return np.vstack([f1, f2, f3])


def exponent_scale(catalog: EventCatalog | None = None) -> float:
    """Factor turning an ``f1`` coefficient into a power-law exponent."""
    catalog = catalog or EventCatalog.default()
    return 1.0 / float(np.linalg.norm(np.log(catalog.distances / REFERENCE_LENGTH)))


def _default_means() -> tuple[float, ...]:
    return (MEDIAN_EXPONENT / exponent_scale(), 0.0, 0.0)


def _default_stds() -> tuple[float, ...]:
    # 5th..95th percentile of the exponent spans EXPONENT_P05..EXPONENT_P95
    sd_alpha = (EXPONENT_P95 - EXPONENT_P05) / (2 * 1.6448536269514722)
    return (sd_alpha / exponent_scale(), 0.2, 0.1)


@dataclass(frozen=True)
class SynthSpec:
    n_athletes: int = 1000
    noise_std: float = 0.01
    seed: int = 0
    coef_means: tuple[float, ...] = field(default_factory=_default_means)
    coef_stds: tuple[float, ...] = field(default_factory=_default_stds)
    components: np.ndarray | None = None  # r x n_events, unit norm rows
    catalog: EventCatalog = field(default_factory=EventCatalog.default)

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.n_athletes < 1:
            raise ValueError("n_athletes must be >= 1")
        comps = self.resolved_components()
        if not np.allclose(np.linalg.norm(comps, axis=1), 1.0, atol=1e-9):
            raise ValueError("components must have unit norm")
        if not (len(self.coef_means) == len(self.coef_stds) == comps.shape[0]):
            raise ValueError("one coefficient mean and std per component is required")
        if any(s < 0 for s in self.coef_stds):
            raise ValueError("coefficient stds must be >= 0")

    def resolved_components(self) -> np.ndarray:
        if self.components is None:
            return reference_components(self.catalog)
        return np.atleast_2d(np.asarray(self.components, dtype=float))


def draw_coefficients(spec: SynthSpec) -> np.ndarray:
    gen = seeding.rng(spec.seed, seeding.STAGE_SYNTH_COEF)
    z = gen.standard_normal((spec.n_athletes, len(spec.coef_means)))
    return np.asarray(spec.coef_means) + z * np.asarray(spec.coef_stds)


def generate(spec: SynthSpec) -> PerformanceTable:
    """A complete log-time table drawn from the component model."""
    comps = spec.resolved_components()
    coef = draw_coefficients(spec)
    values = coef @ comps
    if spec.noise_std > 0:
        gen = seeding.rng(spec.seed, seeding.STAGE_SYNTH_NOISE)
        values = values + spec.noise_std * gen.standard_normal(values.shape)
    return PerformanceTable(
        values=values,
        catalog=spec.catalog,
        athletes=tuple(AthleteMeta(i) for i in range(spec.n_athletes)),
        parameterization=Parameterization.LOG_TIME,
    )


def missingness_mask(shape: tuple[int, int], scheme: str, k: int, seed: int) -> np.ndarray:
    """Boolean mask of entries to hide.

    ``uniform_k``: exactly ``k`` uniformly chosen entries per row are hidden.
    ``consecutive_k``: a uniformly placed window of ``k`` adjacent events is
    kept per row and everything else hidden.
    """
    n, m = shape
    if not 0 <= k <= m:
        raise DataError(f"k must be in [0, {m}]")
    gen = seeding.rng(seed, seeding.STAGE_MISSING)
    hide = np.zeros(shape, bool)
    if scheme == "uniform_k":
        keys = gen.random(shape)
        order = np.argsort(keys, axis=1)[:, :k]
        np.put_along_axis(hide, order, True, axis=1)
    elif scheme == "consecutive_k":
        if k == 0:
            hide[:] = True
            return hide
        starts = gen.integers(0, m - k + 1, size=n)
        cols = np.arange(m)
        hide = (cols < starts[:, None]) | (cols >= starts[:, None] + k)
    else:
        raise DataError(f"unknown missingness scheme {scheme!r}")
    return hide


def apply_missingness(table: PerformanceTable, scheme: str, k: int, seed: int) -> PerformanceTable:
    return table.mask(missingness_mask(table.shape, scheme, k, seed))


def replicate_pattern(template: PerformanceTable, table: PerformanceTable | None = None) -> np.ndarray:
    """The template's missingness mask (True = missing), checked against ``table``."""
    mask = np.isnan(template.values)
    if table is not None and table.shape != template.shape:
        raise DataError(f"shape mismatch: template {template.shape} vs table {table.shape}")
    return mask


def variable_density_mask(
    shape: tuple[int, int], counts: np.ndarray | list[int], seed: int
) -> np.ndarray:
    """Hide all but ``counts[i]`` uniformly chosen entries of row ``i``."""
    n, m = shape
    counts = np.asarray(counts, dtype=int)
    if counts.shape != (n,) or np.any(counts < 0) or np.any(counts > m):
        raise DataError("one observed count in [0, n_events] per row is required")
    gen = seeding.rng(seed, seeding.STAGE_MISSING, 1)
    ranks = np.argsort(np.argsort(gen.random(shape), axis=1), axis=1)
    return ranks >= counts[:, None]
