"""Analyses built on completed performance curves.

* ``fair_race``: distance at which two athletes' predicted curves cross.
* ``pivot_experiment``: how a slower time at one distance shifts the rank-2
  prediction two events further on.
* ``optimal_distance``: the event where an athlete would reach their best
  percentile.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .baselines import Predictor
from .datamodel import (
    Parameterization,
    PerformanceTable,
    percentile_of,
    reparameterize,
)
from .errors import DataError, InsufficientData
from .lmc import LmcConfig, lmc_estimate


def predicted_curve(table: PerformanceTable, row: int, predictor: Predictor) -> np.ndarray:
    """The row in table units with every missing event predicted."""
    out = np.array(table.values[row])
    for j in np.flatnonzero(np.isnan(out)):
        out[j] = predictor.predict(table, row, int(j))
    return out


def _log_times(table: PerformanceTable, values: np.ndarray) -> np.ndarray:
    return np.log([table.value_to_time(v, j) for j, v in enumerate(values)])


@dataclass(frozen=True)
class FairRaceResult:
    distance: float
    ci_low: float
    ci_high: float
    bracket: tuple[int, int]  # catalog columns around the crossing
    n_crossings: int = 1
    n_boot_used: int = 0


def crossing(log_distances: np.ndarray, log_a: np.ndarray, log_b: np.ndarray) -> tuple[float, tuple[int, int], int]:
    """Shortest crossing of two log-time curves, interpolated linearly in log-distance.

    Returns ``(log distance, bracketing columns, number of sign changes)``.
    """
    diff = np.asarray(log_a, dtype=float) - np.asarray(log_b, dtype=float)
    signs = np.sign(diff)
    nz = np.flatnonzero(signs != 0)
    if nz.size == 0 or np.all(signs[nz] == signs[nz[0]]):
        raise DataError("no fair race exists: one athlete is at least as fast at every event")
    changes = np.flatnonzero(signs[nz[1:]] != signs[nz[:-1]])
    k = nz[changes[0]]
    l = nz[changes[0] + 1]
    if l > k + 1:  # exact tie at an event between the two signs
        z = k + 1
        return float(log_distances[z]), (int(z), int(z)), int(changes.size)
    x0, x1 = log_distances[k], log_distances[l]
    t = diff[k] / (diff[k] - diff[l])
    return float(x0 + t * (x1 - x0)), (int(k), int(l)), int(changes.size)


def fair_race(table: PerformanceTable, athlete_a: int, athlete_b: int, predictor: Predictor,
              n_boot: int = 100, seed: int = 0, level: float = 0.90) -> FairRaceResult:
    """Distance at which athletes ``a`` and ``b`` are predicted to tie.

    Both curves are completed with ``predictor`` and compared in log-time
    against log-distance. The interval comes from re-running the procedure
    on tables whose other athletes are resampled with replacement (the two
    athletes themselves are kept).
    """
    if athlete_a == athlete_b:
        raise DataError("no fair race exists: the same athlete twice")
    logd = table.catalog.log_distances

    def solve(tab, ra, rb):
        la = _log_times(tab, predicted_curve(tab, ra, predictor))
        lb = _log_times(tab, predicted_curve(tab, rb, predictor))
        return crossing(logd, la, lb)

    x, bracket, n_cross = solve(table, athlete_a, athlete_b)
    lo_pair, hi_pair = sorted((athlete_a, athlete_b))
    others = np.array([i for i in range(table.n_athletes) if i not in (athlete_a, athlete_b)])
    boot = []
    if n_boot > 0 and others.size:
        gen = seeding.rng(seed, seeding.STAGE_FAIR_RACE, lo_pair, hi_pair)
        for _ in range(n_boot):
            rows = np.concatenate([[athlete_a, athlete_b], gen.choice(others, size=others.size)])
            sub = table.select_rows(rows)
            try:
                boot.append(solve(sub, 0, 1)[0])
            except DataError:
                continue
    alpha = (1 - level) / 2
    if boot:
        lo, hi = np.quantile(boot, [alpha, 1 - alpha])
        lo, hi = min(lo, x), max(hi, x)
    else:
        lo = hi = x
    return FairRaceResult(math.exp(x), math.exp(lo), math.exp(hi), bracket, n_cross, len(boot))


# ---------------------------------------------------------------------------
# pivot experiment


@dataclass
class PivotResult:
    epsilons: np.ndarray
    benchmarks: np.ndarray  # equivalent times per event, seconds
    triples: list[tuple[int, int, int]]
    relative_change: np.ndarray  # n_triples x n_epsilons, signed, in time units
    labels: list[str] = field(default_factory=list)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("triple\t" + "\t".join(f"{e + 0.0:+.2f}" for e in self.epsilons) + "\n")
        for (a, b, c), row in zip(self.triples, self.relative_change):
            name = f"{self.labels[a]}>{self.labels[b]}>{self.labels[c]}"
            buf.write(name + "\t" + "\t".join(f"{v:.6g}" for v in row) + "\n")
        return buf.getvalue()


def equivalent_benchmarks(table: PerformanceTable, marathon_seconds: float, config: LmcConfig) -> np.ndarray:
    """Times equivalent to a marathon time at every event, chained downward by rank-1 LMC."""
    logt = table if table.parameterization is Parameterization.LOG_TIME else reparameterize(
        table, Parameterization.LOG_TIME
    )
    m = logt.n_events
    out = np.full(m, np.nan)
    out[m - 1] = marathon_seconds
    cfg = replace(config, rank=1, event_selection="log_closest")
    for j in range(m - 2, -1, -1):
        query = np.full(m, np.nan)
        query[j + 1] = math.log(out[j + 1])
        aug = logt.append_rows(query)
        est = lmc_estimate(aug, aug.n_athletes - 1, j, cfg, events=(j + 1,)).estimate
        out[j] = math.exp(est)
    return out


def pivot_triples(table: PerformanceTable, skip: tuple[str, ...] = ("Mile",)) -> list[tuple[int, int, int]]:
    skip_idx = {table.catalog.index(s) for s in skip if _has_event(table, s)}
    cols = [j for j in range(table.n_events) if j not in skip_idx]
    return [(cols[k - 1], cols[k], cols[k + 1]) for k in range(1, len(cols) - 1)]


def _has_event(table, label) -> bool:
    try:
        table.catalog.index(label)
        return True
    except KeyError:
        return False


def pivot_experiment(table: PerformanceTable, marathon_seconds: float,
                     epsilons: np.ndarray | None = None, config: LmcConfig | None = None) -> PivotResult:
    """Relative change of the rank-2 prediction at ``s[i+1]`` when ``t[i-1]`` is scaled by ``1 + eps``.

    For each triple of consecutive events (the Mile excluded), a query
    athlete holds the equivalent benchmark times at ``s[i-1]`` and ``s[i]``;
    the change in the predicted time at ``s[i+1]`` is reported relative to
    the unperturbed prediction. The same seed is used for both predictions,
    so ``eps = 0`` gives exactly zero.
    """
    config = config or LmcConfig(rank=2)
    cfg = replace(config, rank=2, event_selection="log_closest")
    epsilons = np.round(np.arange(-0.10, 0.1001, 0.01), 10) + 0.0 if epsilons is None else np.asarray(epsilons, float)
    logt = table if table.parameterization is Parameterization.LOG_TIME else reparameterize(
        table, Parameterization.LOG_TIME
    )
    bench = equivalent_benchmarks(logt, marathon_seconds, config)
    triples = pivot_triples(logt)
    m = logt.n_events
    out = np.zeros((len(triples), len(epsilons)))

    def predict(a, b, c, t_a):
        query = np.full(m, np.nan)
        query[a] = math.log(t_a)
        query[b] = math.log(bench[b])
        aug = logt.append_rows(query)
        return math.exp(lmc_estimate(aug, aug.n_athletes - 1, c, cfg, events=(b, a)).estimate)

    for n, (a, b, c) in enumerate(triples):
        base = predict(a, b, c, bench[a])
        for k, eps in enumerate(epsilons):
            out[n, k] = (predict(a, b, c, (1 + eps) * bench[a]) - base) / base
    return PivotResult(epsilons, bench, triples, out, logt.catalog.labels)


# ---------------------------------------------------------------------------
# optimal distance


def optimal_distance(table: PerformanceTable, athlete: int, predictor: Predictor) -> tuple[int, np.ndarray]:
    """Event where the athlete's completed curve reaches its best percentile.

    Each event's value is scored against the other athletes' observed
    entries in that column. Ties go to the shorter distance.
    """
    curve = predicted_curve(table, athlete, predictor)
    larger_is_slower = table.parameterization is not Parameterization.SPEED
    others = np.delete(table.values, athlete, axis=0)
    pct = np.full(table.n_events, np.nan)
    for j in range(table.n_events):
        col = others[:, j]
        if np.isnan(col).all():
            raise InsufficientData(f"no other athlete observed event {table.catalog.labels[j]}")
        pct[j] = percentile_of(col, curve[j], larger_is_slower=larger_is_slower)
    return int(np.argmax(pct)), pct
