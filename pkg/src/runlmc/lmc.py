"""Local low-rank matrix completion (LMC) of single table entries.

A missing entry of a rank-r table is predicted from (r+1) x (r+1) circuits:
sub-matrices formed by the query athlete plus r donor athletes on the
target event plus r source events. Each circuit's determinant is affine in
the unknown entry, so setting it to zero gives one candidate estimate; the
candidates from many randomly sampled circuits are combined by a weighted
mean.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding
from .datamodel import PerformanceTable
from .errors import DataError, InsufficientData

MAX_RANK = 4
_WEIGHT_CAP = 1e300


class DegenerateCircuit(DataError):
    """The circuit determinant does not depend on the unknown entry."""


@dataclass(frozen=True)
class LmcConfig:
    rank: int = 2
    n_circuits: int = 400
    degeneracy_tol: float = 1e-12
    seed: int = 0
    event_selection: str = "log_closest"  # or "bagged"
    bag_validation_rows: int = 50
    # "inverse": weight = 1 / (circuit variance proxy); "verbatim": the proxy itself
    weighting: str = "inverse"

    def __post_init__(self):
        if not 1 <= self.rank <= MAX_RANK:
            raise ValueError(f"rank must be in [1, {MAX_RANK}]")
        if self.n_circuits < 1:
            raise ValueError("n_circuits must be >= 1")
        if self.event_selection not in ("log_closest", "bagged"):
            raise ValueError(f"unknown event selection {self.event_selection!r}")
        if self.weighting not in ("inverse", "verbatim"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class CircuitSample:
    athlete_rows: tuple[int, ...]  # query row first
    event_cols: tuple[int, ...]  # target column first
    estimate: float
    weight: float


@dataclass
class LmcResult:
    estimate: float
    rank: int  # 0 when the column-mean fallback was used
    events: tuple[int, ...] = ()
    n_donors: int = 0
    estimates: np.ndarray = field(default_factory=lambda: np.empty(0))
    weights: np.ndarray = field(default_factory=lambda: np.empty(0))
    donor_tuples: np.ndarray = field(default_factory=lambda: np.empty((0, 0), dtype=int))

    def circuits(self, row: int, col: int) -> list[CircuitSample]:
        cols = (col, *self.events)
        return [
            CircuitSample((row, *map(int, t)), cols, float(m), float(w))
            for t, m, w in zip(self.donor_tuples, self.estimates, self.weights)
        ]


def _circuit_terms(blocks: np.ndarray, missing: tuple[int, int] = (0, 0)):
    a0 = blocks.copy()
    a1 = blocks.copy()
    i, j = missing
    a0[:, i, j] = 0.0
    a1[:, i, j] = 1.0
    d0 = np.linalg.det(a0)
    d1 = np.linalg.det(a1)
    # Hadamard bound of the cofactor: product of the other rows' norms on the other columns
    minor = np.delete(np.delete(blocks, i, axis=1), j, axis=2)
    scale = np.prod(np.linalg.norm(minor, axis=2), axis=1)
    return d0, d1, scale


def _estimates_and_weights(d0, d1, weighting: str = "inverse"):
    """Circuit estimates and weights from the determinants at x=0 and x=1.

    ``proxy = 1/|d0 + d1| + |d0| / (d0 - d1)**2`` grows as the circuit
    approaches degeneracy, so it is used as a variance proxy and inverted.
    ``weighting="verbatim"`` uses the proxy itself as the weight.
    """
    denom = d0 - d1
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        est = d0 / denom
        proxy = 1.0 / np.abs(d0 + d1) + np.abs(d0) / denom**2
    proxy = np.minimum(np.where(np.isnan(proxy), np.inf, proxy), _WEIGHT_CAP)
    if weighting == "verbatim":
        return est, proxy
    return est, 1.0 / proxy


def solve_circuit(
    a: np.ndarray,
    missing: tuple[int, int] = (0, 0),
    degeneracy_tol: float = 1e-12,
    weighting: str = "inverse",
) -> tuple[float, float]:
    """Solve ``det(a) = 0`` for the single unknown entry of a square circuit.

    Returns ``(estimate, weight)``. The value at ``missing`` is ignored.
    Raises :class:`DegenerateCircuit` when the determinant does not depend
    on the unknown entry (linearly dependent donor rows).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 2:
        raise DataError("a circuit is a square matrix of size >= 2")
    mask = np.ones(a.shape, bool)
    mask[missing] = False
    if not np.all(np.isfinite(a[mask])):
        raise DataError("circuit entries other than the unknown must be finite")
    d0, d1, scale = _circuit_terms(a[None], missing)
    if not abs(d0[0] - d1[0]) > degeneracy_tol * scale[0]:
        raise DegenerateCircuit("circuit determinant is independent of the unknown entry")
    est, w = _estimates_and_weights(d0, d1, weighting)
    return float(est[0]), float(w[0])


def select_events(available, target: int, log_distances: np.ndarray, k: int) -> tuple[int, ...]:
    """The ``k`` columns among ``available`` log-closest to ``target``.

    Ties in log-distance prefer the shorter event.
    """
    cand = [int(c) for c in available if int(c) != target]
    cand.sort(key=lambda c: ((log_distances[c] - log_distances[target]) ** 2, log_distances[c]))
    return tuple(cand[:k])


def _draw_tuples(gen: np.random.Generator, n_donors: int, r: int, k: int) -> np.ndarray:
    # k tuples of r distinct donor positions; duplicates across tuples allowed
    out = np.empty((0, r), dtype=np.int64)
    while len(out) < k:
        need = k - len(out)
        idx = gen.integers(0, n_donors, size=(max(2 * need, 8), r))
        if r > 1:
            s = np.sort(idx, axis=1)
            idx = idx[(np.diff(s, axis=1) != 0).all(axis=1)]
        out = np.vstack([out, idx[:need]])
    return out


def _weighted_mean(est: np.ndarray, w: np.ndarray) -> float:
    total = math.fsum(w)
    if total < 1e-300:
        return float(np.median(est))
    return math.fsum(w * est) / total


def _run_circuits(values, present, row, col, events, r, config, gen):
    """Sample and solve circuits at rank ``r``; ``None`` if no circuit is usable."""
    cols = np.array((col, *events))
    donors = np.flatnonzero(present[:, cols].all(axis=1))
    donors = donors[donors != row]
    if len(donors) < r:
        return None
    sub = values[:, cols]
    query = sub[row].copy()
    query[0] = 0.0
    est_parts, w_parts, t_parts = [], [], []
    accepted = attempts = 0
    max_attempts = 10 * config.n_circuits
    while accepted < config.n_circuits and attempts < max_attempts:
        k = min(config.n_circuits - accepted, max_attempts - attempts)
        tuples = _draw_tuples(gen, len(donors), r, k)
        attempts += k
        rows = donors[tuples]
        blocks = np.empty((k, r + 1, r + 1))
        blocks[:, 0, :] = query
        blocks[:, 1:, :] = sub[rows]
        d0, d1, scale = _circuit_terms(blocks)
        ok = np.abs(d0 - d1) > config.degeneracy_tol * scale
        if not ok.any():
            continue
        est, w = _estimates_and_weights(d0[ok], d1[ok], config.weighting)
        est_parts.append(est)
        w_parts.append(w)
        t_parts.append(rows[ok])
        accepted += int(ok.sum())
    if not accepted:
        return None
    est = np.concatenate(est_parts)
    w = np.concatenate(w_parts)
    return LmcResult(
        estimate=_weighted_mean(est, w),
        rank=r,
        events=tuple(events),
        n_donors=len(donors),
        estimates=est,
        weights=w,
        donor_tuples=np.vstack(t_parts),
    )


def _column_mean(values, present, row, col) -> float:
    ok = present[:, col].copy()
    ok[row] = False
    if not ok.any():
        raise InsufficientData(f"no observed entries in column {col}")
    return float(values[ok, col].mean())


def lmc_estimate(
    table: PerformanceTable,
    row: int,
    col: int,
    config: LmcConfig,
    *,
    events: tuple[int, ...] | None = None,
    source_cols: np.ndarray | None = None,
    allow_lower_rank: bool = False,
) -> LmcResult:
    """Full LMC result (estimate, rank used, circuit samples) for one entry.

    ``events`` fixes the source events instead of taking the log-closest
    ones. ``source_cols`` restricts which of the query row's entries may be
    used as sources (defaults to its present entries).
    """
    values = table.values
    present = ~np.isnan(values)
    if source_cols is None:
        source_cols = np.flatnonzero(present[row])
    source_cols = [int(c) for c in source_cols if int(c) != col]
    if events is not None:
        if len(events) != config.rank or not set(events) <= set(source_cols):
            raise DataError("fixed events must be observed for the athlete and match the rank")
    elif len(source_cols) < config.rank:
        if not allow_lower_rank or not source_cols:
            raise InsufficientData(
                f"insufficient attempts: rank {config.rank} needs {config.rank} observed events, "
                f"athlete has {len(source_cols)}"
            )
    gen = seeding.rng(config.seed, seeding.STAGE_LMC, row, col)
    top = min(config.rank, len(source_cols))
    for r in range(top, 0, -1):
        ev = events if (events is not None and r == config.rank) else select_events(
            source_cols, col, table.catalog.log_distances, r
        )
        res = _run_circuits(values, present, row, col, ev, r, config, gen)
        if res is not None:
            return res
    return LmcResult(estimate=_column_mean(values, present, row, col), rank=0)


def lmc_predict(table: PerformanceTable, row: int, col: int, config: LmcConfig) -> float:
    """Predict entry ``(row, col)`` with LMC at ``config.rank``.

    Falls back to lower ranks, then to the column mean, when too few
    complete donor rows exist. Deterministic given ``config.seed``.
    """
    if config.event_selection == "bagged":
        return lmc_predict_bagged(table, row, col, config)[0]
    return lmc_estimate(table, row, col, config).estimate


def lmc_predict_bagged(
    table: PerformanceTable, row: int, col: int, config: LmcConfig
) -> tuple[float, dict[tuple[int, ...], float]]:
    """Combine LMC over every size-r subset of the athlete's observed events.

    Subset weights are inverse mean squared errors from 5-fold
    cross-validation on other athletes who observed the target event and
    the subset's events. Returns the estimate and the normalized weights.
    """
    r = config.rank
    present = table.present
    source = [int(c) for c in np.flatnonzero(present[row]) if c != col]
    if len(source) < r:
        raise InsufficientData(
            f"insufficient attempts: rank {r} needs {r} observed events, athlete has {len(source)}"
        )
    subsets = list(itertools.combinations(sorted(source, key=lambda c: table.catalog.log_distances[c]), r))
    if len(subsets) == 1:
        base = replace(config, event_selection="log_closest")
        return lmc_estimate(table, row, col, base).estimate, {subsets[0]: 1.0}

    base = replace(config, event_selection="log_closest")
    preds = {}
    for s in subsets:
        preds[s] = lmc_estimate(table, row, col, base, events=s).estimate

    gen = seeding.rng(config.seed, seeding.STAGE_BAGGING, row, col)
    union = sorted({col, *source})
    pool = np.flatnonzero(present[:, union].all(axis=1))
    pool = pool[pool != row]
    mse = {}
    if len(pool) >= 5:
        pool = gen.permutation(pool)[: max(5, config.bag_validation_rows)]
        folds = np.array_split(pool, 5)
        for s in subsets:
            errs = []
            for fold in folds:
                hide = np.zeros(table.shape, bool)
                hide[fold, col] = True
                hide[row, :] = True  # the query athlete is never a donor for its own validation
                masked = table.mask(hide)
                for v in fold:
                    try:
                        est = lmc_estimate(masked, int(v), col, base, events=s).estimate
                    except InsufficientData:
                        continue
                    errs.append(est - table.values[v, col])
            mse[s] = float(np.mean(np.square(errs))) if errs else math.inf
    if not mse or all(math.isinf(m) for m in mse.values()):
        weights = {s: 1.0 / len(subsets) for s in subsets}
    else:
        inv = {s: (0.0 if math.isinf(m) else 1.0 / (m + 1e-300)) for s, m in mse.items()}
        total = math.fsum(inv.values())
        weights = {s: v / total for s, v in inv.items()}
    est = math.fsum(weights[s] * preds[s] for s in subsets)
    return est, weights


@dataclass
class ImputeReport:
    by_rank: dict[int, int] = field(default_factory=dict)
    column_mean: list[tuple[int, int]] = field(default_factory=list)
    second_pass: int = 0

    def to_json(self) -> dict:
        return {
            "by_rank": {str(k): v for k, v in sorted(self.by_rank.items())},
            "column_mean_fallback": [list(e) for e in self.column_mean],
            "imputed_with_imputed_donors": self.second_pass,
        }


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def impute_all(
    table: PerformanceTable, config: LmcConfig, *, threads: int = 1
) -> tuple[PerformanceTable, ImputeReport]:
    """Fill every missing entry by LMC; observed entries are left untouched.

    Entries are first imputed at the full rank from the observed data. Entries
    without enough complete donor rows are retried at the full rank with the
    first round's imputations admitted as donor values (the query athlete
    still predicts only from its own observed events), repeating while this
    makes progress. What remains falls back to lower ranks and finally to the
    column mean, which is listed in the report.
    """
    values = table.values
    observed = ~np.isnan(values)
    missing = [tuple(map(int, e)) for e in np.argwhere(~observed)]
    report = ImputeReport()
    if not missing:
        return table, report
    filled = np.array(values)
    strict = replace(config, event_selection="log_closest")

    def full_rank(current: PerformanceTable, entry):
        i, j = entry
        src = np.flatnonzero(observed[i])
        if len([c for c in src if c != j]) < strict.rank:
            return None
        res = lmc_estimate(current, i, j, strict, source_cols=src)
        return res if res.rank == strict.rank else None

    pending = missing
    current = table
    first = True
    while pending:
        results = _map(lambda e: full_rank(current, e), pending, threads)
        done = [(e, r) for e, r in zip(pending, results) if r is not None]
        if not done:
            break
        for (i, j), res in done:
            filled[i, j] = res.estimate
            report.by_rank[strict.rank] = report.by_rank.get(strict.rank, 0) + 1
            if not first:
                report.second_pass += 1
        pending = [e for e, r in zip(pending, results) if r is None]
        current = table.with_values(filled)
        first = False

    def fallback(entry):
        i, j = entry
        src = np.flatnonzero(observed[i])
        if len([c for c in src if c != j]) == 0:
            return LmcResult(estimate=_column_mean(values, observed, i, j), rank=0)
        return lmc_estimate(current, i, j, strict, source_cols=src, allow_lower_rank=True)

    for (i, j), res in zip(pending, _map(fallback, pending, threads)):
        filled[i, j] = res.estimate
        report.by_rank[res.rank] = report.by_rank.get(res.rank, 0) + 1
        if res.rank == 0:
            report.column_mean.append((i, j))
    return table.with_values(filled), report
