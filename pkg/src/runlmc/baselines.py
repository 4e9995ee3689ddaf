"""Comparison predictors for single missing performances.

Functional forms (``predict_mean``, ``riegel``, ``em_impute`` ...) do the
numerical work; the ``Predictor`` classes at the bottom wrap them behind one
interface, ``predict(table, row, col)``, so the validation harness can treat
every method alike.

Path-based methods (Riegel, Purdy, power laws) work in seconds and predict
from the athlete's attempted event closest in log-distance to the target.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.optimize import brentq

from . import seeding
from .datamodel import Parameterization, PerformanceTable, reparameterize
from .errors import DataError, InsufficientData
from .lmc import LmcConfig, lmc_predict

RIEGEL_EXPONENT = 1.06


# ---------------------------------------------------------------------------
# table-based baselines


def predict_mean(table: PerformanceTable, row: int, col: int) -> float:
    """Mean of the column's present entries, excluding the query row."""
    ok = table.present[:, col].copy()
    ok[row] = False
    if not ok.any():
        raise InsufficientData(f"no observed entries in column {col}")
    return float(table.values[ok, col].mean())


def _zscores(values: np.ndarray) -> np.ndarray:
    ok = ~np.isnan(values)
    counts = np.maximum(ok.sum(axis=0), 1)
    x = np.where(ok, values, 0.0)
    mean = x.sum(axis=0) / counts
    std = np.sqrt(np.where(ok, (x - mean) ** 2, 0.0).sum(axis=0) / counts)
    std = np.where(std > 0, std, 1.0)
    return (values - mean) / std


def knn_distances(table: PerformanceTable, row: int, col: int) -> tuple[np.ndarray, np.ndarray]:
    """Candidate rows and their distances to ``row``.

    Candidates observed ``col`` and share at least one other event with the
    query. The distance is the root mean square difference of per-event
    z-scores over the shared events.
    """
    z = _zscores(table.values)
    present = table.present
    shared = present & present[row]
    shared[:, col] = False
    counts = shared.sum(axis=1)
    cand = present[:, col] & (counts > 0)
    cand[row] = False
    rows = np.flatnonzero(cand)
    diff = np.where(shared[rows], z[rows] - z[row], 0.0)
    dist = np.sqrt((diff**2).sum(axis=1) / counts[rows])
    return rows, dist


def predict_knn(table: PerformanceTable, row: int, col: int, k: int = 5) -> float:
    """Mean target value of the ``k`` athletes nearest to ``row``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    rows, dist = knn_distances(table, row, col)
    if rows.size == 0:
        raise InsufficientData("no neighbour shares an event with the athlete")
    order = np.lexsort((rows, dist))[:k]
    return float(table.values[rows[order], col].mean())


# ---------------------------------------------------------------------------
# path-based baselines


def riegel(source_dist: float, source_time: float, target_dist: float,
           exponent: float = RIEGEL_EXPONENT) -> float:
    """Riegel's formula ``t2 = t1 * (d2 / d1) ** exponent``."""
    if min(source_dist, source_time, target_dist) <= 0:
        raise DataError("distances and times must be positive")
    return source_time * (target_dist / source_dist) ** exponent


def source_event(table: PerformanceTable, row: int, col: int) -> int:
    """The athlete's observed event closest in log-distance (ties: shorter)."""
    cols = [int(c) for c in np.flatnonzero(table.present[row]) if c != col]
    if not cols:
        raise InsufficientData("insufficient attempts: no other observed event")
    logd = table.catalog.log_distances
    return min(cols, key=lambda c: (abs(logd[c] - logd[col]), logd[c]))


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    coefficients: np.ndarray  # one c per fitted athlete, seconds * m**-exponent
    rss: float
    rows: np.ndarray  # table rows the coefficients belong to


def _log_points(table: PerformanceTable, row: int):
    ok = table.present[row]
    return np.log(table.distances[ok]), np.log(table.times()[row, ok])


def fit_power_law(table: PerformanceTable, per_athlete: bool = False, row: int | None = None) -> PowerLawFit:
    """Least-squares fit of ``log t = log c + alpha log s``.

    Global fit: one exponent shared by all athletes with two or more distinct
    events, each with its own intercept (profiled out). Individual fit
    (``per_athlete=True``): exponent and intercept for ``row`` alone.
    """
    if per_athlete:
        if row is None:
            raise ValueError("per_athlete fit needs a row")
        x, y = _log_points(table, row)
        if x.size < 2 or np.ptp(x) == 0:
            raise InsufficientData("individual power law needs two distinct events")
        xc, yc = x - x.mean(), y - y.mean()
        alpha = float(xc @ yc / (xc @ xc))
        c = math.exp(y.mean() - alpha * x.mean())
        rss = float(np.sum((yc - alpha * xc) ** 2))
        return PowerLawFit(alpha, np.array([c]), rss, np.array([row]))

    logt = np.log(table.times())
    logd = np.broadcast_to(table.catalog.log_distances, logt.shape)
    ok = table.present
    counts = ok.sum(axis=1)
    xs = np.where(ok, logd, 0.0)
    ys = np.where(ok, logt, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        xm = xs.sum(axis=1) / counts
        ym = ys.sum(axis=1) / counts
    xc = np.where(ok, logd - xm[:, None], 0.0)
    yc = np.where(ok, logt - ym[:, None], 0.0)
    sxx = (xc**2).sum(axis=1)
    usable = (counts >= 2) & (sxx > 0)
    if not usable.any():
        raise InsufficientData("global power law needs an athlete with two distinct events")
    alpha = float((xc[usable] * yc[usable]).sum() / sxx[usable].sum())
    rss = float(((yc[usable] - alpha * xc[usable]) ** 2).sum())
    coef = np.exp(ym[usable] - alpha * xm[usable])
    return PowerLawFit(alpha, coef, rss, np.flatnonzero(usable))


def predict_power_law(table: PerformanceTable, row: int, col: int, exponent: float | None = None) -> float:
    """Seconds for ``(row, col)`` from the log-closest event and a shared exponent.

    The exponent is fitted globally on ``table`` unless given.
    """
    src = source_event(table, row, col)
    if exponent is None:
        exponent = fit_power_law(table).exponent
    t = table.times()[row, src]
    return riegel(table.distances[src], t, table.distances[col], exponent)


def predict_individual_power_law(table: PerformanceTable, row: int, col: int) -> float:
    """Seconds from the athlete's own power law over all observed events."""
    sub = table.mask(_only_other_columns(table, col))
    fit = fit_power_law(sub, per_athlete=True, row=row)
    return float(fit.coefficients[0] * table.distances[col] ** fit.exponent)


def _only_other_columns(table: PerformanceTable, col: int) -> np.ndarray:
    hide = np.zeros(table.shape, bool)
    hide[:, col] = True
    return hide


# ---------------------------------------------------------------------------
# Purdy points


@dataclass(frozen=True)
class PurdyTable:
    """Running curve of 950-point standard velocities and the points formula.

    Points for time ``T`` at distance ``d`` are ``A * (T0 / T - B)`` with
    ``T0`` the standard time, ``k = k_intercept - k_slope * v0``,
    ``A = a_numerator / k`` and ``B = 1 - standard_points / A``.
    """

    distances: np.ndarray
    velocities: np.ndarray
    standard_points: float = 950.0
    k_intercept: float = 0.0654
    k_slope: float = 0.00258
    a_numerator: float = 85.0

    @classmethod
    def bundled(cls) -> PurdyTable:
        with resources.files("runlmc").joinpath("data/purdy.json").open() as fh:
            data = json.load(fh)
        return cls(
            distances=np.array([a["distance"] for a in data["anchors"]], dtype=float),
            velocities=np.array([a["velocity"] for a in data["anchors"]], dtype=float),
            standard_points=data["standard_points"],
            k_intercept=data["k_intercept"],
            k_slope=data["k_slope"],
            a_numerator=data["a_numerator"],
        )

    def standard(self, distance: float) -> tuple[float, float, float]:
        """``(T0, A, B)`` at ``distance``; log-velocity is interpolated linearly in log-distance."""
        if not self.distances[0] <= distance <= self.distances[-1]:
            raise DataError(
                f"distance {distance} m outside the scoring table "
                f"[{self.distances[0]}, {self.distances[-1]}]"
            )
        logv = np.interp(math.log(distance), np.log(self.distances), np.log(self.velocities))
        v0 = math.exp(logv)
        k = self.k_intercept - self.k_slope * v0
        a = self.a_numerator / k
        b = 1.0 - self.standard_points / a
        return distance / v0, a, b


_PURDY: PurdyTable | None = None


def _purdy() -> PurdyTable:
    global _PURDY
    if _PURDY is None:
        _PURDY = PurdyTable.bundled()
    return _PURDY


def purdy_points(distance: float, time: float, table: PurdyTable | None = None) -> float:
    if time <= 0:
        raise DataError("time must be positive")
    t0, a, b = (table or _purdy()).standard(distance)
    return a * (t0 / time - b)


def predict_purdy(source_dist: float, source_time: float, target_dist: float,
                  table: PurdyTable | None = None, xtol: float = 1e-9) -> float:
    """Time at ``target_dist`` scoring the same points, by bracketed root finding."""
    table = table or _purdy()
    points = purdy_points(source_dist, source_time, table)
    t0, _, _ = table.standard(target_dist)

    def gap(t):
        return purdy_points(target_dist, t, table) - points

    lo, hi = t0 * 1e-3, t0 * 1e3
    if gap(lo) * gap(hi) > 0:
        raise DataError(f"no time at {target_dist} m scores {points:.3f} points")
    return brentq(gap, lo, hi, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=500)


# ---------------------------------------------------------------------------
# EM for a multivariate Gaussian with missing entries


@dataclass
class EmResult:
    values: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    loglik: list[float] = field(default_factory=list)  # penalized, one per iteration
    iterations: int = 0
    converged: bool = False


def _pattern_groups(observed: np.ndarray) -> dict[bytes, np.ndarray]:
    keys = np.packbits(observed, axis=1)
    groups: dict[bytes, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k.tobytes(), []).append(i)
    return {k: np.array(v) for k, v in groups.items()}


def _em_step(x, observed, groups, mu, cov, ridge):
    """One E step at (mu, cov); returns the observed-data log-likelihood,
    the conditional-mean fill and the updated parameters."""
    n, d = x.shape
    filled = np.array(x)
    sxx = np.zeros((d, d))
    loglik = 0.0
    for rows in groups.values():
        o = observed[rows[0]]
        m = ~o
        if not o.any():
            filled[np.ix_(rows, np.flatnonzero(m))] = mu
            sxx += len(rows) * cov
            continue
        soo = cov[np.ix_(o, o)]
        chol = np.linalg.cholesky(soo)
        dev = x[np.ix_(rows, np.flatnonzero(o))] - mu[o]
        sol = np.linalg.solve(chol, dev.T)
        loglik += -0.5 * float((sol**2).sum()) - len(rows) * (
            float(np.log(np.diag(chol)).sum()) + 0.5 * o.sum() * math.log(2 * math.pi)
        )
        if m.any():
            smo = cov[np.ix_(m, o)]
            gain = np.linalg.solve(soo, smo.T).T  # smo @ inv(soo)
            filled[np.ix_(rows, np.flatnonzero(m))] = mu[m] + dev @ gain.T
            cond = cov[np.ix_(m, m)] - gain @ smo.T
            sxx[np.ix_(m, m)] += len(rows) * cond
    # penalty keeps the likelihood bounded; the M step below maximizes it exactly
    loglik -= 0.5 * n * ridge * float(np.trace(np.linalg.inv(cov)))
    new_mu = filled.mean(axis=0)
    dev = filled - new_mu
    new_cov = (dev.T @ dev + sxx) / n + ridge * np.eye(d)
    return loglik, filled, new_mu, new_cov


def em_impute(values: np.ndarray, *, tol: float = 1e-3, max_iter: int = 500) -> EmResult:
    """Gaussian EM imputation of the ``NaN`` entries of ``values``.

    Missing entries start at their column means. A fixed ridge of
    ``1e-8 * trace / dim`` of the starting covariance is added to every
    covariance estimate (a penalized likelihood, so the reported
    log-likelihood stays monotone). Stops when the relative increase of the
    log-likelihood falls below ``tol`` (0.1%) or after ``max_iter`` steps.
    """
    x = np.asarray(values, dtype=float)
    n, d = x.shape
    if n < 2:
        raise InsufficientData("EM needs at least two rows")
    observed = ~np.isnan(x)
    if not observed.any(axis=0).all():
        raise InsufficientData("EM needs every column observed at least once")
    mu = np.nanmean(x, axis=0)
    start = np.where(observed, x, mu)
    cov0 = np.cov(start, rowvar=False, bias=True)
    ridge = 1e-8 * max(float(np.trace(cov0)), 1e-300) / d
    cov = cov0 + ridge * np.eye(d)
    groups = _pattern_groups(observed)
    result = EmResult(values=start, mean=mu, cov=cov)
    if observed.all():
        loglik, _, _, _ = _em_step(x, observed, groups, mu, cov, ridge)
        result.loglik.append(loglik)
        result.values = np.array(x)
        result.converged = True
        return result
    for it in range(max_iter):
        loglik, filled, new_mu, new_cov = _em_step(x, observed, groups, mu, cov, ridge)
        result.values, result.mean, result.cov = filled, mu, cov
        result.loglik.append(loglik)
        result.iterations = it + 1
        if it > 0:
            prev = result.loglik[-2]
            if (loglik - prev) / max(abs(prev), 1e-300) < tol:
                result.converged = True
                break
        mu, cov = new_mu, new_cov
    return result


# ---------------------------------------------------------------------------
# nuclear-norm imputation (soft-impute)


@dataclass
class SoftImputeResult:
    values: np.ndarray  # completed matrix, column offsets added back
    low_rank: np.ndarray  # penalized part of the fit
    column_means: np.ndarray  # unpenalized per-column offsets
    objective: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _svt(w: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    u, s, vt = np.linalg.svd(w, full_matrices=False)
    s = np.maximum(s - lam, 0.0)
    keep = s > 0
    return (u[:, keep] * s[keep]) @ vt[keep], float(s.sum())


def _offsets(x, observed, counts, z):
    return np.where(observed, x - z, 0.0).sum(axis=0) / counts


def soft_impute(
    values: np.ndarray,
    lam: float,
    *,
    tol: float = 1e-6,
    max_iter: int = 5000,
    warm_start: np.ndarray | None = None,
) -> SoftImputeResult:
    """Minimize ``0.5 * ||P(X - mu - Z)||^2 + lam * ||Z||_*`` over ``Z`` and column offsets ``mu``.

    ``P`` keeps the observed entries and ``mu`` is not penalized, so a huge
    ``lam`` gives ``Z = 0`` and the observed column means. Alternates exact
    offset updates with singular value soft thresholding (the objective never
    increases) until successive ``Z`` differ by less than ``tol`` relative
    (Frobenius). On hitting ``max_iter`` the last, lowest-objective iterate
    is returned with ``converged=False``.
    """
    x = np.asarray(values, dtype=float)
    observed = ~np.isnan(x)
    if not observed.any():
        raise InsufficientData("no observed entries")
    counts = np.maximum(observed.sum(axis=0), 1)
    x0 = np.where(observed, x, 0.0)
    z = np.zeros_like(x0) if warm_start is None else np.array(warm_start, dtype=float)
    mu = _offsets(x0, observed, counts, z)
    res = SoftImputeResult(values=x, low_rank=z, column_means=mu)

    def objective(z, mu, nuc):
        r = np.where(observed, x0 - mu - z, 0.0)
        return 0.5 * float((r**2).sum()) + lam * nuc

    res.objective.append(objective(z, mu, float(np.linalg.svd(z, compute_uv=False).sum())))
    for it in range(max_iter):
        z_new, nuc = _svt(np.where(observed, x0 - mu, z), lam)
        mu = _offsets(x0, observed, counts, z_new)
        res.objective.append(objective(z_new, mu, nuc))
        delta = float(np.linalg.norm(z_new - z))
        base = float(np.linalg.norm(z_new))
        z = z_new
        res.iterations = it + 1
        if delta <= tol * base or delta == 0.0:
            res.converged = True
            break
    res.low_rank, res.column_means = z, mu
    res.values = np.where(observed, x, z + mu)
    return res


def soft_impute_path(values: np.ndarray, lam: float, *, steps: int = 20, **kwargs) -> SoftImputeResult:
    """``soft_impute`` at ``lam`` reached by warm starts along a decreasing grid.

    Small regularization converges very slowly from a cold start; walking
    down from the all-zero level is far faster and lands on the same optimum.
    """
    grid = lambda_grid(values, steps)
    warm = None
    for g in grid[grid > lam]:
        warm = soft_impute(values, g, warm_start=warm, **kwargs).low_rank
    return soft_impute(values, lam, warm_start=warm, **kwargs)


def nuclear_norm_impute(table: PerformanceTable, lam: float | None = None, *, seed: int = 0,
                        **kwargs) -> tuple[PerformanceTable, SoftImputeResult]:
    """Complete ``table`` by soft-impute; ``lam`` is cross-validated when omitted."""
    if lam is None:
        lam = select_nuclear_lambda(table.values, seed=seed)
    res = soft_impute_path(table.values, lam, **kwargs)
    return table.with_values(res.values), res


def lambda_grid(values: np.ndarray, n: int = 10, low: float = 1e-4) -> np.ndarray:
    """Decreasing logarithmic grid starting where the solution becomes all-zero."""
    x = np.asarray(values, dtype=float)
    observed = ~np.isnan(x)
    means = np.where(observed, x, 0.0).sum(axis=0) / np.maximum(observed.sum(axis=0), 1)
    xc = np.where(observed, x - means, 0.0)
    top = float(np.linalg.norm(xc, 2))
    if top == 0:
        return np.array([1.0])
    return top * np.logspace(0, math.log10(low), n)


def select_nuclear_lambda(values: np.ndarray, *, seed: int = 0, folds: int = 5,
                          grid: np.ndarray | None = None, max_iter: int = 2000) -> float:
    """Regularization with the lowest 5-fold cross-validated squared error."""
    x = np.asarray(values, dtype=float)
    grid = lambda_grid(x) if grid is None else np.sort(np.asarray(grid, dtype=float))[::-1]
    entries = np.argwhere(~np.isnan(x))
    if len(entries) < folds:
        return float(grid[-1])
    gen = seeding.rng(seed, seeding.STAGE_CV)
    assignment = gen.permutation(len(entries)) % folds
    errors = np.zeros(len(grid))
    for f in range(folds):
        held = entries[assignment == f]
        train = np.array(x)
        train[held[:, 0], held[:, 1]] = np.nan
        warm = None
        for g, lam in enumerate(grid):
            res = soft_impute(train, lam, max_iter=max_iter, tol=1e-5, warm_start=warm)
            warm = res.low_rank
            pred = res.values[held[:, 0], held[:, 1]]
            errors[g] += float(np.sum((pred - x[held[:, 0], held[:, 1]]) ** 2))
    return float(grid[int(np.argmin(errors))])


# ---------------------------------------------------------------------------
# uniform predictor interface


class Predictor:
    """Predicts one entry of a table in the table's own parameterization.

    ``min_events`` is the number of other observed events the query athlete
    needs. ``prepare`` may precompute state from a table whose holdouts are
    already hidden; ``predict`` must not mutate the predictor.
    """

    name = "predictor"
    min_events = 1

    def prepare(self, table: PerformanceTable) -> None:
        return None

    def predict(self, table: PerformanceTable, row: int, col: int) -> float:
        raise NotImplementedError

    def __call__(self, table: PerformanceTable, row: int, col: int) -> float:
        return self.predict(table, row, col)


class MeanPredictor(Predictor):
    name = "mean"
    min_events = 0

    def predict(self, table, row, col):
        return predict_mean(table, row, col)


class KnnPredictor(Predictor):
    name = "knn"

    def __init__(self, k: int = 5):
        self.k = k

    def predict(self, table, row, col):
        return predict_knn(table, row, col, self.k)


class _TimePathPredictor(Predictor):
    """Predicts seconds from the log-closest source event, then converts back."""

    def seconds(self, table, row, col, src) -> float:
        raise NotImplementedError

    def predict(self, table, row, col):
        src = source_event(table, row, col)
        return table.time_to_value(self.seconds(table, row, col, src), col)


class RiegelPredictor(_TimePathPredictor):
    name = "riegel"

    def seconds(self, table, row, col, src):
        t = table.value_to_time(table.values[row, src], src)
        return riegel(table.distances[src], t, table.distances[col])


class PowerLawPredictor(_TimePathPredictor):
    name = "powerlaw"

    def seconds(self, table, row, col, src):
        alpha = fit_power_law(table).exponent
        t = table.value_to_time(table.values[row, src], src)
        return riegel(table.distances[src], t, table.distances[col], alpha)


class IndividualPowerLawPredictor(Predictor):
    name = "ind-powerlaw"
    min_events = 2

    def predict(self, table, row, col):
        return table.time_to_value(predict_individual_power_law(table, row, col), col)


class PurdyPredictor(_TimePathPredictor):
    name = "purdy"

    def seconds(self, table, row, col, src):
        t = table.value_to_time(table.values[row, src], src)
        return predict_purdy(table.distances[src], t, table.distances[col])


class EmPredictor(Predictor):
    """EM imputation on log-times, converted back to the table's units."""

    name = "em"

    def predict(self, table, row, col):
        logt = table if table.parameterization is Parameterization.LOG_TIME else reparameterize(
            table, Parameterization.LOG_TIME
        )
        res = em_impute(logt.values)
        return table.time_to_value(math.exp(res.values[row, col]), col)


class NuclearNormPredictor(Predictor):
    """Soft-impute completion; ``prepare`` fixes the regularization by CV and
    stores a warm start so each holdout converges quickly."""

    name = "nuclear"
    min_events = 0

    def __init__(self, lam: float | None = None, seed: int = 0, tol: float = 1e-5):
        self.lam = lam
        self.seed = seed
        self.tol = tol  # per-holdout refinement tolerance; the warm start is already close
        self._lam: float | None = None
        self._warm: np.ndarray | None = None
        self._shape: tuple[int, int] | None = None

    def prepare(self, table):
        self._lam = self.lam if self.lam is not None else select_nuclear_lambda(table.values, seed=self.seed)
        self._warm = soft_impute_path(table.values, self._lam).low_rank
        self._shape = table.shape

    def predict(self, table, row, col):
        if self._shape == table.shape:
            res = soft_impute(table.values, self._lam, warm_start=self._warm, tol=self.tol)
        else:
            lam = self.lam if self.lam is not None else select_nuclear_lambda(table.values, seed=self.seed)
            res = soft_impute_path(table.values, lam, tol=self.tol)
        return float(res.values[row, col])


class LmcPredictor(Predictor):
    def __init__(self, rank: int = 2, config: LmcConfig | None = None, **kwargs):
        base = config or LmcConfig(rank=rank, **kwargs)
        self.config = base if base.rank == rank else replace(base, rank=rank)
        self.name = f"lmc{rank}"
        self.min_events = rank

    def predict(self, table, row, col):
        return lmc_predict(table, row, col, self.config)


METHODS = ("mean", "knn", "riegel", "powerlaw", "ind-powerlaw", "purdy", "em", "nuclear",
           "lmc1", "lmc2", "lmc3", "lmc4")


def make_predictor(name: str, *, seed: int = 0, k: int = 5, lmc: LmcConfig | None = None,
                   lam: float | None = None) -> Predictor:
    """Predictor by CLI name (see ``METHODS``)."""
    if name.startswith("lmc") and name[3:].isdigit():
        rank = int(name[3:])
        cfg = lmc or LmcConfig(seed=seed)
        return LmcPredictor(rank, replace(cfg, rank=rank))
    simple = {
        "mean": MeanPredictor,
        "riegel": RiegelPredictor,
        "powerlaw": PowerLawPredictor,
        "ind-powerlaw": IndividualPowerLawPredictor,
        "purdy": PurdyPredictor,
        "em": EmPredictor,
    }
    if name in simple:
        return simple[name]()
    if name == "knn":
        return KnnPredictor(k)
    if name == "nuclear":
        return NuclearNormPredictor(lam, seed=seed)
    raise DataError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
