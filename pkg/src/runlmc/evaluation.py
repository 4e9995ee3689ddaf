"""Leave-one-out validation, error metrics and paired method comparison.

A validation run samples observed entries as holdouts, hides each one in
turn and asks a predictor for it. Every method in a comparison sees the
same holdout list, so errors can be compared pairwise with a Wilcoxon
signed-rank test.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from . import seeding
from .baselines import Predictor, make_predictor
from .datamodel import (
    Parameterization,
    PerformanceTable,
    event_percentiles,
    from_time,
    reparameterize,
)
from .errors import DataError

MODES = ("all_remaining", "causal_past")


@dataclass(frozen=True)
class ValidationSpec:
    n_holdouts: int = 1000
    mode: str = "all_remaining"
    metric_parameterization: Parameterization | None = None  # None: the table's own
    seed: int = 0
    n_boot: int = 200
    min_row_events: int = 0  # holdouts only from rows with at least this many entries
    min_holdout_percentile: float = 0.0  # e.g. 5 keeps the fastest 95% of performances
    threads: int = 1

    def __post_init__(self):
        if self.n_holdouts < 1:
            raise ValueError("n_holdouts must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_boot < 0:
            raise ValueError("n_boot must be >= 0")


class OraclePredictor(Predictor):
    """Returns the true value; the harness must score it at zero error."""

    name = "oracle"
    min_events = 0

    def __init__(self, truth: PerformanceTable):
        self.truth = truth

    def predict(self, table, row, col):
        return float(self.truth.values[row, col])


# ---------------------------------------------------------------------------
# metrics


def metrics(residuals: Sequence[float]) -> tuple[float, float]:
    """``(rmse, mae)`` of a residual sample."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        raise DataError("no residuals")
    return float(np.sqrt(np.mean(r**2))), float(np.mean(np.abs(r)))


def relative_metrics(predictions: Sequence[float], truths: Sequence[float]) -> tuple[float, float]:
    """``(rmse, mae)`` of the relative errors ``(prediction - truth) / truth``."""
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.size == 0:
        raise DataError("no predictions")
    return metrics((p - t) / t)


def bootstrap_se(samples: Sequence[float], statistic: Callable[[np.ndarray], float],
                 n_boot: int = 200, seed: int = 0) -> float:
    """Standard deviation of ``statistic`` over ``n_boot`` resamples with replacement."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2 or n_boot < 2:
        return 0.0
    gen = seeding.rng(seed, seeding.STAGE_BOOTSTRAP)
    idx = gen.integers(0, x.size, size=(n_boot, x.size))
    stats = np.array([statistic(x[i]) for i in idx])
    return float(np.std(stats, ddof=1))


def _rmse(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(x**2)))


def _mae(x: np.ndarray) -> float:
    return float(np.mean(np.abs(x)))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test


def _exact_signed_rank_cdf(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each attainable doubled ``W+`` over all sign assignments."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled_ranks.astype(int):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(errors_a: Sequence[float], errors_b: Sequence[float], *,
                         exact_below: int = 25) -> tuple[float, float]:
    """Two-sided signed-rank test of paired samples: ``(W+, p)``.

    ``W+`` is the rank sum of positive differences ``a - b``. Zero
    differences take part in the ranking but not in the sums (Pratt); tied
    magnitudes share mid-ranks. With fewer than ``exact_below`` non-zero
    differences the p-value comes from the exact permutation distribution,
    otherwise from the normal approximation with the tie-corrected variance.
    """
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError("paired samples must be 1-d and of equal length")
    if a.size == 0:
        raise DataError("no pairs")
    d = a - b
    ranks = rankdata(np.abs(d))
    nonzero = d != 0
    if not nonzero.any():
        return 0.0, 1.0
    r = ranks[nonzero]
    w_plus = float(r[d[nonzero] > 0].sum())
    if nonzero.sum() < exact_below:
        doubled = np.rint(2 * r).astype(int)
        counts = _exact_signed_rank_cdf(doubled)
        w2 = int(round(2 * w_plus))
        total = counts.sum()
        lower = counts[: w2 + 1].sum() / total
        upper = counts[w2:].sum() / total
        return w_plus, float(min(1.0, 2 * min(lower, upper)))
    mean = r.sum() / 2
    sd = math.sqrt(float((r**2).sum()) / 4)
    z = (w_plus - mean) / sd
    return w_plus, float(min(1.0, 2 * norm.sf(abs(z))))


# ---------------------------------------------------------------------------
# leave-one-out validation


@dataclass
class ValidationReport:
    method: str
    holdouts: np.ndarray  # k x 2 (row, col)
    predictions: np.ndarray  # table units; NaN when skipped
    truths: np.ndarray
    residuals: np.ndarray  # metric units; NaN when skipped
    pred_times: np.ndarray
    true_times: np.ndarray
    skipped: dict[int, str]
    catalog_labels: list[str]
    metric_parameterization: Parameterization
    n_boot: int = 200
    seed: int = 0
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> np.ndarray:
        return ~np.isnan(self.residuals)

    def restricted(self, mask: np.ndarray) -> dict:
        """Metrics over the holdouts selected by ``mask`` (all must be predicted)."""
        res = self.residuals[mask]
        if res.size == 0:
            return {"n": 0}
        rmse, mae = metrics(res)
        rel_rmse, rel_mae = relative_metrics(self.pred_times[mask], self.true_times[mask])
        rel = (self.pred_times[mask] - self.true_times[mask]) / self.true_times[mask]
        return {
            "n": int(res.size),
            "rmse": rmse,
            "mae": mae,
            "rmse_se": bootstrap_se(res, _rmse, self.n_boot, self.seed),
            "mae_se": bootstrap_se(res, _mae, self.n_boot, self.seed),
            "rel_rmse": rel_rmse,
            "rel_mae": rel_mae,
            "rel_rmse_se": bootstrap_se(rel, _rmse, self.n_boot, self.seed),
            "rel_mae_se": bootstrap_se(rel, _mae, self.n_boot, self.seed),
        }

    def per_event(self, mask: np.ndarray | None = None) -> dict[str, dict]:
        mask = self.ok if mask is None else mask
        out = {}
        for j, label in enumerate(self.catalog_labels):
            sel = mask & (self.holdouts[:, 1] == j)
            if sel.any():
                rmse, mae = metrics(self.residuals[sel])
                out[label] = {"n": int(sel.sum()), "rmse": rmse, "mae": mae}
        return out

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "summary": self.summary,
            "per_event": self.per_event(),
            "holdouts": self.holdouts.tolist(),
            "residuals": [None if math.isnan(x) else float(x) for x in self.residuals],
            "skipped": {str(k): v for k, v in sorted(self.skipped.items())},
        }


def holdout_candidates(table: PerformanceTable, spec: ValidationSpec) -> np.ndarray:
    present = table.present
    ok = present & (present.sum(axis=1) >= spec.min_row_events)[:, None]
    if spec.min_holdout_percentile > 0:
        t = table.with_values(table.times())
        ok &= event_percentiles(t) >= spec.min_holdout_percentile
    return np.argwhere(ok)


def sample_holdouts(table: PerformanceTable, spec: ValidationSpec) -> np.ndarray:
    """Seeded sample of observed entries, without replacement."""
    cand = holdout_candidates(table, spec)
    if len(cand) == 0:
        raise DataError("no entries eligible as holdouts")
    gen = seeding.rng(spec.seed, seeding.STAGE_HOLDOUTS)
    pick = gen.choice(len(cand), size=min(spec.n_holdouts, len(cand)), replace=False)
    return cand[pick]


def holdout_hash(holdouts: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(holdouts, dtype=np.int64).tobytes()).hexdigest()[:16]


def query_view(table: PerformanceTable, row: int, col: int, mode: str) -> PerformanceTable:
    """The table a predictor sees for holdout ``(row, col)``.

    The holdout is hidden. In ``causal_past`` mode the query athlete also
    loses every entry not dated strictly before the holdout (undated entries
    included); other athletes are unaffected.
    """
    hide = np.zeros(table.shape, bool)
    hide[row, col] = True
    if mode == "causal_past":
        when = table.dates[row, col]
        d = table.dates[row]
        if np.isnat(when):
            hide[row, :] = True
        else:
            hide[row] |= np.isnat(d) | (d >= when)
    return table.mask(hide)


def _metric_converter(table: PerformanceTable, param: Parameterization):
    scale = None
    if param is Parameterization.NORMALIZED:
        if table.parameterization is Parameterization.NORMALIZED:
            scale = table.scale
        else:
            scale = reparameterize(table, Parameterization.NORMALIZED).scale

    def convert(seconds, col):
        s = None if scale is None else scale[col]
        return from_time(seconds, table.distances[col], param, s)

    return convert


def loo_validate(table: PerformanceTable, predictor: Predictor, spec: ValidationSpec,
                 holdouts: np.ndarray | None = None) -> ValidationReport:
    """Hide each sampled entry, predict it and record the residual.

    Holdouts the method cannot predict are recorded in ``skipped`` with the
    reason. ``predictor.prepare`` is called once on the table with every
    holdout hidden, so prepared state never sees a holdout value.
    """
    holdouts = sample_holdouts(table, spec) if holdouts is None else np.asarray(holdouts, dtype=int)
    param = Parameterization(spec.metric_parameterization or table.parameterization)
    hide_all = np.zeros(table.shape, bool)
    hide_all[holdouts[:, 0], holdouts[:, 1]] = True
    predictor.prepare(table.mask(hide_all))

    def one(h):
        row, col = int(h[0]), int(h[1])
        view = query_view(table, row, col, spec.mode)
        n_other = int(view.present[row].sum())
        if n_other < predictor.min_events:
            return math.nan, f"insufficient attempts: {n_other} usable, {predictor.min_events} needed"
        try:
            return float(predictor.predict(view, row, col)), None
        except (DataError, np.linalg.LinAlgError) as exc:
            return math.nan, str(exc) or type(exc).__name__

    if spec.threads > 1:
        with ThreadPoolExecutor(max_workers=spec.threads) as pool:
            results = list(pool.map(one, holdouts))
    else:
        results = [one(h) for h in holdouts]

    convert = _metric_converter(table, param)
    k = len(holdouts)
    preds = np.array([p for p, _ in results])
    truths = table.values[holdouts[:, 0], holdouts[:, 1]].astype(float)
    pred_t = np.full(k, np.nan)
    true_t = np.full(k, np.nan)
    resid = np.full(k, np.nan)
    skipped = {}
    for n, ((row, col), (p, reason)) in enumerate(zip(holdouts, results)):
        true_t[n] = table.value_to_time(truths[n], col)
        if reason is not None or not math.isfinite(p):
            skipped[n] = reason or "non-finite prediction"
            continue
        with np.errstate(all="ignore"):
            pt = table.value_to_time(p, col)
        if not (math.isfinite(pt) and pt > 0):
            skipped[n] = "prediction outside the valid range"
            continue
        pred_t[n] = pt
        resid[n] = float(convert(pt, col)) - float(convert(true_t[n], col))
    report = ValidationReport(
        method=getattr(predictor, "name", type(predictor).__name__),
        holdouts=holdouts,
        predictions=preds,
        truths=truths,
        residuals=resid,
        pred_times=pred_t,
        true_times=true_t,
        skipped=skipped,
        catalog_labels=table.catalog.labels,
        metric_parameterization=param,
        n_boot=spec.n_boot,
        seed=spec.seed,
    )
    report.summary = report.restricted(report.ok)
    report.summary["n_skipped"] = len(skipped)
    return report


# ---------------------------------------------------------------------------
# method comparison


@dataclass
class Comparison:
    reports: dict[str, ValidationReport]
    shared: np.ndarray  # holdouts predicted by every method
    rows: list[dict]
    holdout_hash: str
    reference: str | None

    COLUMNS = ("method", "n", "n_skipped", "rmse", "rmse_se", "mae", "mae_se",
               "rel_rmse", "rel_rmse_se", "rel_mae", "rel_mae_se", "p_vs_reference")

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("\t".join(self.COLUMNS) + "\n")
        for row in self.rows:
            cells = []
            for c in self.COLUMNS:
                v = row.get(c, "")
                cells.append(f"{v:.6g}" if isinstance(v, float) else str(v))
            buf.write("\t".join(cells) + "\n")
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "holdout_hash": self.holdout_hash,
            "reference": self.reference,
            "n_shared": int(self.shared.sum()),
            "table": self.rows,
            "reports": {k: r.to_json() for k, r in self.reports.items()},
        }


def compare_methods(table: PerformanceTable, methods: Sequence[str | Predictor] | dict[str, Predictor],
                    spec: ValidationSpec, reference: str | None = None) -> Comparison:
    """Validate several methods on one shared holdout list.

    Metrics are computed on the holdouts every method predicted
    (intersection), which keeps the Wilcoxon pairing valid; each row also
    reports how many holdouts the method skipped. p-values compare absolute
    errors against ``reference`` (default: the first method).
    """
    if isinstance(methods, dict):
        named = dict(methods)
    else:
        named = {}
        for m in methods:
            p = make_predictor(m, seed=spec.seed) if isinstance(m, str) else m
            named[m if isinstance(m, str) else p.name] = p
    if not named:
        raise DataError("no methods to compare")
    holdouts = sample_holdouts(table, spec)
    reports = {name: loo_validate(table, p, spec, holdouts) for name, p in named.items()}
    shared = np.logical_and.reduce([r.ok for r in reports.values()])
    reference = reference or next(iter(named))
    if reference not in reports:
        raise DataError(f"reference method {reference!r} is not among the compared methods")
    ref_err = np.abs(reports[reference].residuals[shared])
    rows = []
    for name, rep in reports.items():
        row = {"method": name, **rep.restricted(shared), "n_skipped": len(rep.skipped)}
        if name == reference or not shared.any():
            row["p_vs_reference"] = "" if name == reference else math.nan
        else:
            row["p_vs_reference"] = wilcoxon_signed_rank(np.abs(rep.residuals[shared]), ref_err)[1]
        rows.append(row)
    return Comparison(reports, shared, rows, holdout_hash(holdouts), reference)


def save_comparison(comp: Comparison, tsv_path, json_path=None, extra: dict | None = None) -> None:
    Path(tsv_path).write_text(comp.to_tsv())
    if json_path is not None:
        doc = comp.to_json()
        if extra:
            doc.update(extra)
        Path(json_path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
