"""Raw attempt files to a cleaned, collated PerformanceTable.

Input is a two-file CSV export: ``athletes.csv`` (athlete_id, gender,
birth_date) and ``events.csv`` (athlete_id, event, date, performance in
seconds). Cleaning removes impossible and implausible entries, collation
reduces each athlete's attempts to one row of best times, and the outlier
and subsample filters select the rows used downstream.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from . import seeding
from .datamodel import (
    NAT,
    AthleteMeta,
    EventCatalog,
    Gender,
    Parameterization,
    PerformanceTable,
    column_percentiles,
    event_percentiles,
)
from .errors import DataError, ParseError

WINDOW_DAYS = 365


@dataclass(frozen=True)
class RawAttempt:
    athlete_id: int
    event_label: str
    date: date | None
    performance: float  # seconds

    def __post_init__(self):
        if not self.performance > 0:
            raise DataError("performance must be positive")


# ---------------------------------------------------------------------------
# parsing


def _parse_date(token: str, line: int) -> date | None:
    token = token.strip()
    if not token:
        return None
    try:
        return date.fromisoformat(token)
    except ValueError:
        raise ParseError(f"bad date {token!r}", line) from None


def _parse_seconds(token: str, line: int) -> float:
    """Seconds, also accepting ``mm:ss.ss`` and ``h:mm:ss`` forms."""
    token = token.strip()
    try:
        total = 0.0
        for part in token.split(":"):
            total = total * 60 + float(part)
    except ValueError:
        raise ParseError(f"bad performance {token!r}", line) from None
    if not (total > 0 and math.isfinite(total)):
        raise ParseError(f"performance must be positive, got {token!r}", line)
    return total


def _rows(lines: Iterable[str], header: tuple[str, ...]):
    reader = csv.reader(lines)
    first = next(reader, None)
    if first is None:
        return
    start = 1
    if tuple(c.strip().lower() for c in first[: len(header)]) != header:
        # headerless file: treat the first line as data
        yield 1, first
    for n, fields in enumerate(reader, start=start + 1):
        if not fields or all(not f.strip() for f in fields):
            continue
        yield n, fields


def _open_lines(source) -> list[str]:
    if isinstance(source, (str, Path)):
        return Path(source).read_text().splitlines()
    return list(source)


def parse_athletes(source) -> list[AthleteMeta]:
    """Parse ``athlete_id,gender,birth_date`` lines (path or iterable of lines)."""
    out = []
    for n, fields in _rows(_open_lines(source), ("athlete_id", "gender", "birth_date")):
        fields = fields + [""] * (3 - len(fields))
        try:
            athlete_id = int(fields[0])
        except ValueError:
            raise ParseError(f"bad athlete id {fields[0]!r}", n) from None
        out.append(AthleteMeta(athlete_id, Gender.parse(fields[1]), _parse_date(fields[2], n)))
    return out


def parse_events(source, catalog: EventCatalog | None = None, *,
                 skip_unknown_events: bool = False) -> list[RawAttempt]:
    """Parse ``athlete_id,event,date,performance`` lines.

    Event labels are matched against the catalog (aliases such as ``10k``
    are accepted) and stored under their canonical label.
    """
    catalog = catalog or EventCatalog.default()
    out = []
    for n, fields in _rows(_open_lines(source), ("athlete_id", "event", "date", "performance")):
        if len(fields) < 4:
            raise ParseError(f"expected 4 fields, got {len(fields)}", n)
        try:
            athlete_id = int(fields[0])
        except ValueError:
            raise ParseError(f"bad athlete id {fields[0]!r}", n) from None
        try:
            label = catalog.labels[catalog.index(fields[1].strip())]
        except (KeyError, DataError, IndexError):
            if skip_unknown_events:
                continue
            raise ParseError(f"unknown event {fields[1]!r}", n) from None
        out.append(RawAttempt(athlete_id, label, _parse_date(fields[2], n), _parse_seconds(fields[3], n)))
    return out


# ---------------------------------------------------------------------------
# world records


@dataclass(frozen=True)
class RecordHistory:
    """Per-event record progression, each list sorted by date."""

    records: dict[str, tuple[tuple[date, float], ...]]

    @classmethod
    def bundled(cls, catalog: EventCatalog | None = None) -> RecordHistory:
        with resources.files("runlmc").joinpath("data/world_records.json").open() as fh:
            return cls.from_json(json.load(fh), catalog)

    @classmethod
    def load(cls, path: str | Path, catalog: EventCatalog | None = None) -> RecordHistory:
        return cls.from_json(json.loads(Path(path).read_text()), catalog)

    @classmethod
    def from_json(cls, data: dict, catalog: EventCatalog | None = None) -> RecordHistory:
        catalog = catalog or EventCatalog.default()
        data = data.get("records", data)
        records = {}
        for label, entries in data.items():
            canon = catalog.labels[catalog.index(label)]
            hist = sorted((date.fromisoformat(d), float(t)) for d, t in entries)
            if any(t <= 0 for _, t in hist):
                raise DataError(f"record times for {label} must be positive")
            records[canon] = tuple(hist)
        return cls(records)

    def in_force(self, label: str, when: date | None) -> float | None:
        """Record standing on ``when``; undated attempts use the all-time best.

        Dates before the first listed record are checked against that first
        record (older, slower records are not listed).
        """
        hist = self.records.get(label)
        if not hist:
            return None
        if when is None:
            return min(t for _, t in hist)
        current = hist[0][1]
        for d, t in hist:
            if d <= when:
                current = t
            else:
                break
        return current

    def best(self, catalog: EventCatalog) -> np.ndarray:
        """All-time best per catalog event (``NaN`` where none is listed)."""
        return np.array([self.in_force(lab, None) or np.nan for lab in catalog.labels])


# ---------------------------------------------------------------------------
# cleaning


@dataclass(frozen=True)
class CleaningConfig:
    world_records: RecordHistory | None = None  # None -> bundled table
    slow_threshold_factor: float = 3.0
    min_age_years: int = 9
    sentinel_birth_date: date = date(1900, 1, 1)
    sentinel_attempt_dates: tuple[date, ...] = (date(1901, 1, 1), date(2038, 8, 20))

    def __post_init__(self):
        if not self.slow_threshold_factor > 1:
            raise ValueError("slow_threshold_factor must be > 1")

    def records(self) -> RecordHistory:
        return self.world_records or RecordHistory.bundled()


@dataclass
class CleanReport:
    birth_sentinel: int = 0
    birth_too_young: int = 0
    date_sentinel: int = 0
    faster_than_record: int = 0
    extremely_slow: int = 0
    slow_rounds: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def age_years(birth: date, when: date) -> int:
    """Completed years of age on ``when``."""
    return when.year - birth.year - ((when.month, when.day) < (birth.month, birth.day))


def clean(
    attempts: list[RawAttempt], athletes: list[AthleteMeta], config: CleaningConfig | None = None
) -> tuple[list[RawAttempt], list[AthleteMeta], CleanReport]:
    """Apply the cleaning rules; the result is a fixed point (cleaning twice changes nothing).

    Sentinel birth and attempt dates become missing, birth dates implying an
    age below ``min_age_years`` at any attempt become missing, attempts
    faster than the record in force are dropped, and attempts slower than
    ``slow_threshold_factor`` times their event's median are dropped,
    recomputing the medians until no attempt is removed.
    """
    config = config or CleaningConfig()
    report = CleanReport()

    fixed = []
    for a in attempts:
        if a.date is not None and a.date in config.sentinel_attempt_dates:
            a = replace(a, date=None)
            report.date_sentinel += 1
        fixed.append(a)

    records = config.records()
    kept = []
    for a in fixed:
        rec = records.in_force(a.event_label, a.date)
        if rec is not None and a.performance < rec:
            report.faster_than_record += 1
            continue
        kept.append(a)

    while True:
        by_event: dict[str, list[float]] = defaultdict(list)
        for a in kept:
            by_event[a.event_label].append(a.performance)
        medians = {e: float(np.median(v)) for e, v in by_event.items()}
        survivors = [a for a in kept if a.performance <= config.slow_threshold_factor * medians[a.event_label]]
        if len(survivors) == len(kept):
            break
        report.extremely_slow += len(kept) - len(survivors)
        report.slow_rounds += 1
        kept = survivors

    first_attempt: dict[int, date] = {}
    for a in kept:
        if a.date is not None and (a.athlete_id not in first_attempt or a.date < first_attempt[a.athlete_id]):
            first_attempt[a.athlete_id] = a.date
    cleaned_athletes = []
    for m in athletes:
        birth = m.birth_date
        if birth is not None and birth == config.sentinel_birth_date:
            birth = None
            report.birth_sentinel += 1
        elif birth is not None and m.athlete_id in first_attempt:
            if age_years(birth, first_attempt[m.athlete_id]) < config.min_age_years:
                birth = None
                report.birth_too_young += 1
        cleaned_athletes.append(replace(m, birth_date=birth))
    return kept, cleaned_athletes, report


# ---------------------------------------------------------------------------
# collation


def _athlete_index(attempts: list[RawAttempt], athletes: list[AthleteMeta]) -> list[AthleteMeta]:
    known = {m.athlete_id for m in athletes}
    extra = sorted({a.athlete_id for a in attempts} - known)
    return list(athletes) + [AthleteMeta(i) for i in extra]


def _table_from_best(rows: list[AthleteMeta], picked: dict[int, dict[int, RawAttempt]],
                     catalog: EventCatalog) -> PerformanceTable:
    values = np.full((len(rows), len(catalog)), np.nan)
    dates = np.full(values.shape, NAT)
    for i, m in enumerate(rows):
        for j, a in picked.get(m.athlete_id, {}).items():
            values[i, j] = a.performance
            if a.date is not None:
                dates[i, j] = np.datetime64(a.date, "D")
    return PerformanceTable(values, catalog, tuple(rows), dates, Parameterization.TIME)


def _fastest(attempts: Iterable[RawAttempt], catalog: EventCatalog) -> dict[int, RawAttempt]:
    """Fastest attempt per catalog column; equal times keep the earlier date."""
    best: dict[int, RawAttempt] = {}
    for a in attempts:
        j = catalog.index(a.event_label)
        cur = best.get(j)
        if cur is None or (a.performance, _date_key(a.date)) < (cur.performance, _date_key(cur.date)):
            best[j] = a
    return best


def _date_key(d: date | None) -> int:
    return d.toordinal() if d is not None else 10**9


def collate_best(attempts: list[RawAttempt], athletes: list[AthleteMeta],
                 catalog: EventCatalog | None = None) -> PerformanceTable:
    """One row per athlete: fastest times in the year up to the best event.

    The best event is the personal best with the highest event percentile
    among all athletes' personal bests (ties: earlier date, then shorter
    distance). Each event attempted within ``(D - 365 days, D]`` of that
    best performance's date ``D`` enters with its fastest time. If the best
    performance is undated, all-time personal bests are used.
    """
    catalog = catalog or EventCatalog.default()
    rows = _athlete_index(attempts, athletes)
    by_athlete: dict[int, list[RawAttempt]] = defaultdict(list)
    for a in attempts:
        by_athlete[a.athlete_id].append(a)
    pbs = {aid: _fastest(lst, catalog) for aid, lst in by_athlete.items()}

    pb_grid = _table_from_best(rows, pbs, catalog)
    pct = event_percentiles(pb_grid)
    picked: dict[int, dict[int, RawAttempt]] = {}
    for i, m in enumerate(rows):
        own = pbs.get(m.athlete_id)
        if not own:
            continue
        best_col = max(own, key=lambda j: (pct[i, j], -_date_key(own[j].date), -j))
        anchor = own[best_col].date
        if anchor is None:
            picked[m.athlete_id] = own
            continue
        start = anchor - timedelta(days=WINDOW_DAYS)
        window = [a for a in by_athlete[m.athlete_id] if a.date is not None and start < a.date <= anchor]
        picked[m.athlete_id] = _fastest(window, catalog)
    return _table_from_best(rows, picked, catalog)


def collate_random(attempts: list[RawAttempt], athletes: list[AthleteMeta],
                   catalog: EventCatalog | None = None, seed: int = 0) -> PerformanceTable:
    """One row per athlete: fastest times within one randomly chosen calendar year.

    Years are drawn uniformly among those with at least one dated attempt,
    from a stream keyed by the athlete id, so the choice for one athlete does
    not depend on the others.
    """
    catalog = catalog or EventCatalog.default()
    rows = _athlete_index(attempts, athletes)
    by_athlete: dict[int, list[RawAttempt]] = defaultdict(list)
    for a in attempts:
        if a.date is not None:
            by_athlete[a.athlete_id].append(a)
    picked = {}
    for m in rows:
        own = by_athlete.get(m.athlete_id)
        if not own:
            continue
        years = sorted({a.date.year for a in own})
        gen = seeding.rng(seed, seeding.STAGE_COLLATE, m.athlete_id)
        year = years[int(gen.integers(len(years)))]
        picked[m.athlete_id] = _fastest([a for a in own if a.date.year == year], catalog)
    return _table_from_best(rows, picked, catalog)


# ---------------------------------------------------------------------------
# row filters


def outlier_scores(table: PerformanceTable) -> np.ndarray:
    """Spread (max - min) of each row's event percentiles; 0 for single entries."""
    pct = event_percentiles(table)
    spread = np.zeros(table.n_athletes)
    rows = ~np.isnan(pct).all(axis=1)
    spread[rows] = np.nanmax(pct[rows], axis=1) - np.nanmin(pct[rows], axis=1)
    return spread


def remove_outliers(table: PerformanceTable, fraction: float = 0.05) -> tuple[PerformanceTable, np.ndarray]:
    """Drop the ``ceil(fraction * n)`` rows with the largest percentile spread.

    Ties at the cutoff remove the larger row index first. Returns the kept
    table and the sorted indices of the removed rows.
    """
    n = table.n_athletes
    n_remove = math.ceil(fraction * n)
    scores = outlier_scores(table)
    idx = np.arange(n)
    order = np.lexsort((-idx, -scores))
    removed = np.sort(order[:n_remove])
    keep = np.setdiff1d(idx, removed)
    return table.select_rows(keep), removed


@dataclass(frozen=True)
class SubsampleSpec:
    gender: Gender | None = None
    age_range: tuple[float, float] | None = None  # years at the best event, inclusive
    min_events: int = 0
    percentile_range: tuple[float, float] = (0.0, 100.0)  # inclusive

    def __post_init__(self):
        lo, hi = self.percentile_range
        if not 0 <= lo < hi <= 100:
            raise ValueError("percentile_range must satisfy 0 <= low < high <= 100")
        if self.age_range is not None and self.age_range[0] > self.age_range[1]:
            raise ValueError("age_range must be (min, max)")
        if self.min_events < 0:
            raise ValueError("min_events must be >= 0")


def best_entries(table: PerformanceTable, pct: np.ndarray | None = None) -> np.ndarray:
    """Column of each row's best-percentile entry (-1 for empty rows).

    Ties go to the earlier date, then the shorter distance.
    """
    pct = event_percentiles(table) if pct is None else pct
    out = np.full(table.n_athletes, -1)
    for i in range(table.n_athletes):
        cols = np.flatnonzero(~np.isnan(pct[i]))
        if cols.size == 0:
            continue
        d = table.dates[i]

        def key(j):
            when = d[j].astype("int64") if not np.isnat(d[j]) else np.iinfo(np.int64).max
            return (-pct[i, j], when, j)

        out[i] = min(cols, key=key)
    return out


def subsample(table: PerformanceTable, spec: SubsampleSpec) -> PerformanceTable:
    """Rows passing the gender/age filter, the event count and the standard band.

    The standard of a row is its best event percentile, recomputed on the
    rows that survive the first two filters. Rows are kept when that score's
    own percentile among the survivors lies in ``percentile_range``
    (inclusive).
    """
    keep = np.ones(table.n_athletes, bool)
    if spec.gender is not None:
        keep &= np.array([m.gender == Gender(spec.gender) for m in table.athletes], bool)
    if spec.age_range is not None:
        best = best_entries(table)
        lo, hi = spec.age_range
        for i, m in enumerate(table.athletes):
            j = best[i]
            if m.birth_date is None or j < 0 or np.isnat(table.dates[i, j]):
                keep[i] = False
                continue
            when = table.dates[i, j].astype(object)
            keep[i] &= lo <= age_years(m.birth_date, when) <= hi
    keep &= table.present.sum(axis=1) >= spec.min_events
    sub = table.select_rows(np.flatnonzero(keep))
    if sub.n_athletes and tuple(spec.percentile_range) != (0.0, 100.0):
        pct = event_percentiles(sub)
        score = np.full(sub.n_athletes, np.nan)
        rows = ~np.isnan(pct).all(axis=1)
        score[rows] = np.nanmax(pct[rows], axis=1)
        standing = column_percentiles(-score)  # higher score = better standing
        lo, hi = spec.percentile_range
        ok = ~np.isnan(standing) & (standing >= lo) & (standing <= hi)
        sub = sub.select_rows(np.flatnonzero(ok))
    if sub.n_athletes == 0:
        raise DataError("empty subsample")
    return sub


def load_table(athletes_csv, events_csv, *, mode: str = "best", seed: int = 0,
               cleaning: CleaningConfig | None = None, catalog: EventCatalog | None = None,
               outliers: bool = True) -> tuple[PerformanceTable, dict]:
    """Parse, clean, collate and (optionally) drop outliers in one call."""
    catalog = catalog or EventCatalog.default()
    athletes = parse_athletes(athletes_csv)
    attempts = parse_events(events_csv, catalog)
    attempts, athletes, report = clean(attempts, athletes, cleaning)
    if mode == "best":
        table = collate_best(attempts, athletes, catalog)
    elif mode == "random":
        table = collate_random(attempts, athletes, catalog, seed)
    else:
        raise DataError(f"unknown collation mode {mode!r}")
    info = {"cleaning": report.to_json(), "mode": mode, "seed": seed}
    nonempty = np.flatnonzero(table.present.any(axis=1))
    table = table.select_rows(nonempty)
    if outliers and table.n_athletes:
        table, removed = remove_outliers(table)
        info["outliers_removed"] = [int(x) for x in removed]
    return table, info
