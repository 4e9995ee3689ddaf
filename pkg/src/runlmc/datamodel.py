"""Athlete x event performance tables and per-athlete summary statistics.

A :class:`PerformanceTable` stores one optional performance per athlete and
event as a float grid with ``NaN`` for missing entries, together with the
date of each performance and per-athlete metadata. Tables are immutable;
every transformation returns a new table.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, InsufficientData

NAT = np.datetime64("NaT", "D")


@dataclass(frozen=True)
class Event:
    label: str
    distance: float  # meters


@dataclass(frozen=True)
class EventCatalog:
    events: tuple[Event, ...]

    def __post_init__(self):
        d = [e.distance for e in self.events]
        if any(x <= 0 for x in d):
            raise ValueError("event distances must be positive")
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("event distances must be strictly increasing")

    @classmethod
    def default(cls) -> EventCatalog:
        return cls(tuple(Event(label, dist) for label, dist in DEFAULT_EVENTS))

    def __len__(self) -> int:
        return len(self.events)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.events]

    @property
    def distances(self) -> np.ndarray:
        return np.array([e.distance for e in self.events], dtype=float)

    @property
    def log_distances(self) -> np.ndarray:
        return np.log(self.distances)

    def index(self, key: str | int) -> int:
        """Column index for an event label, alias or integer position."""
        if isinstance(key, (int, np.integer)):
            if not 0 <= key < len(self):
                raise KeyError(f"event index {key} out of range")
            return int(key)
        norm = _normalize_label(key)
        for i, e in enumerate(self.events):
            if _normalize_label(e.label) == norm:
                return i
        alias = EVENT_ALIASES.get(norm)
        if alias is not None:
            for i, e in enumerate(self.events):
                if _normalize_label(e.label) == alias:
                    return i
        raise KeyError(f"unknown event {key!r}")

    def to_json(self) -> list[dict]:
        return [{"label": e.label, "distance": e.distance} for e in self.events]

    @classmethod
    def from_json(cls, data: list[dict]) -> EventCatalog:
        return cls(tuple(Event(d["label"], float(d["distance"])) for d in data))


DEFAULT_EVENTS = (
    ("100m", 100.0),
    ("200m", 200.0),
    ("400m", 400.0),
    ("800m", 800.0),
    ("1500m", 1500.0),
    ("Mile", 1609.344),
    ("5000m", 5000.0),
    ("10000m", 10000.0),
    ("HalfMarathon", 21097.5),
    ("Marathon", 42195.0),
)

# normalized alias -> normalized canonical label
EVENT_ALIASES = {
    "100": "100m",
    "200": "200m",
    "400": "400m",
    "800": "800m",
    "1500": "1500m",
    "1mile": "mile",
    "5000": "5000m",
    "5k": "5000m",
    "5km": "5000m",
    "10000": "10000m",
    "10k": "10000m",
    "10km": "10000m",
    "hm": "halfmarathon",
    "half": "halfmarathon",
    "halfmar": "halfmarathon",
    "mar": "marathon",
    "mara": "marathon",
}


def _normalize_label(label: str) -> str:
    return "".join(ch for ch in str(label).lower() if ch.isalnum())


class Gender(str, enum.Enum):
    MALE = "M"
    FEMALE = "F"
    UNKNOWN = "U"

    @classmethod
    def parse(cls, token: str | None) -> Gender:
        t = (token or "").strip().upper()
        if t in ("M", "MALE"):
            return cls.MALE
        if t in ("F", "W", "FEMALE"):
            return cls.FEMALE
        return cls.UNKNOWN


@dataclass(frozen=True)
class AthleteMeta:
    athlete_id: int
    gender: Gender = Gender.UNKNOWN
    birth_date: date | None = None


class Parameterization(str, enum.Enum):
    TIME = "time"
    NORMALIZED = "normalized"
    LOG_TIME = "log_time"
    SPEED = "speed"


def to_time(values, distances, param, scale=None) -> np.ndarray:
    """Convert performances in ``param`` coordinates back to seconds.

    ``distances`` and ``scale`` broadcast against ``values`` along the last
    axis. ``scale`` holds the per-event mean times used by the normalized
    parameterization.
    """
    param = Parameterization(param)
    v = np.asarray(values, dtype=float)
    if param is Parameterization.TIME:
        return v.copy()
    if param is Parameterization.LOG_TIME:
        return np.exp(v)
    if param is Parameterization.SPEED:
        return np.asarray(distances, dtype=float) / v
    if scale is None:
        raise DataError("normalized values need the per-event mean times")
    return v * np.asarray(scale, dtype=float)


def from_time(times, distances, param, scale=None) -> np.ndarray:
    """Inverse of :func:`to_time`."""
    param = Parameterization(param)
    t = np.asarray(times, dtype=float)
    if param is Parameterization.TIME:
        return t.copy()
    if param is Parameterization.LOG_TIME:
        return np.log(t)
    if param is Parameterization.SPEED:
        return np.asarray(distances, dtype=float) / t
    if scale is None:
        raise DataError("normalized values need the per-event mean times")
    return t / np.asarray(scale, dtype=float)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PerformanceTable:
    values: np.ndarray
    catalog: EventCatalog = field(default_factory=EventCatalog.default)
    athletes: tuple[AthleteMeta, ...] = ()
    dates: np.ndarray | None = None
    parameterization: Parameterization = Parameterization.TIME
    scale: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.catalog):
            raise DataError(
                f"grid must be n_athletes x {len(self.catalog)}, got {values.shape}"
            )
        n = values.shape[0]
        athletes = tuple(self.athletes) or tuple(AthleteMeta(i) for i in range(n))
        if len(athletes) != n:
            raise DataError("one athlete record is required per row")
        if self.dates is None:
            dates = np.full(values.shape, NAT)
        else:
            dates = np.asarray(self.dates, dtype="datetime64[D]")
            if dates.shape != values.shape:
                raise DataError("date grid must match the value grid")
        param = Parameterization(self.parameterization)
        present = ~np.isnan(values)
        if param in (Parameterization.TIME, Parameterization.SPEED) and np.any(
            values[present] <= 0
        ):
            raise DataError(f"{param.value} entries must be positive")
        scale = self.scale
        if param is Parameterization.NORMALIZED:
            if scale is None:
                raise DataError("normalized table needs per-event mean times")
            scale = _frozen(np.asarray(scale, dtype=float))
        elif scale is not None:
            scale = _frozen(np.asarray(scale, dtype=float))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "dates", _frozen(dates))
        object.__setattr__(self, "athletes", athletes)
        object.__setattr__(self, "parameterization", param)
        object.__setattr__(self, "scale", scale)

    @property
    def n_athletes(self) -> int:
        return self.values.shape[0]

    @property
    def n_events(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def distances(self) -> np.ndarray:
        return self.catalog.distances

    def with_values(self, values: np.ndarray, dates: np.ndarray | None = None) -> PerformanceTable:
        """Same table with a new grid; dates of now-missing entries are cleared."""
        values = np.asarray(values, dtype=float)
        dates = self.dates if dates is None else dates
        dates = np.where(np.isnan(values), NAT, dates)
        return replace(self, values=values, dates=dates)

    def mask(self, hide: np.ndarray) -> PerformanceTable:
        """Copy with the entries where ``hide`` is true set to missing."""
        v = np.array(self.values)
        v[hide] = np.nan
        return self.with_values(v)

    def select_rows(self, rows: Sequence[int] | np.ndarray) -> PerformanceTable:
        rows = np.asarray(rows, dtype=int)
        return replace(
            self,
            values=self.values[rows],
            dates=self.dates[rows],
            athletes=tuple(self.athletes[i] for i in rows),
        )

    def append_rows(self, values: np.ndarray, athletes: Iterable[AthleteMeta] | None = None) -> PerformanceTable:
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if athletes is None:
            start = max((a.athlete_id for a in self.athletes), default=-1) + 1
            athletes = [AthleteMeta(start + i) for i in range(values.shape[0])]
        return replace(
            self,
            values=np.vstack([self.values, values]),
            dates=np.vstack([self.dates, np.full(values.shape, NAT)]),
            athletes=self.athletes + tuple(athletes),
        )

    def times(self) -> np.ndarray:
        """The grid converted to seconds."""
        return to_time(self.values, self.distances, self.parameterization, self.scale)

    def value_to_time(self, value: float, col: int) -> float:
        scale = None if self.scale is None else self.scale[col]
        return float(to_time(value, self.distances[col], self.parameterization, scale))

    def time_to_value(self, seconds: float, col: int) -> float:
        scale = None if self.scale is None else self.scale[col]
        return float(from_time(seconds, self.distances[col], self.parameterization, scale))


# ---------------------------------------------------------------------------
# summary statistics


def _slowness(table: PerformanceTable) -> np.ndarray:
    # larger = slower in every parameterization except speed
    if table.parameterization is Parameterization.SPEED:
        return -table.values
    return table.values


def column_percentiles(column: np.ndarray) -> np.ndarray:
    """Percentiles of one column where larger values are slower.

    A present entry scores 100 * (number of strictly slower entries) /
    (present - 1); tied entries share the mean of their tied ranks and a
    lone entry scores 50. Missing entries stay ``NaN``.
    """
    column = np.asarray(column, dtype=float)
    out = np.full(column.shape, np.nan)
    ok = ~np.isnan(column)
    n = int(ok.sum())
    if n == 0:
        return out
    if n == 1:
        out[ok] = 50.0
        return out
    ranks = rankdata(column[ok], method="average")
    out[ok] = 100.0 * (n - ranks) / (n - 1)
    return out


def event_percentiles(table: PerformanceTable) -> np.ndarray:
    """Per-event percentile grid with the table's missingness pattern."""
    slow = _slowness(table)
    return np.column_stack([column_percentiles(slow[:, j]) for j in range(table.n_events)])


def percentile_of(column: np.ndarray, value: float, *, larger_is_slower: bool = True) -> float:
    """Percentile a new ``value`` would get when added to ``column``."""
    column = np.asarray(column, dtype=float)
    column = column[~np.isnan(column)]
    col = np.append(column, value)
    if not larger_is_slower:
        col = -col
    return float(column_percentiles(col)[-1])


def preferred_distance(distances: Iterable[float]) -> float:
    """Geometric mean of the attempted distances."""
    d = np.asarray(list(distances), dtype=float)
    if d.size == 0:
        raise InsufficientData("no attempts")
    return float(np.exp(np.mean(np.log(d))))


def training_standard(percentile_row: Iterable[float]) -> float:
    """Mean of the present percentiles in a row."""
    p = np.asarray(list(percentile_row), dtype=float)
    p = p[~np.isnan(p)]
    if p.size == 0:
        raise InsufficientData("no percentiles")
    return float(p.mean())


@dataclass(frozen=True)
class AthleteSummary:
    percentiles: tuple[float, ...]
    preferred_distance: float
    training_standard: float
    n_events: int


def athlete_summaries(table: PerformanceTable) -> list[AthleteSummary | None]:
    """Summaries for every row; rows without any entry map to ``None``."""
    pct = event_percentiles(table)
    dist = table.distances
    out: list[AthleteSummary | None] = []
    for i in range(table.n_athletes):
        ok = ~np.isnan(table.values[i])
        if not ok.any():
            out.append(None)
            continue
        out.append(
            AthleteSummary(
                percentiles=tuple(float(x) for x in pct[i]),
                preferred_distance=preferred_distance(dist[ok]),
                training_standard=training_standard(pct[i]),
                n_events=int(ok.sum()),
            )
        )
    return out


def reparameterize(table: PerformanceTable, target: Parameterization | str) -> PerformanceTable:
    """Return the table with present entries transformed to ``target``.

    normalized: time divided by the per-event mean of present times;
    log_time: natural log of seconds; speed: meters per second.
    """
    try:
        target = Parameterization(target)
    except ValueError:
        raise DataError(f"unknown parameterization {target!r}") from None
    times = table.times()
    ok = ~np.isnan(times)
    if np.any(times[ok] <= 0):
        raise DataError("times must be positive")
    scale = None
    if target is Parameterization.NORMALIZED:
        with np.errstate(invalid="ignore"):
            counts = ok.sum(axis=0)
            sums = np.where(ok, times, 0.0).sum(axis=0)
            scale = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    values = from_time(times, table.distances, target, scale)
    return replace(table, values=values, parameterization=target, scale=scale)


# ---------------------------------------------------------------------------
# TSV grid + JSON sidecar


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_table(table: PerformanceTable, path: str | Path, provenance: dict | None = None) -> None:
    """Write ``path`` (TSV grid) and its ``.json`` metadata sidecar."""
    path = Path(path)
    lines = ["\t".join(["athlete_id", *table.catalog.labels])]
    for meta, row in zip(table.athletes, table.values):
        lines.append("\t".join([str(meta.athlete_id), *(_fmt(x) for x in row)]))
    path.write_text("\n".join(lines) + "\n")
    dates = [
        [None if np.isnat(d) else str(d) for d in row] for row in table.dates
    ]
    meta = {
        "parameterization": table.parameterization.value,
        "catalog": table.catalog.to_json(),
        "scale": None if table.scale is None else [None if math.isnan(s) else float(s) for s in table.scale],
        "athletes": [
            {
                "athlete_id": a.athlete_id,
                "gender": a.gender.value,
                "birth_date": a.birth_date.isoformat() if a.birth_date else None,
            }
            for a in table.athletes
        ],
        "dates": dates,
    }
    if provenance is not None:
        meta["provenance"] = provenance
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_table(path: str | Path) -> PerformanceTable:
    path = Path(path)
    rows = [ln.split("\t") for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows:
        raise DataError(f"{path}: empty table file")
    header, body = rows[0], rows[1:]
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    catalog = EventCatalog.from_json(meta["catalog"]) if "catalog" in meta else EventCatalog.default()
    if [catalog.index(h) for h in header[1:]] != list(range(len(catalog))):
        raise DataError(f"{path}: header does not match the event catalog")
    values = np.full((len(body), len(catalog)), np.nan)
    ids = []
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{path}: line {i + 2} has {len(row)} fields, expected {len(header)}")
        ids.append(int(row[0]))
        for j, cell in enumerate(row[1:]):
            if cell.strip():
                values[i, j] = float(cell)
    if "athletes" in meta:
        athletes = tuple(
            AthleteMeta(
                int(a["athlete_id"]),
                Gender.parse(a.get("gender")),
                date.fromisoformat(a["birth_date"]) if a.get("birth_date") else None,
            )
            for a in meta["athletes"]
        )
    else:
        athletes = tuple(AthleteMeta(i) for i in ids)
    dates = None
    if meta.get("dates") is not None:
        dates = np.array(
            [[NAT if d is None else np.datetime64(d, "D") for d in row] for row in meta["dates"]],
            dtype="datetime64[D]",
        ).reshape(values.shape)
    scale = meta.get("scale")
    if scale is not None:
        scale = np.array([np.nan if s is None else s for s in scale], dtype=float)
    return PerformanceTable(
        values=values,
        catalog=catalog,
        athletes=athletes,
        dates=dates,
        parameterization=Parameterization(meta.get("parameterization", "time")),
        scale=scale,
    )
