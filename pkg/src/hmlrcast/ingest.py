"""Sequence metadata ingestion and time-versioned ("as-of") dataset construction.

Raw metadata rows become :class:`SequenceRecord` objects.  Those are binned into
daily per-location clade counts exactly as they would have looked on a given
date, i.e. using only sequences whose report date is on or before that date.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path
from typing import Iterable, Sequence, TextIO, Union

import numpy as np

log = logging.getLogger(__name__)

REFERENCE_LABEL = "other"
MAX_MODELED_CLADES = 9
CLADE_THRESHOLD = 0.01
LOOKBACK_DAYS = 150
EVALUATION_LAG_DAYS = 91
FIRST_HORIZON = -31
LAST_HORIZON = 10
SELECTION_WEEKS = 3

_FULL_DATE = re.compile(r"^\d{4}-\d{2}-\d{2}$")
_YEARISH = re.compile(r"^\d{4}")

_LOCATION_ALIASES = {
    "District of Columbia": "DC",
    "Washington D.C.": "DC",
    "Washington, D.C.": "DC",
}


class MetadataFormatError(ValueError):
    """Raised for unreadable metadata files (bad header, or bad rows in strict mode)."""


def load_jurisdictions(path: str | Path | None = None) -> dict[str, str]:
    """Read a ``code<TAB>name`` jurisdiction list; ``#`` lines are comments.

    Without ``path`` the bundled list (50 states, DC and Puerto Rico) is used.
    """
    if path is None:
        text = files("hmlrcast.data").joinpath("jurisdictions.txt").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    out: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        code, _, name = line.partition("\t")
        out[code.strip()] = name.strip() or code.strip()
    return out


JURISDICTIONS = load_jurisdictions()
DEFAULT_LOCATIONS: tuple[str, ...] = tuple(JURISDICTIONS)


@dataclass(frozen=True, slots=True)
class SequenceRecord:
    location: str
    collection_date: dt.date
    report_date: dt.date
    clade: str

    def __post_init__(self):
        if self.report_date < self.collection_date:
            raise ValueError(
                f"report date {self.report_date} precedes collection date {self.collection_date}"
            )
        if not self.clade:
            raise ValueError("clade label must be non-empty")


@dataclass(frozen=True)
class MetadataColumns:
    collection_date: str = "date"
    report_date: str = "date_submitted"
    location: str = "division"
    clade: str = "clade_nextstrain"
    host: str = "host"
    country: str = "country"


@dataclass(frozen=True)
class MetadataFilter:
    """Which rows of a metadata file are kept."""

    hosts: tuple[str, ...] = ("Homo sapiens",)
    countries: tuple[str, ...] = ("USA",)
    locations: tuple[str, ...] = DEFAULT_LOCATIONS
    columns: MetadataColumns = field(default_factory=MetadataColumns)
    strict: bool = False


def _parse_date(value: str | None) -> tuple[dt.date | None, str | None]:
    """Return ``(date, None)`` or ``(None, drop_reason)``."""
    value = (value or "").strip()
    if _FULL_DATE.match(value):
        try:
            return dt.date.fromisoformat(value), None
        except ValueError:
            return None, "malformed_row"
    if not value or value == "?" or _YEARISH.match(value):
        return None, "partial_date"
    return None, "malformed_row"


def _location_lookup(codes: Iterable[str]) -> dict[str, str]:
    codes = set(codes)
    lookup = {}
    for code, name in JURISDICTIONS.items():
        if code in codes:
            lookup[name] = code
            lookup[code] = code
    for alias, code in _LOCATION_ALIASES.items():
        if code in codes:
            lookup[alias] = code
    return lookup


def parse_metadata(
    stream: TextIO, filter: MetadataFilter | None = None
) -> tuple[list[SequenceRecord], Counter]:
    """Parse a tab-separated metadata stream into sequence records.

    Rows are dropped for non-human hosts, out-of-scope geography, dates lacking
    day precision, a missing clade, or a report date before the collection
    date.  The second return value counts drops by reason.  Unparseable rows are
    counted as ``malformed_row`` unless ``filter.strict`` is set, in which case
    :class:`MetadataFormatError` is raised with the line number.
    """
    filter = filter or MetadataFilter()
    cols = filter.columns
    reader = csv.DictReader(stream, delimiter="\t")
    header = reader.fieldnames
    if not header:
        raise MetadataFormatError("metadata stream has no header row")
    required = [cols.collection_date, cols.report_date, cols.location, cols.clade, cols.host, cols.country]
    missing = [c for c in required if c not in header]
    if missing:
        raise MetadataFormatError(f"metadata header lacks required columns: {missing}")

    hosts = set(filter.hosts)
    countries = set(filter.countries)
    locations = _location_lookup(filter.locations)
    drops: Counter = Counter()
    records: list[SequenceRecord] = []

    for row in reader:
        lineno = reader.line_num
        if None in row or any(row.get(c) is None for c in required):
            if filter.strict:
                raise MetadataFormatError(f"line {lineno}: wrong number of fields")
            drops["malformed_row"] += 1
            continue
        if row[cols.host].strip() not in hosts:
            drops["non_human_host"] += 1
            continue
        if row[cols.country].strip() not in countries:
            drops["out_of_scope_country"] += 1
            continue
        code = locations.get(row[cols.location].strip())
        if code is None:
            drops["out_of_scope_location"] += 1
            continue
        collected, why = _parse_date(row[cols.collection_date])
        reported, why2 = _parse_date(row[cols.report_date])
        reason = why or why2
        if reason is not None:
            if reason == "malformed_row" and filter.strict:
                raise MetadataFormatError(f"line {lineno}: unparseable date")
            drops[reason] += 1
            continue
        clade = row[cols.clade].strip()
        if not clade or clade == "?":
            drops["missing_clade"] += 1
            continue
        if reported < collected:
            drops["report_before_collection"] += 1
            continue
        records.append(SequenceRecord(code, collected, reported, clade))

    log.info("parsed %d records, dropped %s", len(records), dict(drops))
    return records, drops


def write_metadata(
    records: Iterable[SequenceRecord],
    stream: TextIO,
    columns: MetadataColumns | None = None,
    host: str = "Homo sapiens",
    country: str = "USA",
) -> None:
    """Write records in the tab-separated layout :func:`parse_metadata` reads."""
    cols = columns or MetadataColumns()
    writer = csv.writer(stream, delimiter="\t", lineterminator="\n")
    writer.writerow(["strain", cols.collection_date, cols.report_date, cols.location,
                     cols.country, cols.host, cols.clade])
    for i, r in enumerate(records):
        writer.writerow([f"synthetic/{i}", r.collection_date.isoformat(), r.report_date.isoformat(),
                         JURISDICTIONS.get(r.location, r.location), country, host, r.clade])


# --------------------------------------------------------------------------
# MMWR weeks
# --------------------------------------------------------------------------

def mmwr_year_start(year: int) -> dt.date:
    """Sunday that starts MMWR week 1 of ``year`` (the week holding January 4)."""
    jan4 = dt.date(year, 1, 4)
    return jan4 - dt.timedelta(days=(jan4.weekday() + 1) % 7)


def mmwr_week(d: dt.date) -> tuple[int, int]:
    """Return ``(epi_year, epi_week)``; weeks run Sunday through Saturday."""
    year = d.year
    start = mmwr_year_start(year)
    if d < start:
        year -= 1
        start = mmwr_year_start(year)
    else:
        following = mmwr_year_start(year + 1)
        if d >= following:
            year += 1
            start = following
    return year, (d - start).days // 7 + 1


def week_sunday(d: dt.date) -> dt.date:
    return d - dt.timedelta(days=(d.weekday() + 1) % 7)


# --------------------------------------------------------------------------
# columnar view of records
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RecordTable:
    """Column arrays over a record list; dates are stored as proleptic ordinals."""

    locations: tuple[str, ...]
    clade_labels: tuple[str, ...]
    location_idx: np.ndarray
    collection: np.ndarray
    report: np.ndarray
    clade_idx: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[SequenceRecord], locations: Sequence[str] | None = None):
        locations = tuple(locations) if locations is not None else tuple(
            sorted({r.location for r in records})
        )
        loc_pos = {c: i for i, c in enumerate(locations)}
        labels = tuple(sorted({r.clade for r in records}))
        lab_pos = {c: i for i, c in enumerate(labels)}
        n = len(records)
        loc = np.empty(n, dtype=np.int64)
        col = np.empty(n, dtype=np.int64)
        rep = np.empty(n, dtype=np.int64)
        cla = np.empty(n, dtype=np.int64)
        for i, r in enumerate(records):
            loc[i] = loc_pos.get(r.location, -1)
            col[i] = r.collection_date.toordinal()
            rep[i] = r.report_date.toordinal()
            cla[i] = lab_pos[r.clade]
        keep = loc >= 0
        return cls(locations, labels, loc[keep], col[keep], rep[keep], cla[keep])

    def __len__(self) -> int:
        return len(self.location_idx)

    def with_locations(self, locations: Sequence[str]) -> "RecordTable":
        locations = tuple(locations)
        if locations == self.locations:
            return self
        pos = {c: i for i, c in enumerate(locations)}
        remap = np.array([pos.get(c, -1) for c in self.locations] + [-1], dtype=np.int64)
        loc = remap[self.location_idx]
        keep = loc >= 0
        return RecordTable(locations, self.clade_labels, loc[keep], self.collection[keep],
                           self.report[keep], self.clade_idx[keep])


RecordsLike = Union[Sequence[SequenceRecord], RecordTable]


def as_table(records: RecordsLike, locations: Sequence[str] | None = None) -> RecordTable:
    if isinstance(records, RecordTable):
        return records if locations is None else records.with_locations(locations)
    return RecordTable.from_records(records, locations)


# --------------------------------------------------------------------------
# clade selection
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CladeSet:
    """Modeled clades plus the trailing reference category ``"other"``."""

    modeled: tuple[str, ...]
    degenerate: bool = False

    def __post_init__(self):
        modeled = tuple(self.modeled)
        object.__setattr__(self, "modeled", modeled)
        if len(set(modeled)) != len(modeled):
            raise ValueError("duplicate clade labels")
        if REFERENCE_LABEL in modeled:
            raise ValueError(f"{REFERENCE_LABEL!r} cannot be a modeled clade")
        if len(modeled) > MAX_MODELED_CLADES:
            raise ValueError(f"at most {MAX_MODELED_CLADES} modeled clades")

    @property
    def reference_label(self) -> str:
        return REFERENCE_LABEL

    @property
    def labels(self) -> tuple[str, ...]:
        return self.modeled + (REFERENCE_LABEL,)

    @property
    def V(self) -> int:
        return len(self.modeled) + 1

    def category_of(self, label: str) -> int:
        try:
            return self.modeled.index(label)
        except ValueError:
            return len(self.modeled)

    def to_dict(self) -> dict:
        return {"modeled": list(self.modeled), "reference": REFERENCE_LABEL, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d: dict) -> "CladeSet":
        return cls(tuple(d["modeled"]), bool(d.get("degenerate", False)))


def selection_weeks(submission_date: dt.date) -> list[tuple[dt.date, dt.date]]:
    """The three complete MMWR weeks (Sunday, Saturday) before the submission week."""
    sunday = week_sunday(submission_date)
    weeks = []
    for k in range(SELECTION_WEEKS, 0, -1):
        start = sunday - dt.timedelta(days=7 * k)
        weeks.append((start, start + dt.timedelta(days=6)))
    return weeks


def select_clades(records: RecordsLike, submission_date: dt.date) -> CladeSet:
    """Pick up to nine clades with >= 1% national share in any of the last three complete weeks.

    Only sequences reported by ``submission_date`` are counted; weeks are binned
    by collection date.  When more than nine clades qualify, the nine with the
    largest three-week count win, ties broken by label.
    """
    if submission_date.weekday() != 2:
        raise ValueError(f"submission date {submission_date} is not a Wednesday")
    table = as_table(records)
    weeks = selection_weeks(submission_date)
    asof = submission_date.toordinal()
    n_labels = len(table.clade_labels)
    weekly = np.zeros((len(weeks), n_labels), dtype=np.int64)
    available = table.report <= asof
    for w, (start, end) in enumerate(weeks):
        sel = available & (table.collection >= start.toordinal()) & (table.collection <= end.toordinal())
        weekly[w] = np.bincount(table.clade_idx[sel], minlength=n_labels)

    totals = weekly.sum(axis=1)
    if totals.sum() == 0:
        return CladeSet((), degenerate=True)
    share = weekly / np.maximum(totals, 1)[:, None]
    qualifies = (share >= CLADE_THRESHOLD).any(axis=0)
    window_count = weekly.sum(axis=0)
    candidates = [
        (int(window_count[i]), table.clade_labels[i])
        for i in np.flatnonzero(qualifies)
        if table.clade_labels[i] != REFERENCE_LABEL
    ]
    candidates.sort(key=lambda x: (-x[0], x[1]))
    chosen = sorted(label for _, label in candidates[:MAX_MODELED_CLADES])
    return CladeSet(tuple(chosen))


# --------------------------------------------------------------------------
# as-of datasets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AsOfDataset:
    """Daily counts ``counts[l, t, v]`` for a window, as visible on ``asof_date``."""

    submission_date: dt.date
    asof_date: dt.date
    start_date: dt.date
    locations: tuple[str, ...]
    clades: CladeSet
    counts: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 3 or counts.shape[0] != len(self.locations) or counts.shape[2] != self.clades.V:
            raise ValueError(f"counts shape {counts.shape} inconsistent with locations/clades")
        if (counts < 0).any():
            raise ValueError("negative counts")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "locations", tuple(self.locations))

    @property
    def n_days(self) -> int:
        return self.counts.shape[1]

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=self.n_days - 1)

    @property
    def dates(self) -> list[dt.date]:
        return [self.start_date + dt.timedelta(days=i) for i in range(self.n_days)]

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    @property
    def is_empty(self) -> bool:
        return not self.counts.any()

    def day_index(self, d: dt.date) -> int:
        return (d - self.start_date).days

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` (nonzero cells only) and a ``<stem>.json`` sidecar."""
        stem = Path(stem)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        labels = self.clades.labels
        dates = self.dates
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["location", "date", "clade", "count"])
            for l, t, v in zip(*np.nonzero(self.counts)):
                w.writerow([self.locations[l], dates[t].isoformat(), labels[v], int(self.counts[l, t, v])])
        sidecar = {
            "kind": type(self).__name__,
            "submission_date": self.submission_date.isoformat(),
            "asof_date": self.asof_date.isoformat(),
            "window": [self.start_date.isoformat(), self.end_date.isoformat()],
            "locations": list(self.locations),
            "clades": self.clades.to_dict(),
            **self.meta,
        }
        json_path.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
        return csv_path, json_path

    @classmethod
    def read(cls, stem: str | Path):
        stem = Path(stem)
        side = json.loads(stem.with_suffix(".json").read_text())
        clades = CladeSet.from_dict(side["clades"])
        locations = tuple(side["locations"])
        start, end = (dt.date.fromisoformat(x) for x in side["window"])
        counts = np.zeros((len(locations), (end - start).days + 1, clades.V), dtype=np.int64)
        loc_pos = {c: i for i, c in enumerate(locations)}
        lab_pos = {c: i for i, c in enumerate(clades.labels)}
        with open(stem.with_suffix(".csv"), newline="") as fh:
            for row in csv.DictReader(fh):
                t = (dt.date.fromisoformat(row["date"]) - start).days
                counts[loc_pos[row["location"]], t, lab_pos[row["clade"]]] = int(row["count"])
        meta = {k: v for k, v in side.items()
                if k not in {"kind", "submission_date", "asof_date", "window", "locations", "clades"}}
        kind = EvaluationDataset if side.get("kind") == "EvaluationDataset" else AsOfDataset
        return kind(dt.date.fromisoformat(side["submission_date"]), dt.date.fromisoformat(side["asof_date"]),
                    start, locations, clades, counts, meta)


class EvaluationDataset(AsOfDataset):
    """Counts as of ``submission_date + 91`` over the 42 target dates of that submission."""

    @property
    def horizons(self) -> np.ndarray:
        return np.arange(self.n_days) + (self.start_date - self.submission_date).days


def _count_cube(table: RecordTable, asof: dt.date, start: dt.date, n_days: int,
                clades: CladeSet) -> np.ndarray:
    remap = np.array([clades.category_of(c) for c in table.clade_labels] + [clades.V - 1], dtype=np.int64)
    first = start.toordinal()
    sel = ((table.report <= asof.toordinal()) & (table.collection >= first)
           & (table.collection <= min(first + n_days - 1, asof.toordinal())))
    L, V = len(table.locations), clades.V
    flat = (table.location_idx[sel] * n_days + (table.collection[sel] - first)) * V + remap[table.clade_idx[sel]]
    return np.bincount(flat, minlength=L * n_days * V).reshape(L, n_days, V)


def build_asof_dataset(
    records: RecordsLike,
    submission_date: dt.date,
    clades: CladeSet,
    locations: Sequence[str] | None = None,
    lookback_days: int = LOOKBACK_DAYS,
) -> AsOfDataset:
    """Training counts: reported by ``submission_date``, collected at most ``lookback_days`` earlier.

    Both boundaries are inclusive, so the window holds ``lookback_days + 1`` days.
    """
    table = as_table(records, locations if locations is not None else DEFAULT_LOCATIONS)
    start = submission_date - dt.timedelta(days=lookback_days)
    counts = _count_cube(table, submission_date, start, lookback_days + 1, clades)
    return AsOfDataset(submission_date, submission_date, start, table.locations, clades, counts)


def build_evaluation_dataset(
    records: RecordsLike,
    submission_date: dt.date,
    clades: CladeSet,
    locations: Sequence[str] | None = None,
    lag_days: int = EVALUATION_LAG_DAYS,
) -> EvaluationDataset:
    """Counts as of ``submission_date + lag_days`` on the target dates, in the training clade set."""
    table = as_table(records, locations if locations is not None else DEFAULT_LOCATIONS)
    asof = submission_date + dt.timedelta(days=lag_days)
    start = submission_date + dt.timedelta(days=FIRST_HORIZON)
    n_days = LAST_HORIZON - FIRST_HORIZON + 1
    counts = _count_cube(table, asof, start, n_days, clades)
    return EvaluationDataset(submission_date, asof, start, table.locations, clades, counts)


def build_schedule(start: dt.date, count: int) -> list[tuple[dt.date, dt.date]]:
    """Weekly ``(submission_date, evaluation_date)`` pairs starting on a Wednesday."""
    if start.weekday() != 2:
        raise ValueError(f"schedule must start on a Wednesday, got {start} ({start:%A})")
    if count < 0:
        raise ValueError("count must be non-negative")
    lag = dt.timedelta(days=EVALUATION_LAG_DAYS)
    return [(start + dt.timedelta(weeks=k), start + dt.timedelta(weeks=k) + lag) for k in range(count)]
