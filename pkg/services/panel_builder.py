# =============================================================
# ImpactLens - Panel Builder
#
# Source loaders and the daily aggregation step:
#   - ingest_transactions() / load_transactions()
#   - ingest_licenses()     / load_licenses()
#   - aggregate_daily()     -> DailyPanel
#   - log_offset() / inverse_log_offset()
#
# Rows that cannot be used are counted by reason, never dropped
# silently. Dates carry no time zone; the unit is the civil day.
# =============================================================

from __future__ import annotations

import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, timedelta
from enum import Enum
from typing import Any, Iterable, Mapping

import numpy as np
import pandas as pd

from services.errors import IngestionError

logger = logging.getLogger(__name__)

DEFAULT_OFFSET = 0.1

TRANSACTION_COLUMNS = (
    "date", "firearm_type", "dealer_id", "dealer_zip", "purchaser_id", "make", "model",
)
LICENSE_COLUMNS = ("issue_date", "kind")

# Optional column; when present only dealer sales are kept.
TRANSACTION_TYPE_COLUMN = "transaction_type"
_SALE_VALUES = frozenset({"", "sale"})

_EXCLUDED_TYPES = frozenset({"machinegun", "machine_gun", "machine gun"})
_ZIP_RE = re.compile(r"^\d{5}$")


# ------------------------------------------------------------------ #
# Domain types
# ------------------------------------------------------------------ #

class FirearmType(str, Enum):
    HANDGUN = "Handgun"
    TAW_RIFLE = "TAWRifle"
    NON_TAW_RIFLE = "NonTAWRifle"
    SHOTGUN = "Shotgun"

    @classmethod
    def parse(cls, value: str) -> "FirearmType":
        cleaned = value.strip().replace("-", "").replace(" ", "").lower()
        for member in cls:
            if member.value.lower() == cleaned:
                return member
        raise ValueError(f"unknown firearm_type: {value!r}")


SERIES_ORDER: tuple[str, ...] = tuple(t.value for t in FirearmType)


class LicenseKind(str, Enum):
    NEW = "New"
    RENEWAL = "Renewal"

    @classmethod
    def parse(cls, value: str) -> "LicenseKind":
        cleaned = value.strip().lower()
        for member in cls:
            if member.value.lower() == cleaned:
                return member
        raise ValueError(f"unknown license kind: {value!r}")


@dataclass(frozen=True)
class TransactionRecord:
    """One registered dealer sale."""
    date: date
    firearm_type: FirearmType
    dealer_id: str
    dealer_zip: str | None
    purchaser_id: str
    make: str
    model: str


@dataclass(frozen=True)
class LicenseRecord:
    issue_date: date
    kind: LicenseKind


@dataclass(frozen=True)
class RowError:
    row: int
    reason: str
    detail: str


@dataclass
class IngestionResult:
    """Parsed records plus the accounting of everything that was not kept."""
    records: list[Any]
    rows_read: int
    rejected: dict[str, int] = field(default_factory=dict)
    duplicates: int = 0
    errors: list[RowError] = field(default_factory=list)

    @property
    def accepted(self) -> int:
        return len(self.records)

    def summary(self, source: str) -> dict[str, Any]:
        return {
            "source": source,
            "rows_read": self.rows_read,
            "accepted": self.accepted,
            "rejected": dict(sorted(self.rejected.items())),
            "duplicates": self.duplicates,
            "errors": [
                {"row": e.row, "reason": e.reason, "detail": e.detail} for e in self.errors
            ],
        }


# ------------------------------------------------------------------ #
# Log transform
# ------------------------------------------------------------------ #

def log_offset(count, offset: float = DEFAULT_OFFSET):
    """ln(count + offset). Accepts scalars or arrays."""
    if offset <= 0:
        raise ValueError(f"offset must be > 0, got {offset}")
    values = np.asarray(count, dtype=float)
    if np.any(values < 0):
        raise ValueError("counts must be nonnegative")
    result = np.log(values + offset)
    return float(result) if result.ndim == 0 else result


def inverse_log_offset(v, offset: float = DEFAULT_OFFSET):
    """max(exp(v) - offset, 0). Never returns a negative count."""
    if offset <= 0:
        raise ValueError(f"offset must be > 0, got {offset}")
    result = np.maximum(np.exp(np.asarray(v, dtype=float)) - offset, 0.0)
    return float(result) if result.ndim == 0 else result


@dataclass(frozen=True)
class LogSeries:
    """Log-scale values tagged with the offset that produced them."""
    values: np.ndarray
    offset: float = DEFAULT_OFFSET

    def __post_init__(self):
        if self.offset <= 0:
            raise ValueError(f"offset must be > 0, got {self.offset}")
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_counts(cls, counts, offset: float = DEFAULT_OFFSET) -> "LogSeries":
        return cls(np.atleast_1d(log_offset(counts, offset)), offset)

    def to_counts(self) -> np.ndarray:
        return np.atleast_1d(inverse_log_offset(self.values, self.offset))

    def __len__(self) -> int:
        return len(self.values)


# ------------------------------------------------------------------ #
# Daily panel
# ------------------------------------------------------------------ #

@dataclass(frozen=True)
class DailyPanel:
    """
    Contiguous daily counts: `counts` is [T days x J series], license
    vectors are length T. Arrays are read-only after construction.
    """
    start_date: date
    counts: np.ndarray
    new_licenses: np.ndarray
    renewal_licenses: np.ndarray
    series_names: tuple[str, ...]
    offset: float = DEFAULT_OFFSET
    excluded: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        counts = np.array(self.counts, dtype=np.int64)
        if counts.ndim == 1:
            counts = counts[:, None]
        if counts.ndim != 2 or counts.shape[0] < 1 or counts.shape[1] < 1:
            raise ValueError(f"counts must be a non-empty T x J matrix, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        n_days = counts.shape[0]

        arrays = {}
        for name in ("new_licenses", "renewal_licenses"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            if arr.shape != (n_days,):
                raise ValueError(f"{name} must have length {n_days}, got shape {arr.shape}")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be nonnegative")
            arrays[name] = arr

        names = tuple(self.series_names)
        if len(names) != counts.shape[1]:
            raise ValueError(f"expected {counts.shape[1]} series names, got {len(names)}")
        if len(set(names)) != len(names):
            raise ValueError("series names must be unique")
        if self.offset <= 0:
            raise ValueError(f"offset must be > 0, got {self.offset}")

        for arr in (counts, *arrays.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "new_licenses", arrays["new_licenses"])
        object.__setattr__(self, "renewal_licenses", arrays["renewal_licenses"])
        object.__setattr__(self, "series_names", names)
        object.__setattr__(self, "excluded", dict(self.excluded))

    # -- shape ---------------------------------------------------------

    @property
    def n_days(self) -> int:
        return self.counts.shape[0]

    @property
    def n_series(self) -> int:
        return self.counts.shape[1]

    @property
    def end_date(self) -> date:
        return self.start_date + timedelta(days=self.n_days - 1)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start_date, periods=self.n_days, freq="D")

    def index_of(self, day: date) -> int:
        idx = (day - self.start_date).days
        if not 0 <= idx < self.n_days:
            raise ValueError(f"{day} is outside the panel ({self.start_date}..{self.end_date})")
        return idx

    def series_index(self, name: str) -> int:
        try:
            return self.series_names.index(name)
        except ValueError:
            raise ValueError(f"unknown series {name!r}; panel has {list(self.series_names)}") from None

    # -- log scale -----------------------------------------------------

    def log_series(self, j: int) -> LogSeries:
        return LogSeries.from_counts(self.counts[:, j], self.offset)

    def log_sales(self) -> np.ndarray:
        return log_offset(self.counts, self.offset)

    def log_new_licenses(self) -> np.ndarray:
        return np.atleast_1d(log_offset(self.new_licenses, self.offset))

    def log_renewal_licenses(self) -> np.ndarray:
        return np.atleast_1d(log_offset(self.renewal_licenses, self.offset))

    # -- slicing -------------------------------------------------------

    def window(self, start: date, end: date) -> "DailyPanel":
        """Inclusive date slice."""
        if end < start:
            raise ValueError(f"window end {end} precedes start {start}")
        i0, i1 = self.index_of(start), self.index_of(end)
        return DailyPanel(
            start_date=start,
            counts=self.counts[i0:i1 + 1],
            new_licenses=self.new_licenses[i0:i1 + 1],
            renewal_licenses=self.renewal_licenses[i0:i1 + 1],
            series_names=self.series_names,
            offset=self.offset,
        )

    def before(self, cutoff: date) -> "DailyPanel":
        """Every date strictly before `cutoff`."""
        if cutoff <= self.start_date:
            raise ValueError(f"cutoff {cutoff} leaves no data before it")
        last = min(cutoff - timedelta(days=1), self.end_date)
        return self.window(self.start_date, last)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.counts, columns=list(self.series_names))
        frame.insert(0, "date", self.dates.strftime("%Y-%m-%d"))
        frame["new_licenses"] = self.new_licenses
        frame["renewal_licenses"] = self.renewal_licenses
        return frame


# ------------------------------------------------------------------ #
# Source loaders
# ------------------------------------------------------------------ #

def _comment_lines(path: str) -> int:
    """Leading lines starting with '#' (report bundles write one)."""
    count = 0
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            count += 1
    return count


def _read_delimited(path: str, required: tuple[str, ...]) -> pd.DataFrame:
    if not os.path.isfile(path):
        logger.error("File not found: %s", path)
        raise IngestionError(f"file not found: {path}")
    try:
        frame = pd.read_csv(
            path, dtype=str, keep_default_na=False, sep=None, engine="python",
            skiprows=_comment_lines(path),
        )
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.error("Unreadable file %s: %s", path, e)
        raise IngestionError(f"unreadable file {path}: {e}") from e
    frame.columns = [c.strip().lower() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise IngestionError(f"{path} is missing columns: {missing}")
    return frame


def _as_frame(record_stream, required: tuple[str, ...]) -> pd.DataFrame:
    if isinstance(record_stream, pd.DataFrame):
        frame = record_stream.fillna("").astype(str)
    else:
        frame = pd.DataFrame(list(record_stream), dtype=str)
        if frame.empty:
            frame = pd.DataFrame(columns=list(required), dtype=str)
    frame = frame.copy()
    frame.columns = [str(c).strip().lower() for c in frame.columns]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise IngestionError(f"records are missing columns: {missing}")
    return frame.fillna("")


def _parse_dates(values: pd.Series) -> pd.Series:
    parsed = pd.to_datetime(values.str.strip(), errors="coerce", format="ISO8601")
    return parsed.dt.date.where(parsed.notna(), None)


def _reject(result: IngestionResult, row: int, reason: str, detail: str) -> None:
    result.rejected[reason] = result.rejected.get(reason, 0) + 1
    result.errors.append(RowError(row=row, reason=reason, detail=detail))
    logger.debug("row rejected | row=%d | reason=%s | %s", row, reason, detail)


def ingest_transactions(
    record_stream: Iterable[Mapping[str, str]] | pd.DataFrame,
    study_start: date | None = None,
    study_end: date | None = None,
) -> IngestionResult:
    """
    Parse transaction rows into TransactionRecords.

    Machine-gun rows and non-sale transactions are rejected with a
    reason; so are rows with unparseable dates or unknown types, and
    rows outside the optional study range. Exact duplicate rows are
    kept and counted.
    """
    frame = _as_frame(record_stream, TRANSACTION_COLUMNS)
    result = IngestionResult(records=[], rows_read=len(frame))
    if frame.empty:
        return result

    dates = _parse_dates(frame["date"])
    has_type_column = TRANSACTION_TYPE_COLUMN in frame.columns
    seen: Counter = Counter()

    for row, (values, day) in enumerate(zip(frame.to_dict("records"), dates)):
        if has_type_column and values[TRANSACTION_TYPE_COLUMN].strip().lower() not in _SALE_VALUES:
            _reject(result, row, "non_sale", values[TRANSACTION_TYPE_COLUMN])
            continue
        if day is None:
            _reject(result, row, "bad_date", values["date"])
            continue
        raw_type = values["firearm_type"]
        if raw_type.strip().replace("-", "").lower() in _EXCLUDED_TYPES:
            _reject(result, row, "excluded_type", raw_type)
            continue
        try:
            firearm_type = FirearmType.parse(raw_type)
        except ValueError as e:
            _reject(result, row, "unknown_firearm_type", str(e))
            continue
        if (study_start and day < study_start) or (study_end and day > study_end):
            _reject(result, row, "out_of_study_range", day.isoformat())
            continue

        zip_code = values["dealer_zip"].strip()
        record = TransactionRecord(
            date=day,
            firearm_type=firearm_type,
            dealer_id=values["dealer_id"].strip(),
            dealer_zip=zip_code if _ZIP_RE.match(zip_code) else None,
            purchaser_id=values["purchaser_id"].strip(),
            make=values["make"].strip(),
            model=values["model"].strip(),
        )
        if seen[record]:
            result.duplicates += 1
        seen[record] += 1
        result.records.append(record)

    logger.info(
        "ingest_transactions complete | rows=%d | accepted=%d | rejected=%d | duplicates=%d",
        result.rows_read, result.accepted, sum(result.rejected.values()), result.duplicates,
    )
    return result


def ingest_licenses(
    record_stream: Iterable[Mapping[str, str]] | pd.DataFrame,
) -> IngestionResult:
    """Parse license rows into LicenseRecords (kind is New or Renewal)."""
    frame = _as_frame(record_stream, LICENSE_COLUMNS)
    result = IngestionResult(records=[], rows_read=len(frame))
    if frame.empty:
        return result

    dates = _parse_dates(frame["issue_date"])
    for row, (kind, day) in enumerate(zip(frame["kind"], dates)):
        if day is None:
            _reject(result, row, "bad_date", frame["issue_date"].iloc[row])
            continue
        try:
            result.records.append(LicenseRecord(issue_date=day, kind=LicenseKind.parse(kind)))
        except ValueError as e:
            _reject(result, row, "unknown_kind", str(e))

    logger.info(
        "ingest_licenses complete | rows=%d | accepted=%d | rejected=%d",
        result.rows_read, result.accepted, sum(result.rejected.values()),
    )
    return result


def load_transactions(
    path: str,
    study_start: date | None = None,
    study_end: date | None = None,
) -> IngestionResult:
    logger.info("Reading transactions: %s", path)
    return ingest_transactions(_read_delimited(path, TRANSACTION_COLUMNS), study_start, study_end)


def load_licenses(path: str) -> IngestionResult:
    logger.info("Reading licenses: %s", path)
    return ingest_licenses(_read_delimited(path, LICENSE_COLUMNS))


# ------------------------------------------------------------------ #
# Aggregation
# ------------------------------------------------------------------ #

def aggregate_daily(
    transactions: Iterable[TransactionRecord],
    licenses: Iterable[LicenseRecord],
    start_date: date,
    end_date: date,
    offset: float = DEFAULT_OFFSET,
    series_names: tuple[str, ...] = SERIES_ORDER,
) -> DailyPanel:
    """
    Count records per day and series over [start_date, end_date].

    Every date in range is present; records outside the range are
    excluded and reported in `DailyPanel.excluded`.
    """
    if end_date < start_date:
        raise ValueError(f"start_date {start_date} is after end_date {end_date}")

    n_days = (end_date - start_date).days + 1
    column = {name: j for j, name in enumerate(series_names)}
    counts = np.zeros((n_days, len(series_names)), dtype=np.int64)
    new = np.zeros(n_days, dtype=np.int64)
    renewal = np.zeros(n_days, dtype=np.int64)
    excluded = Counter()

    for record in transactions:
        idx = (record.date - start_date).days
        if not 0 <= idx < n_days:
            excluded["transactions_out_of_range"] += 1
            continue
        j = column.get(record.firearm_type.value)
        if j is None:
            excluded["transactions_unlisted_series"] += 1
            continue
        counts[idx, j] += 1

    for record in licenses:
        idx = (record.issue_date - start_date).days
        if not 0 <= idx < n_days:
            excluded["licenses_out_of_range"] += 1
            continue
        if record.kind is LicenseKind.NEW:
            new[idx] += 1
        else:
            renewal[idx] += 1

    if excluded:
        logger.info("aggregate_daily excluded records | %s", dict(excluded))
    logger.info(
        "aggregate_daily complete | days=%d | series=%d | transactions=%d | licenses=%d",
        n_days, len(series_names), int(counts.sum()), int(new.sum() + renewal.sum()),
    )
    return DailyPanel(
        start_date=start_date,
        counts=counts,
        new_licenses=new,
        renewal_licenses=renewal,
        series_names=tuple(series_names),
        offset=offset,
        excluded=dict(excluded),
    )


# ------------------------------------------------------------------ #
# Writers (same schema the loaders read)
# ------------------------------------------------------------------ #

def transactions_frame(records: Iterable[TransactionRecord]) -> pd.DataFrame:
    rows = [
        (r.date.isoformat(), r.firearm_type.value, r.dealer_id, r.dealer_zip or "",
         r.purchaser_id, r.make, r.model)
        for r in records
    ]
    return pd.DataFrame(rows, columns=list(TRANSACTION_COLUMNS))


def licenses_frame(records: Iterable[LicenseRecord]) -> pd.DataFrame:
    rows = [(r.issue_date.isoformat(), r.kind.value) for r in records]
    return pd.DataFrame(rows, columns=list(LICENSE_COLUMNS))
