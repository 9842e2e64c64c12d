"""
Crime-incident report ingestion.

Parses delimited text exports (NIBRS-style rows: id, date, time, latitude,
longitude, category) into validated :class:`CrimeReport` records, filters them
by category, and persists normalized records as JSON lines.
"""

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, time
from pathlib import Path
from typing import (
    IO,
    Any,
    Dict,
    FrozenSet,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

from .errors import ConfigError, CrimeMapError

logger = logging.getLogger(__name__)

Column = Union[str, int]

REPORT_FIELDS = ("report_id", "date", "time", "latitude", "longitude", "category")

# The source data never enumerates which categories are violent; this
# allowlist is a configurable default.
DEFAULT_VIOLENT_CATEGORIES = frozenset(
    {
        "homicide",
        "assault",
        "battery",
        "robbery",
        "arson",
        "kidnapping",
        "criminal sexual assault",
    }
)


def normalize_category(category: str) -> str:
    """Case-fold and trim a category tag."""
    return category.strip().casefold()


@dataclass(frozen=True)
class CrimeReport:
    """One parsed incident."""

    report_id: str
    date: date
    time: Optional[time]
    latitude: float
    longitude: float
    category: str

    def __post_init__(self) -> None:
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"latitude {self.latitude} out of range")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"longitude {self.longitude} out of range")
        if not self.category.strip():
            raise ValueError("empty category")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "report_id": self.report_id,
            "date": self.date.isoformat(),
            "time": self.time.strftime("%H:%M") if self.time else None,
            "lat": self.latitude,
            "lon": self.longitude,
            "category": self.category,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CrimeReport":
        raw_time = data.get("time")
        return cls(
            report_id=str(data["report_id"]),
            date=date.fromisoformat(data["date"]),
            time=datetime.strptime(raw_time, "%H:%M").time() if raw_time else None,
            latitude=float(data["lat"]),
            longitude=float(data["lon"]),
            category=str(data["category"]),
        )


@dataclass(frozen=True)
class ColumnMapping:
    """
    Where each report field lives in a source file.

    Columns are header names when ``has_header`` is set, otherwise 0-based
    indices. ``time`` may be None for sources without a time-of-day column.
    """

    report_id: Column = 0
    date: Column = 1
    time: Optional[Column] = 2
    latitude: Column = 3
    longitude: Column = 4
    category: Column = 5
    date_format: str = "%m/%d/%Y"
    time_format: str = "%H:%M"
    has_header: bool = False
    delimiter: str = ","

    def __post_init__(self) -> None:
        columns = [c for c in self.columns().values() if c is not None]
        if len(set(columns)) != len(columns):
            raise ConfigError("Each report field must map to a distinct column")
        if self.delimiter not in (",", "\t", ";", "|"):
            raise ConfigError(f"Unsupported delimiter: {self.delimiter!r}")
        for column in columns:
            if self.has_header and not isinstance(column, str):
                raise ConfigError("Header-based mappings need column names")
            if not self.has_header and not isinstance(column, int):
                raise ConfigError("Headerless mappings need column indices")

    def columns(self) -> Dict[str, Optional[Column]]:
        return {name: getattr(self, name) for name in REPORT_FIELDS}

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = dict(self.columns())
        data.update(
            date_format=self.date_format,
            time_format=self.time_format,
            has_header=self.has_header,
            delimiter=self.delimiter,
        )
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ColumnMapping":
        defaults = cls()
        kwargs = {key: data.get(key, getattr(defaults, key)) for key in REPORT_FIELDS}
        if kwargs["time"] in ("", "none"):
            kwargs["time"] = None
        return cls(
            date_format=data.get("date_format", defaults.date_format),
            time_format=data.get("time_format", defaults.time_format),
            has_header=bool(data.get("has_header", defaults.has_header)),
            delimiter=data.get("delimiter", defaults.delimiter),
            **kwargs,
        )


@dataclass(frozen=True)
class CategoryPolicy:
    """Allowlist or denylist of normalized category strings."""

    mode: str = "allowlist"
    categories: FrozenSet[str] = DEFAULT_VIOLENT_CATEGORIES

    def __post_init__(self) -> None:
        if self.mode not in ("allowlist", "denylist"):
            raise ConfigError(f"Unknown category policy mode: {self.mode!r}")
        normalized = frozenset(normalize_category(c) for c in self.categories)
        object.__setattr__(self, "categories", normalized)
        if self.mode == "allowlist" and not normalized:
            raise ConfigError("An allowlist policy needs at least one category")

    def allows(self, category: str) -> bool:
        listed = normalize_category(category) in self.categories
        return listed if self.mode == "allowlist" else not listed

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode, "categories": sorted(self.categories)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CategoryPolicy":
        return cls(
            mode=data.get("mode", "allowlist"),
            categories=frozenset(data.get("categories", DEFAULT_VIOLENT_CATEGORIES)),
        )


@dataclass(frozen=True)
class RowError:
    """A rejected source row."""

    row_number: int
    reason: str
    raw: str = ""


@dataclass
class IngestStats:
    """Counts describing one ingestion run."""

    rows_read: int = 0
    rows_parsed: int = 0
    rows_rejected: int = 0
    rows_after_filter: int = 0
    rejection_reasons: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rows_read": self.rows_read,
            "rows_parsed": self.rows_parsed,
            "rows_rejected": self.rows_rejected,
            "rows_after_filter": self.rows_after_filter,
            "rejection_reasons": dict(sorted(self.rejection_reasons.items())),
        }


class _RowRejected(Exception):
    pass


def _cell(row: Sequence[str], index: Optional[int], name: str) -> str:
    if index is None or index >= len(row):
        raise _RowRejected(f"missing field: {name}")
    value = row[index].strip()
    if not value:
        raise _RowRejected(f"missing field: {name}")
    return value


def _parse_row(
    row: Sequence[str], positions: Dict[str, Optional[int]], mapping: ColumnMapping
) -> CrimeReport:
    report_id = _cell(row, positions["report_id"], "report_id")
    category = _cell(row, positions["category"], "category")

    raw_date = _cell(row, positions["date"], "date")
    try:
        parsed_date = datetime.strptime(raw_date, mapping.date_format).date()
    except ValueError as e:
        raise _RowRejected("unparseable date") from e

    parsed_time: Optional[time] = None
    time_pos = positions["time"]
    if time_pos is not None and time_pos < len(row) and row[time_pos].strip():
        try:
            parsed_time = datetime.strptime(
                row[time_pos].strip(), mapping.time_format
            ).time()
        except ValueError as e:
            raise _RowRejected("unparseable time") from e

    try:
        latitude = float(_cell(row, positions["latitude"], "latitude"))
        longitude = float(_cell(row, positions["longitude"], "longitude"))
    except ValueError as e:
        raise _RowRejected("bad coordinate") from e
    if latitude != latitude or longitude != longitude:
        raise _RowRejected("bad coordinate")
    if not (-90.0 <= latitude <= 90.0 and -180.0 <= longitude <= 180.0):
        raise _RowRejected("coordinate out of range")

    return CrimeReport(
        report_id=report_id,
        date=parsed_date,
        time=parsed_time,
        latitude=latitude,
        longitude=longitude,
        category=category,
    )


def _resolve_positions(
    header: Sequence[str], mapping: ColumnMapping
) -> Dict[str, Optional[int]]:
    """
    Raises:
        ConfigError: If a mapped column name is not in the header
    """
    positions: Dict[str, Optional[int]] = {}
    names = [h.strip() for h in header]
    missing = []
    for field_name, column in mapping.columns().items():
        if column is None:
            positions[field_name] = None
        elif isinstance(column, int):
            positions[field_name] = column
        elif column in names:
            positions[field_name] = names.index(column)
        else:
            missing.append(f"{column!r} ({field_name})")
    if missing:
        raise ConfigError(f"Report header has no column {', '.join(missing)}")
    return positions


def parse_reports(
    source: IO[str], mapping: ColumnMapping, first_line: int = 1
) -> Tuple[List[CrimeReport], List[RowError]]:
    """
    Parse a delimited text stream into reports.

    Bad rows never abort parsing: each yields exactly one RowError with its
    1-based line number (offset by ``first_line`` for chunked input).

    Raises:
        CrimeMapError: If the stream itself cannot be read
    """
    reports: List[CrimeReport] = []
    errors: List[RowError] = []
    try:
        reader = csv.reader(source, delimiter=mapping.delimiter)
        positions: Optional[Dict[str, Optional[int]]] = None
        if not mapping.has_header:
            positions = _resolve_positions([], mapping)
        for offset, row in enumerate(reader):
            line_number = first_line + offset
            if not row or all(not cell.strip() for cell in row):
                continue
            if positions is None:
                positions = _resolve_positions(row, mapping)
                continue
            try:
                reports.append(_parse_row(row, positions, mapping))
            except _RowRejected as e:
                raw = mapping.delimiter.join(row)
                errors.append(RowError(line_number, str(e), raw))
    except (OSError, UnicodeDecodeError, csv.Error) as e:
        raise CrimeMapError(f"Failed to read report source: {e}") from e
    return reports, errors


def parse_report_file(
    path: Union[str, Path], mapping: ColumnMapping
) -> Tuple[List[CrimeReport], List[RowError]]:
    """Open a UTF-8 file and parse it."""
    try:
        with open(path, encoding="utf-8", newline="") as f:
            return parse_reports(f, mapping)
    except OSError as e:
        raise CrimeMapError(f"Failed to read report file {path}: {e}") from e


def filter_violent(
    reports: Iterable[CrimeReport], policy: CategoryPolicy
) -> List[CrimeReport]:
    """Keep reports whose category passes the policy, in input order."""
    return [r for r in reports if policy.allows(r.category)]


def summarize(
    reports: Sequence[CrimeReport],
    errors: Sequence[RowError],
    filtered: Optional[Sequence[CrimeReport]] = None,
) -> IngestStats:
    """Build IngestStats for a parse result (and optionally its filtered subset)."""
    reasons = Counter(e.reason for e in errors)
    return IngestStats(
        rows_read=len(reports) + len(errors),
        rows_parsed=len(reports),
        rows_rejected=len(errors),
        rows_after_filter=len(filtered) if filtered is not None else len(reports),
        rejection_reasons=dict(reasons),
    )


def log_stats(stats: IngestStats) -> None:
    """Emit IngestStats as one structured log record."""
    logger.info(f"ingest_stats {json.dumps(stats.to_dict(), sort_keys=True)}")


def write_reports_csv(
    reports: Iterable[CrimeReport], stream: IO[str], mapping: ColumnMapping
) -> None:
    """
    Serialize reports in the mapping's layout; parsing the output with the
    same mapping yields the same records.
    """
    positions = {k: v for k, v in mapping.columns().items() if v is not None}
    indices: Dict[str, int] = {}
    if mapping.has_header:
        order = list(positions)
    else:
        indices = {k: int(v) for k, v in positions.items()}
        order = sorted(indices, key=indices.__getitem__)
    writer = csv.writer(stream, delimiter=mapping.delimiter, lineterminator="\n")
    if mapping.has_header:
        writer.writerow([positions[name] for name in order])
    for report in reports:
        values = {
            "report_id": report.report_id,
            "date": report.date.strftime(mapping.date_format),
            "time": report.time.strftime(mapping.time_format) if report.time else "",
            "latitude": repr(report.latitude),
            "longitude": repr(report.longitude),
            "category": report.category,
        }
        if mapping.has_header:
            writer.writerow([values[name] for name in order])
        else:
            row = [""] * (max(indices.values()) + 1)
            for name in order:
                row[indices[name]] = values[name]
            writer.writerow(row)


def write_reports_jsonl(reports: Iterable[CrimeReport], path: Union[str, Path]) -> int:
    """Persist normalized reports, one JSON object per line."""
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for report in reports:
            f.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
            count += 1
    return count


def read_reports_jsonl(path: Union[str, Path]) -> List[CrimeReport]:
    """Load reports written by :func:`write_reports_jsonl`."""
    reports = []
    try:
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    reports.append(CrimeReport.from_dict(json.loads(line)))
    except (OSError, ValueError, KeyError) as e:
        raise CrimeMapError(f"Failed to load reports from {path}: {e}") from e
    return reports
