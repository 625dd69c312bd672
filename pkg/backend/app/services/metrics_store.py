import csv
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from ..core.exceptions import MetricsImportError

logger = logging.getLogger(__name__)

CSV_HEADER = ["series", "timestamp_ms", "value", "tags"]
MAX_TIMESTAMP_MS = 2 ** 63 - 1

TagKey = Tuple[Tuple[str, str], ...]


def tag_key(tags: Dict[str, str]) -> TagKey:
    return tuple(sorted((str(k), str(v)) for k, v in tags.items()))


def format_tags(tags: Dict[str, str]) -> str:
    parts = []
    for k, v in tag_key(tags):
        if any(c in k or c in v for c in ";=,\n") or not k:
            raise ValueError(f"tag {k!r}={v!r} cannot be written to CSV")
        parts.append(f"{k}={v}")
    return ";".join(parts)


def parse_tags(text: str) -> Dict[str, str]:
    tags = {}
    if not text:
        return tags
    for part in text.split(";"):
        k, sep, v = part.partition("=")
        if not sep or not k:
            raise ValueError(f"malformed tag {part!r}")
        tags[k] = v
    return tags


@dataclass
class MetricPoint:
    series: str
    timestamp_ms: int
    value: float
    tags: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class RangeQuery:
    series: str
    tags: Dict[str, str] = field(default_factory=dict)
    from_ms: int = 0
    to_ms: int = MAX_TIMESTAMP_MS

    def __post_init__(self):
        if self.from_ms > self.to_ms:
            raise ValueError(f"query range needs from_ms <= to_ms, got [{self.from_ms}, {self.to_ms})")


class MetricsStore:
    """
    Time-series store keyed by (series, tag set, timestamp).

    A second write to the same key replaces the first. Queries return points ordered
    by timestamp, ties broken by the sorted tag tuple.
    """

    def __init__(self):
        self._series: Dict[Tuple[str, TagKey], Dict[int, float]] = {}
        self._lock = threading.RLock()

    def append(self, point: MetricPoint):
        key = (point.series, tag_key(point.tags))
        with self._lock:
            values = self._series.get(key)
            if values is None:
                values = self._series[key] = {}
            values[int(point.timestamp_ms)] = float(point.value)

    def append_many(self, points: Iterable[MetricPoint]) -> int:
        count = 0
        for point in points:
            self.append(point)
            count += 1
        return count

    def _matching(self, series: Optional[str], tags: Optional[Dict[str, str]]) -> List[Tuple[str, TagKey, Dict[int, float]]]:
        wanted = tag_key(tags or {})
        with self._lock:
            found = []
            for (name, key), values in self._series.items():
                if series is not None and name != series:
                    continue
                if wanted:
                    present = dict(key)
                    if any(present.get(k) != v for k, v in wanted):
                        continue
                found.append((name, key, dict(values)))
        return found

    def query_range(self, query: RangeQuery) -> List[MetricPoint]:
        rows = []
        for name, key, values in self._matching(query.series, query.tags):
            for ts, value in values.items():
                if query.from_ms <= ts < query.to_ms:
                    rows.append((ts, key, value))
        rows.sort(key=lambda row: (row[0], row[1]))
        return [MetricPoint(query.series, ts, value, dict(key)) for ts, key, value in rows]

    def points(self, series: Optional[str] = None, tags: Optional[Dict[str, str]] = None) -> List[MetricPoint]:
        """Every matching point ordered by (series, timestamp, tags)"""
        rows = []
        for name, key, values in self._matching(series, tags):
            rows.extend((name, ts, key, value) for ts, value in values.items())
        rows.sort(key=lambda row: (row[0], row[1], row[2]))
        return [MetricPoint(name, ts, value, dict(key)) for name, ts, key, value in rows]

    def count(self, series: Optional[str] = None, tags: Optional[Dict[str, str]] = None) -> int:
        return sum(len(values) for _, _, values in self._matching(series, tags))

    def series_names(self) -> List[str]:
        with self._lock:
            return sorted({name for name, _ in self._series})

    def tag_values(self, series: str, tag: str, tags: Optional[Dict[str, str]] = None) -> List[str]:
        found = set()
        for _, key, _ in self._matching(series, tags):
            value = dict(key).get(tag)
            if value is not None:
                found.add(value)
        return sorted(found)

    def view(self, pipeline_id: str) -> "MetricsView":
        return MetricsView(self, pipeline_id)

    # ------------------------------------------------------------------
    # CSV exchange
    # ------------------------------------------------------------------

    def export_csv(self, path: str, series: Optional[str] = None, tags: Optional[Dict[str, str]] = None) -> int:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        points = self.points(series, tags)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for point in points:
                writer.writerow([point.series, point.timestamp_ms, repr(point.value), format_tags(point.tags)])
        logger.info(f"Exported {len(points)} metric points to {path}")
        return len(points)

    def import_csv(self, path: str) -> int:
        """Load points written by export_csv; errors name the data row (first row after the header is 1)"""
        parsed = []
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise MetricsImportError(0, f"expected header {','.join(CSV_HEADER)}")
            for row_number, row in enumerate(reader, start=1):
                if len(row) != 4:
                    raise MetricsImportError(row_number, f"expected 4 fields, got {len(row)}")
                series, ts_text, value_text, tags_text = row
                if not series:
                    raise MetricsImportError(row_number, "empty series name")
                try:
                    ts = int(ts_text)
                except ValueError:
                    raise MetricsImportError(row_number, f"bad timestamp {ts_text!r}")
                try:
                    value = float(value_text)
                except ValueError:
                    raise MetricsImportError(row_number, f"bad value {value_text!r}")
                try:
                    tags = parse_tags(tags_text)
                except ValueError as e:
                    raise MetricsImportError(row_number, str(e))
                parsed.append(MetricPoint(series, ts, value, tags))
        count = self.append_many(parsed)
        logger.info(f"Imported {count} metric points from {path}")
        return count


class MetricsView:
    """Store facade that stamps every point with one pipeline_id tag"""

    def __init__(self, store: MetricsStore, pipeline_id: str):
        self.store = store
        self.pipeline_id = pipeline_id

    def record(self, series: str, value: float, timestamp_ms: int, **tags: str):
        tags["pipeline_id"] = self.pipeline_id
        self.store.append(MetricPoint(series, int(timestamp_ms), float(value), tags))

    def append(self, point: MetricPoint):
        tags = dict(point.tags)
        tags["pipeline_id"] = self.pipeline_id
        self.store.append(MetricPoint(point.series, point.timestamp_ms, point.value, tags))

    def query(self, series: str, from_ms: int = 0, to_ms: int = MAX_TIMESTAMP_MS, **tags: str) -> List[MetricPoint]:
        tags["pipeline_id"] = self.pipeline_id
        return self.store.query_range(RangeQuery(series, tags, from_ms, to_ms))

    def export_csv(self, path: str) -> int:
        return self.store.export_csv(path, tags={"pipeline_id": self.pipeline_id})
