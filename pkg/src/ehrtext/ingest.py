"""Schema-agnostic ingestion of tabular EHR exports into medical events.

No per-hospital feature engineering happens here.  Columns are classified
purely from their contents: integer-only columns are dropped unless they
have few distinct values, decimal columns become numeric features and
everything else is kept as text.
"""

from __future__ import annotations

import csv
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable

from .config import DatasetConfig, TableConfig

logger = logging.getLogger(__name__)

DROPPED = "dropped"
CATEGORICAL = "categorical"
NUMERIC = "numeric"
TEXT = "text"
TIMESTAMP = "timestamp"
ID = "id"

_INT_RE = re.compile(r"^[+-]?\d+$")
_DEC_RE = re.compile(r"^[+-]?(\d+\.\d*|\.\d+|\d+)$")
_DATETIME_RE = re.compile(r"^\d{4}-\d{2}-\d{2}[ T]\d{2}:\d{2}(:\d{2}(\.\d+)?)?$")


@dataclass
class Feature:
    name: str
    value: str
    kind: str  # text | numeric | categorical


@dataclass
class MedicalEvent:
    event_type: str
    features: list[Feature]
    timestamp: int  # minutes from unit admission
    patient_id: str
    stay_id: str

    @property
    def main_feature(self) -> str:
        return self.features[0].value if self.features else ""


@dataclass
class IngestStats:
    rows: int = 0
    skipped_missing_id: int = 0
    skipped_no_admit_time: int = 0
    unmatched_definitions: int = 0
    removed_rare_pairs: int = 0
    removed_events: int = 0
    classification: dict[str, dict[str, str]] = field(default_factory=dict)


def is_decimal(s: str) -> bool:
    return bool(_DEC_RE.match(s.strip()))


def has_fraction(s: str) -> bool:
    return is_decimal(s) and "." in s


def read_table(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [dict(r) for r in reader]
        header = list(reader.fieldnames or [])
    return header, rows


def infer_schema(
    rows: list[dict[str, str]],
    config: TableConfig,
    header: list[str] | None = None,
    distinct_threshold: int = 50,
) -> dict[str, str]:
    """Classify every column of a table.

    Integer-only columns are dropped unless they hold fewer than
    ``distinct_threshold`` distinct values, in which case they are kept as
    categorical.  Columns whose values all parse as decimals and include a
    fractional part are numeric.  Columns that look like datetimes but are
    not the configured timestamp are dropped.  Everything else is text.
    """
    if not rows:
        raise ValueError(f"empty table: {config.path}")
    header = header if header is not None else list(rows[0].keys())
    id_cols = {config.stay_id_column}
    if config.patient_id_column:
        id_cols.add(config.patient_id_column)
    for col in id_cols | {config.timestamp_column}:
        if col not in header:
            raise ValueError(f"column {col!r} not in header of {config.path}")
    join_cols = {j.column for j in config.definition_joins}

    _check_timestamps(rows, config)
    out = {}
    for col in header:
        if col == config.timestamp_column:
            out[col] = TIMESTAMP
        elif col in id_cols:
            out[col] = ID
        elif col in config.excluded_columns:
            out[col] = DROPPED
        elif col in join_cols:
            out[col] = TEXT
        else:
            out[col] = _classify_values([r.get(col) or "" for r in rows], distinct_threshold)
    return out


def _classify_values(values: list[str], distinct_threshold: int) -> str:
    filled = [v.strip() for v in values if v and v.strip()]
    if not filled:
        return DROPPED
    if all(_INT_RE.match(v) for v in filled):
        return CATEGORICAL if len(set(filled)) < distinct_threshold else DROPPED
    if all(_DEC_RE.match(v) for v in filled):
        return NUMERIC
    if all(_DATETIME_RE.match(v) for v in filled):
        # a timestamp other than the selected one
        return DROPPED
    return TEXT


def _check_timestamps(rows, config: TableConfig) -> None:
    col = config.timestamp_column
    for r in rows:
        v = (r.get(col) or "").strip()
        if not v:
            continue
        ok = bool(_DATETIME_RE.match(v)) if config.timestamp_format == "datetime" else is_decimal(v)
        if not ok:
            raise ValueError(f"unparseable timestamp {v!r} in column {col!r} of {config.path}")


def parse_datetime(s: str) -> datetime:
    return datetime.fromisoformat(s.strip())


def extract_events(
    rows: Iterable[dict[str, str]],
    config: TableConfig,
    classification: dict[str, str],
    admit_times: dict[str, datetime] | None = None,
    stats: IngestStats | None = None,
) -> list[MedicalEvent]:
    """One event per row; only kept columns become features, all as strings."""
    stats = stats if stats is not None else IngestStats()
    kept = [c for c, k in classification.items() if k in (TEXT, NUMERIC, CATEGORICAL)]
    events = []
    for row in rows:
        stats.rows += 1
        stay = (row.get(config.stay_id_column) or "").strip()
        patient = (row.get(config.patient_id_column) or "").strip() if config.patient_id_column else ""
        raw_time = (row.get(config.timestamp_column) or "").strip()
        if not stay or (config.patient_id_column and not patient) or not raw_time:
            stats.skipped_missing_id += 1
            continue
        if config.timestamp_format == "datetime":
            if admit_times is None or stay not in admit_times:
                stats.skipped_no_admit_time += 1
                continue
            delta = parse_datetime(raw_time) - admit_times[stay]
            minute = int(delta.total_seconds() // 60)
        else:
            minute = int(float(raw_time))
        features = []
        for col in kept:
            value = (row.get(col) or "").strip()
            kind = classification[col]
            if kind == TEXT and has_fraction(value):
                kind = NUMERIC
            features.append(Feature(col, value, kind))
        if not features:
            continue
        events.append(MedicalEvent(config.event_type, features, minute, patient, stay))
    if stats.skipped_missing_id:
        logger.warning("%s: skipped %d rows without ids", config.path, stats.skipped_missing_id)
    return events


def load_definitions(path: str | Path, key_column: str, value_column: str) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"definition table missing: {path}")
    mapping: dict[str, str] = {}
    _, rows = read_table(path)
    for r in rows:
        key = (r.get(key_column) or "").strip()
        if key in mapping:
            raise ValueError(f"duplicate definition key {key!r} in {path}")
        mapping[key] = (r.get(value_column) or "").strip()
    return mapping


def join_definitions(
    events: list[MedicalEvent],
    definitions: dict[str, dict[str, str]],
    stats: IngestStats | None = None,
) -> list[MedicalEvent]:
    """Replace code values by their descriptions.

    ``definitions`` maps a feature name to its code -> description table.
    Values missing from the table pass through unchanged.
    """
    unmatched = 0
    for ev in events:
        for f in ev.features:
            table = definitions.get(f.name)
            if table is None or not f.value:
                continue
            desc = table.get(f.value)
            if desc is None:
                unmatched += 1
            else:
                f.value = desc
                f.kind = NUMERIC if has_fraction(desc) else TEXT
    if unmatched:
        logger.warning("%d values had no definition entry", unmatched)
    if stats is not None:
        stats.unmatched_definitions += unmatched
    return events


def _pair_key(ev: MedicalEvent, f: Feature) -> tuple[str, str, str]:
    return (ev.event_type, f.name, f.value)


def drop_rare_features(
    events: list[MedicalEvent], min_count: int = 5, stats: IngestStats | None = None
) -> list[MedicalEvent]:
    """Remove (name, value) pairs seen fewer than ``min_count`` times.

    Events whose main (first) feature was removed are deleted.
    """
    counts = Counter(_pair_key(ev, f) for ev in events for f in ev.features)
    out = []
    removed_pairs = 0
    for ev in events:
        keep = [f for f in ev.features if counts[_pair_key(ev, f)] >= min_count]
        removed_pairs += len(ev.features) - len(keep)
        if not keep or keep[0] is not ev.features[0]:
            continue
        out.append(MedicalEvent(ev.event_type, keep, ev.timestamp, ev.patient_id, ev.stay_id))
    if stats is not None:
        stats.removed_rare_pairs += removed_pairs
        stats.removed_events += len(events) - len(out)
    return out


def admit_times_from_stays(cfg: DatasetConfig) -> dict[str, datetime]:
    st = cfg.stays
    if st.time_format != "datetime":
        return {}
    _, rows = read_table(cfg.resolve(st.path))
    return {
        r[st.stay_id_column].strip(): parse_datetime(r[st.intime_column])
        for r in rows
        if (r.get(st.intime_column) or "").strip()
    }


def ingest_table(
    table: TableConfig,
    cfg: DatasetConfig,
    admit_times: dict[str, datetime] | None,
    stats: IngestStats,
) -> list[MedicalEvent]:
    header, rows = read_table(cfg.resolve(table.path))
    classification = infer_schema(rows, table, header, cfg.int_distinct_threshold)
    stats.classification[table.event_type] = classification
    events = extract_events(rows, table, classification, admit_times, stats)
    definitions = {
        j.column: load_definitions(cfg.resolve(j.path), j.key_column, j.value_column)
        for j in table.definition_joins
    }
    return join_definitions(events, definitions, stats)


def ingest_dataset(cfg: DatasetConfig) -> tuple[list[MedicalEvent], IngestStats]:
    """Full ingest: every table, definition joins, then global rare-feature removal."""
    stats = IngestStats()
    admit = admit_times_from_stays(cfg)
    events: list[MedicalEvent] = []
    for table in cfg.tables:
        events.extend(ingest_table(table, cfg, admit, stats))
    events = drop_rare_features(events, cfg.min_feature_count, stats)
    logger.info("%s: %d events after ingest", cfg.name, len(events))
    return events, stats

