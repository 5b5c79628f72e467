"""Cohort selection and task labels for ICU stays."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path

from .config import CohortOptions, DatasetConfig
from .ingest import Feature, MedicalEvent, parse_datetime, read_table

logger = logging.getLogger(__name__)

TIMEGAP = 12 * 60
PREDICTION_WINDOW = 48 * 60

LOCATION_CLASSES = ("home", "other hospital", "rehab", "skilled nursing", "died", "other")
OTHER_LOCATION = LOCATION_CLASSES.index("other")
NOT_DISCHARGED = len(LOCATION_CLASSES)
N_DX = 18

# task -> (kind, number of outputs)
TASKS = {
    "mort": ("binary", 1),
    "los3": ("binary", 1),
    "los7": ("binary", 1),
    "readm": ("binary", 1),
    "fi_ac": ("multiclass", len(LOCATION_CLASSES) + 1),
    "im_disch": ("multiclass", len(LOCATION_CLASSES) + 1),
    "dx": ("multilabel", N_DX),
}

_DEFAULT_LOCATIONS = {
    "home": "home",
    "short term hospital": "other hospital",
    "other hospital": "other hospital",
    "rehab/distinct part hosp": "rehab",
    "rehabilitation": "rehab",
    "rehab": "rehab",
    "snf": "skilled nursing",
    "skilled nursing facility": "skilled nursing",
    "skilled nursing": "skilled nursing",
    "dead/expired": "died",
    "death": "died",
    "died": "died",
    "other facility": "other",
    "other": "other",
}


@dataclass
class LabelSet:
    mort: int
    los3: int
    los7: int
    readm: int
    fi_ac: int
    im_disch: int
    dx: list[int]

    def get(self, task: str):
        if task not in TASKS:
            raise KeyError(f"unknown task {task!r}")
        return getattr(self, task)


@dataclass
class EncounterMeta:
    """Times are minutes relative to the stay's unit admission."""

    los: int
    expired: bool
    death: int | None
    location: str
    n_stays_in_admission: int
    dx_classes: list[int] = field(default_factory=list)


@dataclass
class StayInfo:
    stay_id: str
    patient_id: str
    admission_id: str
    age: float
    order_key: float  # sortable in-time
    admit_time: str
    meta: EncounterMeta


@dataclass
class PatientRecord:
    stay_id: str
    patient_id: str
    age: float
    admit_time: str
    events: list[MedicalEvent]
    intervals: list[int]
    labels: LabelSet


@dataclass
class CohortStats:
    stays_total: int = 0
    excluded_age: int = 0
    excluded_los: int = 0
    excluded_not_first: int = 0
    excluded_few_events: int = 0
    retained: int = 0
    observations: int = 0
    unique_codes: int = 0
    mean_events_per_sample: float = 0.0


def location_class(raw: str, extra: dict[str, str] | None = None) -> int:
    key = raw.strip().lower()
    table = dict(_DEFAULT_LOCATIONS)
    if extra:
        table.update({k.strip().lower(): v for k, v in extra.items()})
    name = table.get(key)
    if name is None or name not in LOCATION_CLASSES:
        logger.warning("unknown discharge location %r mapped to OTHER", raw)
        return OTHER_LOCATION
    return LOCATION_CLASSES.index(name)


def derive_labels(meta: EncounterMeta, location_map: dict[str, str] | None = None) -> LabelSet:
    lo, hi = TIMEGAP, TIMEGAP + PREDICTION_WINDOW
    loc = location_class(meta.location, location_map)
    dx = [0] * N_DX
    for c in meta.dx_classes:
        dx[c] = 1
    mort = int(meta.expired and meta.death is not None and lo < meta.death < hi)
    return LabelSet(
        mort=mort,
        los3=int(meta.los > 3 * 24 * 60),
        los7=int(meta.los > 7 * 24 * 60),
        readm=int(meta.n_stays_in_admission > 1),
        fi_ac=loc if lo < meta.los < hi else NOT_DISCHARGED,
        im_disch=loc if lo < meta.los <= hi else NOT_DISCHARGED,
        dx=dx,
    )


def _minutes(a: datetime, b: datetime) -> int:
    return int((b - a).total_seconds() // 60)


def load_stays(cfg: DatasetConfig) -> dict[str, StayInfo]:
    st = cfg.stays
    _, rows = read_table(cfg.resolve(st.path))
    dx: dict[str, list[int]] = defaultdict(list)
    if cfg.diagnoses is not None:
        d = cfg.diagnoses
        for r in read_table(cfg.resolve(d.path))[1]:
            c = int(r[d.class_column])
            if not 0 <= c < N_DX:
                raise ValueError(f"diagnosis class {c} outside 0..{N_DX - 1}")
            dx[r[d.stay_id_column].strip()].append(c)

    per_admission: dict[str, int] = defaultdict(int)
    for r in rows:
        per_admission[r[st.admission_id_column].strip()] += 1

    expired_values = {v.strip() for v in st.expired_values}
    out = {}
    for r in rows:
        sid = r[st.stay_id_column].strip()
        adm = r[st.admission_id_column].strip()
        raw_in, raw_out = r[st.intime_column].strip(), r[st.outtime_column].strip()
        raw_death = (r.get(st.death_time_column) or "").strip()
        if st.time_format == "datetime":
            t_in = parse_datetime(raw_in)
            los = _minutes(t_in, parse_datetime(raw_out))
            death = _minutes(t_in, parse_datetime(raw_death)) if raw_death else None
            order_key = t_in.timestamp()
        else:
            los = int(float(raw_out))
            death = int(float(raw_death)) if raw_death else None
            order_key = float(raw_in)
        meta = EncounterMeta(
            los=los,
            expired=r[st.expired_column].strip() in expired_values,
            death=death,
            location=r[st.discharge_location_column],
            n_stays_in_admission=per_admission[adm],
            dx_classes=sorted(set(dx.get(sid, []))),
        )
        out[sid] = StayInfo(sid, r[st.patient_id_column].strip(), adm,
                            float(r[st.age_column]), order_key, raw_in, meta)
    return out


def first_stays(stays: dict[str, StayInfo]) -> set[str]:
    best: dict[str, StayInfo] = {}
    for s in stays.values():
        cur = best.get(s.admission_id)
        if cur is None or (s.order_key, s.stay_id) < (cur.order_key, cur.stay_id):
            best[s.admission_id] = s
    return {s.stay_id for s in best.values()}


def build_cohort(
    events: list[MedicalEvent],
    stays: dict[str, StayInfo],
    options: CohortOptions | None = None,
    location_map: dict[str, str] | None = None,
) -> tuple[list[PatientRecord], CohortStats]:
    """Filter stays and attach truncated event sequences and labels.

    Records come out in the order stays appear in the demographics table.
    """
    options = options or CohortOptions()
    by_stay: dict[str, list[MedicalEvent]] = defaultdict(list)
    for ev in events:
        if ev.stay_id not in stays:
            raise KeyError(f"stay {ev.stay_id!r} referenced by events but absent from demographics")
        by_stay[ev.stay_id].append(ev)

    firsts = first_stays(stays)
    stats = CohortStats(stays_total=len(stays))
    records = []
    for sid, info in stays.items():
        if options.min_age is not None and info.age < options.min_age:
            stats.excluded_age += 1
            continue
        if options.min_los_minutes is not None and info.meta.los <= options.min_los_minutes:
            stats.excluded_los += 1
            continue
        if options.first_stay_only and sid not in firsts:
            stats.excluded_not_first += 1
            continue
        evs = sorted(by_stay.get(sid, []), key=lambda e: e.timestamp)
        if options.window_minutes is not None:
            evs = [e for e in evs if 0 <= e.timestamp <= options.window_minutes]
        if options.min_events is not None and len(evs) < options.min_events:
            stats.excluded_few_events += 1
            continue
        for e in evs:
            e.patient_id = e.patient_id or info.patient_id
        intervals = [b.timestamp - a.timestamp for a, b in zip(evs, evs[1:])]
        labels = derive_labels(info.meta, location_map)
        records.append(PatientRecord(sid, info.patient_id, info.age, info.admit_time,
                                     evs, intervals, labels))

    stats.retained = len(records)
    stats.observations = len(records)
    codes = {(e.event_type, f.name, f.value) for r in records for e in r.events for f in e.features}
    stats.unique_codes = len(codes)
    if records:
        stats.mean_events_per_sample = sum(len(r.events) for r in records) / len(records)
    logger.info("cohort: %d of %d stays retained", stats.retained, stats.stays_total)
    return records, stats


def cohort_for_dataset(
    cfg: DatasetConfig, events: list[MedicalEvent], options: CohortOptions | None = None
) -> tuple[list[PatientRecord], CohortStats]:
    return build_cohort(events, load_stays(cfg), options, cfg.stays.location_map)


def write_cohort(path: str | Path, records: list[PatientRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            doc = {
                "stay_id": r.stay_id,
                "patient_id": r.patient_id,
                "age": r.age,
                "admit_time": r.admit_time,
                "events": [
                    [e.event_type, e.timestamp, [[f.name, f.value, f.kind] for f in e.features]]
                    for e in r.events
                ],
                "intervals": r.intervals,
                "labels": asdict(r.labels),
            }
            fh.write(json.dumps(doc, separators=(",", ":")) + "\n")


def read_cohort(path: str | Path) -> list[PatientRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            d = json.loads(line)
            events = [
                MedicalEvent(et, [Feature(*f) for f in feats], ts, d["patient_id"], d["stay_id"])
                for et, ts, feats in d["events"]
            ]
            records.append(PatientRecord(d["stay_id"], d["patient_id"], d["age"], d["admit_time"],
                                         events, d["intervals"], LabelSet(**d["labels"])))
    return records
