"""Synthetic two-hospital EHR generator.

Patients are simulated in a layout-free form first and only then rendered
into a hospital schema.  Two hospitals built from the same seed therefore
contain the same clinical content under different column names, table names
and code systems.

Mortality carries a planted signal: a designated drug (``SIGNAL_DRUG``) is
prescribed during the first 12 hours with probability increasing in the
latent risk, and its presence raises the risk score that decides death
inside the prediction window.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .config import (
    DatasetConfig,
    DefinitionJoin,
    DiagnosesConfig,
    StaysConfig,
    TableConfig,
    dump_dataset_config,
)

logger = logging.getLogger(__name__)

SIGNAL_DRUG = "vancomycin hcl"

# (code, description, unit, median, log-sd, decimals)
LABS = [
    ("50912", "creatinine", "mg/dl", 1.0, 0.35, 1),
    ("50971", "potassium", "meq/l", 4.2, 0.10, 1),
    ("50983", "sodium", "meq/l", 139.0, 0.025, 0),
    ("50931", "glucose", "mg/dl", 125.0, 0.25, 0),
    ("51222", "hemoglobin", "g/dl", 10.5, 0.12, 1),
    ("51301", "white blood cells", "k/ul", 9.5, 0.30, 1),
    ("51265", "platelet count", "k/ul", 210.0, 0.30, 0),
    ("50813", "lactate", "mmol/l", 1.6, 0.40, 1),
    ("50882", "bicarbonate", "meq/l", 24.0, 0.10, 0),
    ("51006", "urea nitrogen", "mg/dl", 20.0, 0.40, 0),
    ("50960", "magnesium", "mg/dl", 2.0, 0.12, 1),
    ("50893", "calcium, total", "mg/dl", 8.4, 0.08, 1),
]

# (code, description, doses, unit, route); index 0 is the signal drug
DRUGS = [
    ("D100", SIGNAL_DRUG, (1000.0, 1250.0, 1500.0), "mg", "iv"),
    ("D101", "acetaminophen", (325.0, 650.0, 1000.0), "mg", "po"),
    ("D102", "morphine sulfate", (2.0, 4.0), "mg", "iv"),
    ("D103", "heparin sodium", (5000.0,), "unit", "sc"),
    ("D104", "pantoprazole sodium", (40.0,), "mg", "iv"),
    ("D105", "furosemide", (20.0, 40.0), "mg", "iv"),
    ("D106", "ondansetron hcl", (4.0,), "mg", "iv"),
    ("D107", "docusate sodium", (100.0,), "mg", "po"),
    ("D108", "metoprolol tartrate", (12.5, 25.0), "mg", "po"),
    ("D109", "insulin regular", (2.0, 4.0, 6.0), "unit", "sc"),
    ("D110", "famotidine", (20.0,), "mg", "iv"),
    ("D111", "senna", (8.6,), "mg", "po"),
    ("D112", "potassium chloride", (20.0, 40.0), "meq", "po"),
    ("D113", "magnesium sulfate", (2.0,), "gm", "iv"),
    ("D114", "cefazolin", (1.0, 2.0), "gm", "iv"),
    ("D115", "oxycodone hcl", (5.0, 10.0), "mg", "po"),
]

# (code, description, median amount, median rate)
INFUSIONS = [
    ("22100", "norepinephrine", 4.0, 8.5),
    ("22101", "propofol", 50.0, 20.0),
    ("22102", "sodium chloride 0.9 %", 500.0, 100.0),
    ("22103", "dextrose 5 %", 250.0, 50.0),
    ("22104", "fentanyl citrate", 1.5, 2.5),
    ("22105", "midazolam", 2.0, 1.5),
    ("22106", "insulin drip", 3.0, 3.0),
    ("22107", "phenylephrine", 2.5, 6.0),
]

# How another hospital might write the same concept; used for term-swap checks.
SYNONYMS = {
    "vancomycin hcl": "vancomycin in ivpb",
    "morphine sulfate": "morphine 250 mg sodium chloride",
    "norepinephrine": "norepinephrine bitartrate iv",
    "acetaminophen": "acetaminophen 325 mg po tabs",
}

LOCATION_CLASSES = ("home", "other hospital", "rehab", "skilled nursing", "died", "other")
N_DX = 18

_LOCATION_STRINGS = {
    "mimic": {
        "home": "HOME",
        "other hospital": "SHORT TERM HOSPITAL",
        "rehab": "REHAB/DISTINCT PART HOSP",
        "skilled nursing": "SNF",
        "died": "DEAD/EXPIRED",
        "other": "OTHER FACILITY",
    },
    "eicu": {
        "home": "Home",
        "other hospital": "Other Hospital",
        "rehab": "Rehabilitation",
        "skilled nursing": "Skilled Nursing Facility",
        "died": "Death",
        "other": "Other",
    },
}

_DX_WEIGHTS = np.linspace(0.2, 1.0, N_DX)
_WINDOW = (12 * 60, 60 * 60)


@dataclass
class TableSpec:
    table_name: str
    event_type: str
    kind: str  # lab | prescription | infusion
    columns: dict[str, str]  # semantic slot -> column name, in file order
    code_prefix: str


@dataclass
class HospitalSpec:
    hospital_id: str
    code_prefix: str
    layout: str = "mimic"  # mimic | eicu
    n_patients: int = 500
    signal_strength: float = 1.0
    seed: int = 0
    table_specs: list[TableSpec] | None = None

    def __post_init__(self):
        if self.layout not in _LOCATION_STRINGS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.table_specs is None:
            self.table_specs = default_tables(self.layout, self.code_prefix)
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValueError("signal_strength must lie in [0, 1]")


def default_tables(layout: str, prefix: str) -> list[TableSpec]:
    if layout == "mimic":
        return [
            TableSpec("labevents.csv", "labevents", "lab", {
                "row_id": "row_id", "patient": "subject_id", "stay": "icustay_id",
                "item": "itemid", "time": "charttime", "value": "valuenum",
                "unit": "valueuom", "flag": "flag", "time2": "storetime",
            }, prefix),
            TableSpec("prescriptions.csv", "prescriptions", "prescription", {
                "row_id": "row_id", "patient": "subject_id", "stay": "icustay_id",
                "time": "starttime", "time2": "endtime", "item": "drug",
                "dose": "dose_val_rx", "unit": "dose_unit_rx", "route": "route",
                "freq": "doses_per_24_hrs",
            }, prefix),
            TableSpec("inputevents.csv", "inputevents", "infusion", {
                "row_id": "row_id", "patient": "subject_id", "stay": "icustay_id",
                "time": "starttime", "time2": "endtime", "item": "itemid",
                "amount": "amount", "unit": "amountuom", "rate": "rate",
                "rate_unit": "rateuom",
            }, prefix),
        ]
    return [
        TableSpec("lab.csv", "lab", "lab", {
            "row_id": "labid", "stay": "patientunitstayid", "time": "labresultoffset",
            "item": "labname", "value": "labresult", "unit": "labmeasurenamesystem",
            "flag": "labflag", "time2": "labresultrevisedoffset",
        }, prefix),
        TableSpec("medication.csv", "medication", "prescription", {
            "row_id": "medicationid", "stay": "patientunitstayid",
            "time": "drugstartoffset", "time2": "drugstopoffset",
            "item": "medication_label", "dose": "dosage", "unit": "doseunit",
            "route": "routeadmin", "freq": "frequency",
        }, prefix),
        TableSpec("infusiondrug.csv", "infusiondrug", "infusion", {
            "row_id": "infusiondrugid", "stay": "patientunitstayid",
            "time": "infusionoffset", "time2": "infusionstopoffset",
            "item": "infusion_label", "amount": "drugamount", "unit": "volumeunit",
            "rate": "infusionrate", "rate_unit": "rateunit",
        }, prefix),
    ]


_STAY_COLUMNS = {
    "mimic": ("icustays.csv", {
        "patient": "subject_id", "admission": "hadm_id", "stay": "icustay_id",
        "age": "anchor_age", "intime": "intime", "outtime": "outtime",
        "location": "discharge_location", "expired": "hospital_expire_flag",
        "death": "deathtime",
    }),
    "eicu": ("patient.csv", {
        "patient": "uniquepid", "admission": "patienthealthsystemstayid",
        "stay": "patientunitstayid", "age": "age", "intime": "unitadmitoffset",
        "outtime": "unitdischargeoffset", "location": "hospitaldischargelocation",
        "expired": "unitdischargestatus", "death": "deathoffset",
    }),
}
_DX_COLUMNS = {
    "mimic": ("diagnoses.csv", ("icustay_id", "ccs_group")),
    "eicu": ("diagnosis.csv", ("patientunitstayid", "dx_class")),
}
_DEF_TABLES = {
    "mimic": {
        "lab": ("d_labitems.csv", "itemid", "label"),
        "prescription": ("d_drugs.csv", "drug_code", "drug_name"),
        "infusion": ("d_items.csv", "itemid", "label"),
    },
    "eicu": {
        "lab": ("lab_dictionary.csv", "labcode", "labdescription"),
        "prescription": ("med_dictionary.csv", "medcode", "medname"),
        "infusion": ("infusion_dictionary.csv", "infcode", "infname"),
    },
}
_SELECTION = {
    "lab": ("item", "value", "unit"),
    "prescription": ("item", "dose", "unit"),
    "infusion": ("item", "amount", "unit"),
}


@dataclass
class SimEvent:
    kind: str
    concept: int
    minute: int
    end_minute: int
    values: dict[str, str]


@dataclass
class SimStay:
    index: int
    latent_risk: float
    signal_present: bool
    age: int
    base_time: datetime
    unit_offset: int  # minutes from hospital admission to unit admission
    los: int
    expired: bool
    death: int | None
    location: str
    readmitted: bool
    dx: list[int]
    events: list[SimEvent] = field(default_factory=list)
    second_stay: tuple[int, int] | None = None  # (unit offset, los)

    @property
    def stay_id(self) -> str:
        return str(300000 + 2 * self.index)

    @property
    def patient_id(self) -> str:
        return str(10000 + self.index)

    @property
    def admission_id(self) -> str:
        return str(100000 + self.index)


@dataclass
class TruthRecord:
    stay_id: str
    patient_id: str
    latent_risk: float
    signal_present: bool
    labels: dict[str, object]


def simulate(n_patients: int, signal_strength: float, seed: int) -> list[SimStay]:
    """Layout-free patient content; a pure function of its arguments."""
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    rng = np.random.default_rng(seed)
    return [_simulate_one(i, signal_strength, rng) for i in range(n_patients)]


def _simulate_one(i: int, s: float, rng: np.random.Generator) -> SimStay:
    u = float(rng.random())
    p_signal = (1.0 - s) * 0.3 + s * (0.15 + 0.4 * u)
    present = bool(rng.random() < p_signal)
    mort = u + 0.8 * s * present > 0.9

    age = int(rng.integers(18, 91))
    base = datetime(2100, 1, 1) + timedelta(
        days=int(rng.integers(0, 3650)), minutes=int(rng.integers(0, 1440))
    )
    unit_offset = int(rng.integers(0, 600))
    if mort:
        los = int(rng.integers(1500, 3540))
        expired, death = True, los
    else:
        los = 1500 + int(rng.gamma(2.0, 1.0 + 2.0 * u) * 1440)
        late_death = rng.random() < 0.5
        expired = bool(u > 0.85 and los >= _WINDOW[1] and late_death)
        death = los if expired else None
    if expired:
        location = "died"
    else:
        location = LOCATION_CLASSES[
            int(rng.choice([0, 1, 2, 3, 5], p=[0.5, 0.1, 0.15, 0.2, 0.05]))
        ]
    readm_draw = rng.random()
    readmitted = (not expired) and readm_draw < 0.1 + 0.25 * u
    dx = [c for c in range(N_DX) if rng.random() < 0.05 + 0.3 * u * _DX_WEIGHTS[c]]
    if not dx:
        dx = [int(rng.integers(N_DX))]
    stay = SimStay(i, u, present, age, base, unit_offset, los, expired, death,
                   location, readmitted, dx)
    if readmitted:
        gap = int(rng.integers(120, 2880))
        stay.second_stay = (unit_offset + los + gap, int(rng.integers(1500, 7200)))

    events = []
    for _ in range(int(rng.integers(6, 13))):
        events.append(_lab_event(rng, int(rng.integers(0, 720))))
    # signal doses take the place of ordinary prescriptions, so the number
    # and timing of events carry no information about the label
    n_drugs = int(rng.integers(2, 6))
    n_signal = int(rng.integers(1, 3)) if present else 0
    for k in range(n_drugs):
        concept = 0 if k < n_signal else None
        events.append(_drug_event(rng, int(rng.integers(0, 720)), concept=concept))
    for _ in range(int(rng.integers(1, 5))):
        events.append(_infusion_event(rng, int(rng.integers(0, 720))))
    horizon = min(los, 4320)
    for _ in range(int(rng.integers(3, 8))):
        minute = int(rng.integers(721, horizon))
        events.append(_random_event(rng, minute))
    events.append(_random_event(rng, int(rng.integers(1441, los))))
    events.sort(key=lambda e: e.minute)
    stay.events = events
    return stay


def _fmt(x: float, decimals: int) -> str:
    return f"{x:.{decimals}f}"


def _lab_event(rng, minute):
    c = int(rng.integers(len(LABS)))
    _, _, unit, median, sd, dec = LABS[c]
    x = float(np.exp(np.log(median) + sd * rng.standard_normal()))
    lo, hi = median * np.exp(-1.2 * sd), median * np.exp(1.2 * sd)
    flag = "abnormal" if (x < lo or x > hi) else ""
    # integer-valued labs keep a fractional digit so the column reads as decimal
    value = _fmt(x, max(dec, 1)) if dec else _fmt(round(x), 1)
    end = minute + int(rng.integers(10, 240))
    return SimEvent("lab", c, minute, end, {"value": value, "unit": unit, "flag": flag})


def _drug_event(rng, minute, concept=None):
    if concept is None:
        concept = int(rng.integers(1, len(DRUGS)))
    _, _, doses, unit, route = DRUGS[concept]
    dose = doses[int(rng.integers(len(doses)))]
    end = minute + int(rng.integers(60, 1440))
    return SimEvent("prescription", concept, minute, end, {
        "dose": _fmt(dose, 1), "unit": unit, "route": route,
        "freq": str(int(rng.integers(1, 5))),
    })


def _infusion_event(rng, minute):
    c = int(rng.integers(len(INFUSIONS)))
    _, _, amount, rate = INFUSIONS[c]
    a = float(np.exp(np.log(amount) + 0.3 * rng.standard_normal()))
    r = float(np.exp(np.log(rate) + 0.3 * rng.standard_normal()))
    end = minute + int(rng.integers(30, 600))
    return SimEvent("infusion", c, minute, end, {
        "amount": _fmt(a, 1), "unit": "ml", "rate": _fmt(r, 1), "rate_unit": "ml/hr",
    })


def _random_event(rng, minute):
    kind = int(rng.integers(3))
    if kind == 0:
        return _lab_event(rng, minute)
    if kind == 1:
        return _drug_event(rng, minute)
    return _infusion_event(rng, minute)


def truth_labels(los: int, expired: bool, death: int | None, location: str,
                 n_stays: int, dx: list[int]) -> dict[str, object]:
    """Task labels from encounter metadata (minutes relative to unit admission)."""
    lo, hi = _WINDOW
    loc = LOCATION_CLASSES.index(location)
    not_in_window = len(LOCATION_CLASSES)
    return {
        "mort": int(expired and death is not None and lo < death < hi),
        "los3": int(los > 3 * 1440),
        "los7": int(los > 7 * 1440),
        "readm": int(n_stays > 1),
        "fi_ac": loc if lo < los < hi else not_in_window,
        "im_disch": loc if lo < los <= hi else not_in_window,
        "dx": [int(c in dx) for c in range(N_DX)],
    }


def ground_truth(stays: list[SimStay]) -> list[TruthRecord]:
    out = []
    for st in stays:
        labels = truth_labels(st.los, st.expired, st.death, st.location,
                              2 if st.second_stay else 1, st.dx)
        out.append(TruthRecord(st.stay_id, st.patient_id, st.latent_risk,
                               st.signal_present, labels))
    return out


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _stamp(spec: HospitalSpec, st: SimStay, minute: int) -> str:
    if spec.layout == "mimic":
        t = st.base_time + timedelta(minutes=st.unit_offset + minute)
        return t.strftime("%Y-%m-%d %H:%M:%S")
    return str(minute)


def generate_hospital(spec: HospitalSpec, out_dir: str | Path) -> list[TruthRecord]:
    """Write one CSV per table spec plus definition, stays and diagnoses tables.

    Also writes ``dataset.yaml`` describing the layout for the ingest stage.
    """
    names = [t.table_name for t in spec.table_specs]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate table names in {spec.hospital_id}: {names}")
    if spec.n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stays = simulate(spec.n_patients, spec.signal_strength, spec.seed)

    catalogs = {"lab": LABS, "prescription": DRUGS, "infusion": INFUSIONS}
    tables = []
    for ts in spec.table_specs:
        cols = ts.columns
        header = list(cols.values())
        rows = []
        for st in stays:
            for ev in st.events:
                if ev.kind != ts.kind:
                    continue
                code = ts.code_prefix + catalogs[ev.kind][ev.concept][0]
                cell = {
                    "row_id": str(len(rows) + 1),
                    "patient": st.patient_id,
                    "stay": st.stay_id,
                    "item": code,
                    "time": _stamp(spec, st, ev.minute),
                    "time2": _stamp(spec, st, ev.end_minute),
                    **ev.values,
                }
                rows.append([cell[slot] for slot in cols])
        _write_csv(out / ts.table_name, header, rows)

        def_name, key_col, val_col = _DEF_TABLES[spec.layout][ts.kind]
        def_rows = [[ts.code_prefix + c[0], c[1]] for c in catalogs[ts.kind]]
        _write_csv(out / def_name, [key_col, val_col], def_rows)
        selected = [cols[s] for s in _SELECTION[ts.kind]]
        tables.append((ts, def_name, key_col, val_col, selected))

    stays_name, sc = _STAY_COLUMNS[spec.layout]
    loc_str = _LOCATION_STRINGS[spec.layout]
    srows = []
    for st in stays:
        srows.append(_stay_row(spec, st, st.stay_id, st.unit_offset, st.los,
                               st.expired, st.death, loc_str[st.location]))
        if st.second_stay:
            off, los2 = st.second_stay
            srows.append(_stay_row(spec, st, str(int(st.stay_id) + 1), off, los2,
                                   False, None, loc_str["home"]))
    _write_csv(out / stays_name, list(sc.values()), srows)

    dx_name, (dx_stay, dx_col) = _DX_COLUMNS[spec.layout]
    _write_csv(out / dx_name, [dx_stay, dx_col],
               [[st.stay_id, str(c)] for st in stays for c in st.dx])

    dump_dataset_config(_dataset_config(spec, tables), out / "dataset.yaml")
    logger.info("generated %s: %d stays", spec.hospital_id, len(stays))
    return ground_truth(stays)


def _stay_row(spec, st, stay_id, unit_offset, los, expired, death, location):
    if spec.layout == "mimic":
        t0 = st.base_time + timedelta(minutes=unit_offset)
        fmt = "%Y-%m-%d %H:%M:%S"
        return [
            st.patient_id, st.admission_id, stay_id, str(st.age),
            t0.strftime(fmt), (t0 + timedelta(minutes=los)).strftime(fmt), location,
            "1" if expired else "0",
            (t0 + timedelta(minutes=death)).strftime(fmt) if death is not None else "",
        ]
    return [
        st.patient_id, st.admission_id, stay_id, str(st.age), str(unit_offset),
        str(los), location, "Expired" if expired else "Alive",
        str(death) if death is not None else "",
    ]


def _dataset_config(spec: HospitalSpec, tables) -> DatasetConfig:
    fmt = "datetime" if spec.layout == "mimic" else "offset"
    table_cfgs = []
    selection = {}
    for ts, def_name, key_col, val_col, selected in tables:
        table_cfgs.append(TableConfig(
            path=ts.table_name,
            event_type=ts.event_type,
            timestamp_column=ts.columns["time"],
            timestamp_format=fmt,
            stay_id_column=ts.columns["stay"],
            patient_id_column=ts.columns.get("patient"),
            definition_joins=[DefinitionJoin(
                column=ts.columns["item"], path=def_name,
                key_column=key_col, value_column=val_col)],
        ))
        selection[ts.event_type] = selected
    stays_name, sc = _STAY_COLUMNS[spec.layout]
    dx_name, (dx_stay, dx_col) = _DX_COLUMNS[spec.layout]
    return DatasetConfig(
        name=spec.hospital_id,
        tables=table_cfgs,
        stays=StaysConfig(
            path=stays_name,
            stay_id_column=sc["stay"],
            patient_id_column=sc["patient"],
            admission_id_column=sc["admission"],
            age_column=sc["age"],
            intime_column=sc["intime"],
            outtime_column=sc["outtime"],
            time_format=fmt,
            discharge_location_column=sc["location"],
            expired_column=sc["expired"],
            expired_values=["1"] if spec.layout == "mimic" else ["Expired"],
            death_time_column=sc["death"],
        ),
        diagnoses=DiagnosesConfig(path=dx_name, stay_id_column=dx_stay, class_column=dx_col),
        selection=selection,
    )


TRUTH_FILE = "truth.csv"


def export_truth(spec: HospitalSpec, out_dir: str | Path) -> Path:
    """Write one truth record per patient next to the generated tables."""
    out = Path(out_dir)
    missing = [t.table_name for t in spec.table_specs if not (out / t.table_name).exists()]
    if missing or not (out / "dataset.yaml").exists():
        raise FileNotFoundError(
            f"generation artifacts missing in {out}: {missing or ['dataset.yaml']}"
        )
    truth = ground_truth(simulate(spec.n_patients, spec.signal_strength, spec.seed))
    rows = []
    for r in truth:
        lab = r.labels
        rows.append([
            r.stay_id, r.patient_id, f"{r.latent_risk:.6f}", str(int(r.signal_present)),
            str(lab["mort"]), str(lab["los3"]), str(lab["los7"]), str(lab["readm"]),
            str(lab["fi_ac"]), str(lab["im_disch"]), "".join(map(str, lab["dx"])),
        ])
    path = out / TRUTH_FILE
    _write_csv(path, ["stay_id", "patient_id", "latent_risk", "signal_present", "mort",
                      "los3", "los7", "readm", "fi_ac", "im_disch", "dx"], rows)
    return path


def read_truth(path: str | Path) -> dict[str, dict[str, object]]:
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["stay_id"]] = {
                "latent_risk": float(row["latent_risk"]),
                "signal_present": row["signal_present"] == "1",
                "mort": int(row["mort"]), "los3": int(row["los3"]),
                "los7": int(row["los7"]), "readm": int(row["readm"]),
                "fi_ac": int(row["fi_ac"]), "im_disch": int(row["im_disch"]),
                "dx": [int(c) for c in row["dx"]],
            }
    return out


def check_disjoint_codes(specs: list[HospitalSpec]) -> None:
    prefixes = [s.code_prefix for s in specs]
    if len(set(prefixes)) != len(prefixes):
        raise ValueError(f"code prefixes must differ across hospitals: {prefixes}")


def demo_pair(n_patients: int = 500, signal_strength: float = 1.0,
              seed_a: int = 7, seed_b: int = 8) -> tuple[HospitalSpec, HospitalSpec]:
    """The standard MIMIC-like / eICU-like pair."""
    a = HospitalSpec("A", "A_", "mimic", n_patients, signal_strength, seed_a)
    b = HospitalSpec("B", "B_", "eicu", n_patients, signal_strength, seed_b)
    return a, b
