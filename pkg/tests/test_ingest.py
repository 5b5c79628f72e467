from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrtext.config import DefinitionJoin, TableConfig, load_dataset_config
from ehrtext.ingest import (
    CATEGORICAL,
    DROPPED,
    NUMERIC,
    TEXT,
    Feature,
    MedicalEvent,
    drop_rare_features,
    extract_events,
    infer_schema,
    ingest_dataset,
    join_definitions,
    load_definitions,
)

TABLE = TableConfig(path="t.csv", event_type="drug", timestamp_column="t",
                    stay_id_column="stay")


def _rows(**cols):
    n = len(next(iter(cols.values())))
    return [{k: v[i] for k, v in cols.items()} for i in range(n)]


def test_integer_column_with_many_values_dropped():
    rows = _rows(stay=["1"] * 1000, t=["0"] * 1000, rid=[str(i) for i in range(1000)])
    assert infer_schema(rows, TABLE)["rid"] == DROPPED


def test_integer_column_with_few_values_is_categorical():
    rows = _rows(stay=["1"] * 9, t=["0"] * 9, flag=["1", "2", "3"] * 3)
    assert infer_schema(rows, TABLE)["flag"] == CATEGORICAL


def test_distinct_threshold_boundary():
    for n, kind in ((49, CATEGORICAL), (50, DROPPED)):
        rows = _rows(stay=["1"] * n, t=["0"] * n, c=[str(i) for i in range(n)])
        assert infer_schema(rows, TABLE)["c"] == kind


def test_fractional_column_is_numeric_and_ids_exempt():
    rows = _rows(stay=[str(i) for i in range(100)], t=[str(i) for i in range(100)],
                 dose=["10.5"] + ["3"] * 99, route=["IV"] * 100)
    cls = infer_schema(rows, TABLE)
    assert cls["dose"] == NUMERIC and cls["route"] == TEXT
    assert cls["stay"] != DROPPED and cls["t"] != DROPPED


def test_schema_errors():
    with pytest.raises(ValueError, match="empty"):
        infer_schema([], TABLE)
    with pytest.raises(ValueError, match="timestamp"):
        infer_schema(_rows(stay=["1"], t=["yesterday"]), TABLE)


def test_extract_event_mapping():
    rows = _rows(stay=["1"], t=["30"], drug=["x"], dose=["2.5"], route=["IV"])
    ev = extract_events(rows, TABLE, infer_schema(rows, TABLE))
    assert len(ev) == 1
    e = ev[0]
    assert e.timestamp == 30 and e.event_type == "drug" and e.stay_id == "1"
    assert [(f.name, f.value) for f in e.features] == [("drug", "x"), ("dose", "2.5"), ("route", "IV")]
    assert all(isinstance(f.value, str) for f in e.features)


def test_null_value_kept_as_empty_string():
    rows = _rows(stay=["1", "1"], t=["0", "5"], drug=["x", "y"], dose=["", "1.5"])
    ev = extract_events(rows, TABLE, infer_schema(rows, TABLE))
    assert [e.timestamp for e in ev] == [0, 5]
    assert ev[0].features[1] == Feature("dose", "", NUMERIC)


def test_rows_missing_ids_are_skipped():
    from ehrtext.ingest import IngestStats

    rows = _rows(stay=["1", ""], t=["0", "0"], drug=["x", "y"])
    stats = IngestStats()
    ev = extract_events(rows, TABLE, infer_schema(rows, TABLE), stats=stats)
    assert len(ev) == 1 and stats.skipped_missing_id == 1


def _ev(*values, et="drug", stay="1"):
    return MedicalEvent(et, [Feature(f"c{i}", v, TEXT) for i, v in enumerate(values)], 0, "p", stay)


def test_join_definitions():
    evs = [_ev("A_50912"), _ev("A_1")]
    join_definitions(evs, {"c0": {"A_50912": "creatinine"}})
    assert [e.main_feature for e in evs] == ["creatinine", "A_1"]
    same = [_ev("A_50912")]
    assert join_definitions(same, {"c0": {}})[0].main_feature == "A_50912"


def test_missing_definition_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_definitions(tmp_path / "nope.csv", "k", "v")


def test_rare_feature_boundary():
    evs = [_ev("a", "rare") for _ in range(4)] + [_ev("b", "ok") for _ in range(5)]
    out = drop_rare_features(evs)
    # "a" and "rare" occur 4 times: events lose their main feature and are deleted
    assert len(out) == 5 and all(e.main_feature == "b" for e in out)
    evs = [_ev("m", "x") for _ in range(5)] + [_ev("m", "y") for _ in range(4)]
    out = drop_rare_features(evs)
    assert len(out) == 9
    assert Counter(len(e.features) for e in out) == Counter({2: 5, 1: 4})


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.sampled_from("uvwxyz")), max_size=60))
def test_rare_removal_leaves_only_frequent_pairs(pairs):
    evs = [_ev(m, v) for m, v in pairs]
    out = drop_rare_features(evs)
    counts = Counter((f.name, f.value) for e in evs for f in e.features)
    for e in out:
        assert counts[("c0", e.main_feature)] >= 5
        assert all(counts[(f.name, f.value)] >= 5 for f in e.features)
    assert len(out) <= len(evs)


def test_schema_agnostic_ingest(tmp_path):
    """Same content rendered in two layouts: descriptions agree as multisets."""
    from ehrtext.synth_ehr import HospitalSpec, generate_hospital

    for spec in (HospitalSpec("A", "A_", "mimic", 60, 1.0, 4),
                 HospitalSpec("B", "B_", "eicu", 60, 1.0, 4)):
        generate_hospital(spec, tmp_path / spec.hospital_id)
    ev_a, _ = ingest_dataset(load_dataset_config(tmp_path / "A"))
    ev_b, _ = ingest_dataset(load_dataset_config(tmp_path / "B"))
    assert len(ev_a) == len(ev_b) > 0
    assert Counter(e.main_feature for e in ev_a) == Counter(e.main_feature for e in ev_b)
    assert not any(e.main_feature.startswith(("A_", "B_")) for e in ev_a + ev_b)


def test_no_integer_id_columns_survive(demo_dirs):
    for d in demo_dirs.values():
        events, stats = ingest_dataset(load_dataset_config(d))
        for table, cls in stats.classification.items():
            for col, kind in cls.items():
                if kind not in (CATEGORICAL, NUMERIC, TEXT):
                    continue
                values = {f.value for e in events if e.event_type == table
                          for f in e.features if f.name == col}
                if values and all(v.lstrip("-").isdigit() for v in values if v):
                    assert len(values) <= 50


def test_classification_idempotent():
    rows = _rows(stay=[str(i % 7) for i in range(80)], t=[str(i) for i in range(80)],
                 rid=[str(i) for i in range(80)], lvl=[str(i % 3) for i in range(80)],
                 val=[f"{i}.5" for i in range(80)], name=["na"] * 80)
    cls = infer_schema(rows, TABLE)
    kept = [c for c, k in cls.items() if k != DROPPED]
    filtered = [{c: r[c] for c in kept} for r in rows]
    cls2 = infer_schema(filtered, TABLE)
    assert cls2 == {c: cls[c] for c in kept}


def test_definition_join_config_roundtrip():
    j = DefinitionJoin(column="c", path="d.csv", key_column="k", value_column="v")
    assert TableConfig(**{**TABLE.model_dump(), "definition_joins": [j.model_dump()]}).definition_joins == [j]
