import csv
import filecmp

import numpy as np
import pytest
from scipy import stats

from ehrtext.evaluate import linear_probe_auprc
from ehrtext.synth_ehr import (
    HospitalSpec,
    SIGNAL_DRUG,
    check_disjoint_codes,
    demo_pair,
    export_truth,
    generate_hospital,
    ground_truth,
    read_truth,
    simulate,
    truth_labels,
)


def _binary_feature_ap(x, y):
    """AP of a 0/1 score with tied scores grouped: closed form over two thresholds."""
    x, y = np.asarray(x, bool), np.asarray(y, bool)
    pos = y.sum()
    hi_tp, hi_n = (x & y).sum(), x.sum()
    ap = (hi_tp / hi_n) * (hi_tp / pos) if hi_n else 0.0
    return ap + (pos / len(y)) * ((pos - hi_tp) / pos)


def test_generation_is_byte_identical(tmp_path):
    spec = HospitalSpec("A", "A_", "mimic", 40, 1.0, 7)
    generate_hospital(spec, tmp_path / "a")
    generate_hospital(spec, tmp_path / "b")
    export_truth(spec, tmp_path / "a")
    export_truth(spec, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert not mismatch and not errors and len(match) == len(names)


def test_rejects_bad_specs(tmp_path):
    with pytest.raises(ValueError):
        generate_hospital(HospitalSpec("A", "A_", n_patients=0), tmp_path)
    with pytest.raises(ValueError):
        HospitalSpec("A", "A_", signal_strength=1.5)
    spec = HospitalSpec("A", "A_", n_patients=3)
    spec.table_specs.append(spec.table_specs[0])
    with pytest.raises(ValueError, match="duplicate"):
        generate_hospital(spec, tmp_path)
    with pytest.raises(ValueError):
        check_disjoint_codes([HospitalSpec("A", "X_"), HospitalSpec("B", "X_")])


def test_export_truth_requires_generation(tmp_path):
    with pytest.raises(FileNotFoundError):
        export_truth(HospitalSpec("A", "A_", n_patients=5), tmp_path)


def test_truth_cardinality(demo_dirs):
    truth = read_truth(demo_dirs["A"] / "truth.csv")
    assert len(truth) == 500


def test_truth_label_examples():
    four_days = 4 * 24 * 60
    lab = truth_labels(four_days, False, None, "home", 1, [3, 17])
    assert lab["los3"] == 1 and lab["los7"] == 0
    assert lab["readm"] == 0
    assert lab["dx"] == [int(c in (3, 17)) for c in range(18)]
    assert truth_labels(3000, True, 20 * 60, "died", 1, [0])["mort"] == 1


def test_every_patient_has_enough_early_events():
    for st in simulate(200, 1.0, 3):
        assert len(st.events) >= 5
        assert sum(e.minute <= 720 for e in st.events) >= 5
        assert st.los > 24 * 60
        assert max(e.minute for e in st.events) - min(e.minute for e in st.events) > 24 * 60


def _column(path, col):
    with open(path, newline="", encoding="utf-8") as fh:
        return [r[col] for r in csv.DictReader(fh)]


def _header(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return set(next(csv.reader(fh)))


def test_hospitals_share_descriptions_not_codes(demo_dirs):
    a, b = demo_dirs["A"], demo_dirs["B"]
    a_cols = set().union(*(_header(p) for p in a.glob("*.csv") if p.name != "truth.csv"))
    b_cols = set().union(*(_header(p) for p in b.glob("*.csv") if p.name != "truth.csv"))
    assert not a_cols & b_cols
    a_codes = set(_column(a / "d_drugs.csv", "drug_code"))
    b_codes = set(_column(b / "med_dictionary.csv", "medcode"))
    assert a_codes and b_codes and not a_codes & b_codes
    assert sorted(_column(a / "d_drugs.csv", "drug_name")) == sorted(
        _column(b / "med_dictionary.csv", "medname"))
    assert SIGNAL_DRUG in _column(a / "d_drugs.csv", "drug_name")


def test_same_content_yields_same_descriptions(tmp_path):
    # equal seeds, different hospital id / prefix / layout
    a = HospitalSpec("A", "A_", "mimic", 30, 1.0, 5)
    b = HospitalSpec("B", "B_", "eicu", 30, 1.0, 5)
    from ehrtext.experiments import load_hospital

    for s in (a, b):
        generate_hospital(s, tmp_path / s.hospital_id)
    ha, hb = (load_hospital(tmp_path / n) for n in "AB")

    def descriptions(h):
        return sorted(e.main_feature for r in h.records for e in r.events)

    assert descriptions(ha) == descriptions(hb)


def test_null_signal_is_independent_of_mortality():
    truth = ground_truth(simulate(500, 0.0, 11))
    table = np.zeros((2, 2))
    for t in truth:
        table[int(t.signal_present), t.labels["mort"]] += 1
    assert stats.chi2_contingency(table).pvalue > 0.01


def test_planted_signal_is_linearly_detectable():
    truth = ground_truth(simulate(500, 1.0, 7))
    x = np.array([t.signal_present for t in truth], float)
    y = np.array([t.labels["mort"] for t in truth])
    prevalence = y.mean()
    oracle = _binary_feature_ap(x, y)
    assert linear_probe_auprc(x, y) == pytest.approx(oracle, abs=1e-12)
    assert oracle > prevalence + 0.2


def test_signal_occurrence_monotone_in_risk():
    stays = simulate(2000, 1.0, 1)
    u = np.array([s.latent_risk for s in stays])
    present = np.array([s.signal_present for s in stays])
    rates = [present[(u >= lo) & (u < lo + 0.25)].mean() for lo in (0, 0.25, 0.5, 0.75)]
    assert rates == sorted(rates)


def test_demo_pair_prefixes_disjoint():
    check_disjoint_codes(list(demo_pair(10)))
