"""Acceptance suite: one test per criterion, summarised at the end of the run."""

import random
import time
from decimal import Decimal

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_SEEDS as SEEDS
from test_cohort import _events, _kept, _stay
from test_evaluate import ap_oracle

from ehrtext.evaluate import auprc, feature_importance, linear_probe_auprc, term_swap_eval
from ehrtext.evaluate import random_mapping
from ehrtext.ingest import Feature, MedicalEvent, drop_rare_features
from ehrtext.model import ModelConfig, build_model, loss_fn, param_count
from ehrtext.seqbuild import HierBatch, flatten
from ehrtext.synth_ehr import SIGNAL_DRUG, SYNONYMS
from ehrtext.tokens import TimeBuckets, decode_dpe, encode_numeric_dpe
from ehrtext.train import MaskedLM, pretrain

H = 60


def _prevalence(records, task="mort"):
    return float(np.mean([r.labels.get(task) for r in records]))


@pytest.mark.criterion(1, "AUPRC equals the O(n^2) oracle on 1000 random instances")
def test_criterion_01_auprc_oracle(criterion):
    rng = random.Random(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = rng.randint(2, 50)
        labels = [rng.randint(0, 1) for _ in range(n)]
        labels[rng.randrange(n)] = 1
        labels[rng.randrange(n)] = 0
        if sum(labels) in (0, n):
            labels[0], labels[-1] = 1, 0
        scores = [round(rng.random(), rng.choice([1, 2, 6])) for _ in range(n)]
        worst = max(worst, abs(auprc(scores, labels) - ap_oracle(scores, labels)))
    elapsed = time.perf_counter() - t0
    criterion.detail(f"max abs diff {worst:.1e}, {elapsed:.2f}s")
    assert worst <= 1e-9
    assert elapsed < 10


@pytest.mark.criterion(2, "gradient check, d=8, 2 events x 3 tokens")
def test_criterion_02_gradient_check(criterion):
    t0 = time.perf_counter()
    cfg = ModelConfig(vocab_size=16, d_model=8, n_heads=1, dropout=0.0)
    model = build_model(cfg, seed=1).double().eval()
    ids = np.array([[[6, 9, 12], [7, 13, 15]]])
    mask = ids != 0
    batch = HierBatch(ids, np.array([[[1, 2, 3], [1, 2, 4]]]), mask.any(-1), mask)
    labels = np.array([1.0])

    def loss():
        return loss_fn(model(batch), labels, "mort")

    model.zero_grad()
    loss().backward()
    h, worst = 1e-4, 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat, num = p.view(-1), torch.zeros(p.numel(), dtype=p.dtype)
            for i in range(p.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                num[i] = (up - loss().item()) / (2 * h)
                flat[i] = old
            ana = p.grad.view(-1)
            scale = max(ana.norm().item(), num.norm().item())
            err = (ana - num).norm().item() / scale if scale > 1e-12 else 0.0
            worst = max(worst, err)
            assert err < 1e-4, name
    elapsed = time.perf_counter() - t0
    criterion.detail(f"max relative error {worst:.1e}, {elapsed:.1f}s")
    assert elapsed < 60


@pytest.mark.criterion(3, "flatten equals pad-stripped concatenation on 100 random batches")
def test_criterion_03_flatten_equivalence(criterion):
    rng = np.random.default_rng(3)
    checked = 0
    for _ in range(100):
        n, S, W = (int(x) for x in rng.integers(1, [6, 9, 12]))
        ids = rng.integers(1, 400, size=(n, S, W))
        lens = rng.integers(0, W + 1, size=(n, S))
        ids[np.arange(W)[None, None, :] >= lens[..., None]] = 0
        mask = ids != 0
        b = HierBatch(ids, np.where(mask, 2, 0), mask.any(-1), mask)
        f = flatten(b)
        for i in range(n):
            oracle = [int(t) for j in range(S) for t in ids[i, j, :lens[i, j]]]
            assert f.token_ids[i, :len(oracle)].tolist() == oracle
            assert not f.token_ids[i, len(oracle):].any()
            checked += 1
    criterion.detail(f"{checked} rows")


@pytest.mark.criterion(4, "cohort boundary suite and labels equal ground truth on 500 patients")
def test_criterion_04_cohort_boundaries(criterion, hospitals):
    six = _events("1", range(6))
    assert _kept([_stay(age=18.0)], six) == ["1"]
    assert _kept([_stay(age=17.99)], six) == []
    assert _kept([_stay(los=24 * H)], six) == []
    assert _kept([_stay(los=24 * H + 1)], six) == ["1"]
    assert _kept([_stay()], _events("1", range(5))) == ["1"]
    assert _kept([_stay()], _events("1", range(4))) == []
    assert _kept([_stay()], _events("1", [0, 1, 2, 720, 721, 800, 900])) == []
    assert _kept([_stay()], _events("1", [0, 1, 2, 3, 720])) == ["1"]

    def ev(value):
        return MedicalEvent("rx", [Feature("drug", value, "text")], 0, "p", "1")

    assert len(drop_rare_features([ev("x")] * 4)) == 0
    assert len(drop_rare_features([ev("x")] * 5)) == 5

    mismatches = 0
    for h in hospitals.values():
        assert len(h.records) == 500
        for r in h.records:
            t = h.truth[r.stay_id]
            mismatches += sum(r.labels.get(k) != t[k] for k in
                              ("mort", "los3", "los7", "readm", "fi_ac", "im_disch", "dx"))
    criterion.detail(f"label mismatches vs ground truth: {mismatches}")
    assert mismatches == 0


@pytest.mark.criterion(5, "DPE round-trip on 1000 decimals and bucket monotonicity on 1000 sets")
def test_criterion_05_dpe_and_buckets(criterion):
    rng = random.Random(5)
    for _ in range(1000):
        scale = rng.randint(0, 4)
        v = Decimal(rng.randrange(-10 ** (7 + scale) + 1, 10 ** (7 + scale))) / Decimal(10 ** scale)
        assert decode_dpe(encode_numeric_dpe(f"{v:f}")) == v
    nrng = np.random.default_rng(5)
    for _ in range(1000):
        vals = nrng.exponential(nrng.uniform(1, 500), size=int(nrng.integers(1, 200)))
        b = TimeBuckets.fit(np.round(vals))
        probe = np.sort(nrng.uniform(-10, vals.max() * 1.5, size=50))
        ks = [b.bucket(float(t)) for t in probe]
        assert ks == sorted(ks) and 0 <= ks[0] and ks[-1] <= 19
    criterion.detail("1000 + 1000 cases")


@pytest.mark.criterion(6, "non-embedding parameter parity of the three hierarchical configs")
def test_criterion_06_parameter_parity(criterion):
    seen = {}
    for d in (8, 16, 32, 64, 128, 256):
        counts = {name: param_count(ModelConfig.preset(name, vocab_size=500 + 97 * i,
                                                       d_model=d))[1]
                  for i, name in enumerate(("unihpf", "descemb", "rajkomar"))}
        assert len(set(counts.values())) == 1, counts
        seen[d] = counts["unihpf"]
    flat = param_count(ModelConfig.preset("sand", vocab_size=500, d_model=128))[1]
    criterion.detail(f"d=128 hierarchical {seen[128]}, flattened {flat}")


@pytest.mark.criterion(7, "single-domain learning signal, UniHPF on A, 5 seeds")
def test_criterion_07_single_domain(criterion, acceptance_runs, hospitals):
    runs = acceptance_runs
    scores, prevs, best_valid = [], [], []
    for seed in SEEDS:
        scores.append(runs.test_auprc("text", seed, ["A"], "A"))
        test = runs.splits("A", seed)[2]
        prevs.append(_prevalence(test))
        best_valid.append(max(h["valid_auprc"] for h in runs.history("text", seed, ["A"])))
    recs = hospitals["A"].records
    x = np.array([any(e.main_feature == SIGNAL_DRUG for e in r.events) for r in recs], float)
    y = np.array([r.labels.mort for r in recs])
    probe = linear_probe_auprc(x, y)
    cpu = sum(v for (_, mode, _, src), v in runs.train_seconds.items()
              if mode == "text" and src == ("A",))
    mean, prev = float(np.mean(scores)), float(np.mean(prevs))
    criterion.detail(f"mean test AUPRC {mean:.3f}, prevalence {prev:.3f}, probe {probe:.3f}, "
                     f"per seed {np.round(scores, 3).tolist()}, train CPU {cpu:.0f}s")
    assert mean >= prev + 0.15
    assert abs(mean - probe) <= 0.1
    assert min(best_valid) > _prevalence(recs) + 0.15
    assert cpu <= 600


@pytest.mark.criterion(8, "zero-shot A to B: text transfers, code does not")
def test_criterion_08_zero_shot(criterion, acceptance_runs, hospitals):
    runs = acceptance_runs
    prev = _prevalence(hospitals["B"].records)
    text = [runs.test_auprc("text", s, ["A"], "B", "all") for s in SEEDS]
    code = [runs.test_auprc("code", s, ["A"], "B", "all") for s in SEEDS]
    criterion.detail(f"B prevalence {prev:.3f}, text {np.round(text, 3).tolist()}, "
                     f"code {np.round(code, 3).tolist()}")
    assert sum(t >= prev + 0.1 for t in text) >= 4
    assert sum(c <= prev + 0.05 for c in code) >= 4


@pytest.mark.criterion(9, "pooled learning: text does not lose, code does not gain")
def test_criterion_09_pooled(criterion, acceptance_runs):
    runs = acceptance_runs
    text_ok = {"A": 0, "B": 0}
    code_gap = {}
    parts = []
    for name in ("A", "B"):
        ts, tp, cs, cp = [], [], [], []
        for s in SEEDS:
            ts.append(runs.test_auprc("text", s, [name], name))
            tp.append(runs.test_auprc("text", s, ["A", "B"], name))
            cs.append(runs.test_auprc("code", s, [name], name))
            cp.append(runs.test_auprc("code", s, ["A", "B"], name))
        text_ok[name] = sum(p >= q - 0.02 for p, q in zip(tp, ts))
        code_gap[name] = float(np.mean(cp) - np.mean(cs))
        parts.append(f"{name}: text single {np.mean(ts):.3f} pooled {np.mean(tp):.3f} "
                     f"({text_ok[name]}/5 ok), code single {np.mean(cs):.3f} "
                     f"pooled {np.mean(cp):.3f}")
    criterion.detail("; ".join(parts))
    assert all(v >= 4 for v in text_ok.values())
    assert all(g <= 0.02 for g in code_gap.values())


@pytest.mark.criterion(10, "planted signal drug ranks in the top 5 of feature importance")
def test_criterion_10_importance(criterion, acceptance_runs):
    runs = acceptance_runs
    ranks = []
    for s in SEEDS:
        model = runs.model("text", s, ["A"])
        table = feature_importance(model, runs.encoded("text", s, ["A"], "A", 2), runs.task)
        names = [n for n, _ in table]
        ranks.append(names.index(SIGNAL_DRUG) + 1 if SIGNAL_DRUG in names else None)
    criterion.detail(f"rank of '{SIGNAL_DRUG}' per seed {ranks}")
    assert sum(r is not None and r <= 5 for r in ranks) >= 4


@pytest.mark.criterion(11, "term swap: synonyms cost < 0.02, random strings cost more")
def test_criterion_11_term_swap(criterion, acceptance_runs):
    runs = acceptance_runs
    rows = []
    for s in SEEDS:
        model = runs.model("text", s, ["A"])
        fz = runs.featurizer("text", s, ["A"])
        test = runs.splits("A", s)[2]
        before, syn = term_swap_eval(model, fz, test, SYNONYMS, runs.task, "A")
        _, rnd = term_swap_eval(model, fz, test, random_mapping(SYNONYMS, s), runs.task, "A")
        rows.append((before - syn, before - rnd))
    criterion.detail("drops (synonym, random) per seed "
                     + str([(round(a, 3), round(b, 3)) for a, b in rows]))
    for syn_drop, rnd_drop in rows:
        assert syn_drop < 0.02
        assert rnd_drop > syn_drop


@pytest.mark.criterion(12, "end-to-end CLI demo twice gives byte-identical metrics")
def test_criterion_12_cli_determinism(criterion, tmp_path):
    from ehrtext.cli import main

    outs = []
    for run in ("first", "second"):
        out = str(tmp_path / run)
        for stage in ("synth", "ingest", "cohort", "vocab", "build", "train", "eval"):
            assert main([stage, "--config", "demo", "--seed", "0", "--out", out]) == 0, stage
        outs.append((tmp_path / run / "metrics.csv").read_bytes())
    criterion.detail(outs[0].decode().strip().splitlines()[-1])
    assert outs[0] == outs[1]


@pytest.mark.criterion(13, "span-MLM masked accuracy below plain MLM")
def test_criterion_13_span_mlm(criterion, acceptance_runs):
    runs = acceptance_runs
    seed = 0
    tr = runs.encoded("text", seed, ["A"], "A", 0)
    va = runs.encoded("text", seed, ["A"], "A", 1)
    fz = runs.featurizer("text", seed, ["A"])
    cfg = runs.settings.model_config_for("sand", fz.vocab_size, runs.task).model_copy(
        update={"embedding_mode": "text"})
    acc = {}
    for objective in ("mlm", "span_mlm"):
        res = pretrain(tr, va, cfg, objective, rate=0.15, epochs=runs.settings.max_epochs,
                       lr=runs.settings.lr, seed=seed)
        assert isinstance(res.model, MaskedLM)
        acc[objective] = res.masked_accuracy
    criterion.detail(f"masked accuracy mlm {acc['mlm']:.4f}, span-mlm {acc['span_mlm']:.4f}")
    assert acc["span_mlm"] < acc["mlm"]
