import copy

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ehrtext.model import (
    PRESETS,
    InputEmbedding,
    ModelConfig,
    build_model,
    load_checkpoint,
    loss_fn,
    param_count,
    read_checkpoint_header,
    save_checkpoint,
    sinusoidal,
)
from ehrtext.seqbuild import HierBatch, flatten


def _batch(ids, types=None):
    ids = np.asarray(ids, dtype=np.int64)
    types = np.where(ids > 0, 2, 0) if types is None else np.asarray(types)
    mask = ids != 0
    return HierBatch(ids, types, mask.any(-1), mask)


def _tiny(task="mort", vocab=12, d=8, heads=1, structure="hierarchical", mode="text"):
    cfg = ModelConfig(embedding_mode=mode, structure=structure, vocab_size=vocab, d_model=d,
                      n_heads=heads, dropout=0.0, task=task)
    return build_model(cfg, seed=0).double().eval()


def test_presets_map_to_named_baselines():
    assert PRESETS["unihpf"] == ("text", "entire", "hierarchical")
    assert PRESETS["descemb"] == ("text", "selected", "hierarchical")
    assert PRESETS["rajkomar"] == ("code", "entire", "hierarchical")
    assert PRESETS["sand"] == ("code", "selected", "flattened")
    assert ModelConfig.preset("SAnD*", vocab_size=5).name == "sand"
    with pytest.raises(ValueError):
        ModelConfig.preset("bert")


def test_gradients_match_central_differences():
    torch.manual_seed(0)
    model = _tiny()
    batch = _batch([[[5, 7, 9], [6, 8, 0]], [[10, 11, 3], [0, 0, 0]]])
    labels = np.array([1.0, 0.0])

    def loss():
        return loss_fn(model(batch), labels, "mort")

    model.zero_grad()
    loss().backward()
    h = 1e-4
    worst = 0.0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.detach().clone()
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                nflat[i] = (up - down) / (2 * h)
            scale = max(analytic.norm().item(), numeric.norm().item())
            err = (analytic - numeric).norm().item() / scale if scale > 1e-10 else 0.0
            worst = max(worst, err)
            assert err < 1e-4, (name, err)
    print(f"max relative gradient error {worst:.2e}")


def test_pad_invariance():
    model = _tiny(vocab=20)
    base = [[[5, 7, 9], [6, 8, 0]], [[10, 11, 3], [12, 0, 0]]]
    padded = np.zeros((2, 5, 6), dtype=np.int64)
    padded[:, :2, :3] = base
    a = model(_batch(base))
    b = model(_batch(padded))
    assert torch.allclose(a, b, atol=1e-10)
    # permuting two pad-only trailing event slots
    perm = padded[:, [0, 1, 3, 2, 4]]
    assert torch.allclose(model(_batch(perm)), b, atol=1e-12)


def test_duplicate_samples_give_identical_logits():
    model = _tiny(vocab=20, task="dx")
    out = model(_batch([[[5, 7, 9], [6, 8, 0]], [[5, 7, 9], [6, 8, 0]]]))
    assert out.shape == (2, 18)
    assert torch.equal(out[0], out[1])


def test_flat_model_accepts_both_batch_kinds():
    model = _tiny(vocab=20, structure="flattened", mode="code")
    b = _batch([[[5, 7, 9], [6, 8, 0]]])
    assert torch.equal(model(b), model(flatten(b)))


def test_embedding_contract():
    cfg = ModelConfig(vocab_size=30, d_model=16, n_heads=2, dropout=0.0)
    emb = InputEmbedding(cfg).eval()
    ids = torch.tensor([[4, 9, 9, 9, 9, 4, 0, 0]])
    x = emb(ids, torch.where(ids > 0, 2, 0), ids != 0)
    assert torch.all(x[0, 6:] == 0)
    pe = sinusoidal(8, 16)
    assert torch.allclose(x[0, 5] - x[0, 0], pe[5] - pe[0], atol=1e-6)
    assert emb.tokens.weight.shape[1] == 16
    assert build_model(ModelConfig(vocab_size=30)).embed.tokens.weight.shape[1] == 128
    with pytest.raises(IndexError):
        emb(torch.tensor([[31]]), torch.tensor([[2]]), torch.tensor([[True]]))


@settings(max_examples=8, deadline=None)
@given(st.sampled_from([4, 8, 16, 32, 64]), st.integers(20, 900))
def test_parameter_parity(d, vocab):
    counts = {name: param_count(ModelConfig.preset(name, vocab_size=vocab + 50 * i,
                                                   d_model=d, n_heads=4))[1]
              for i, name in enumerate(["unihpf", "descemb", "rajkomar"])}
    assert len(set(counts.values())) == 1


def test_parameter_counts_grow_with_width():
    small = param_count(ModelConfig(vocab_size=100, d_model=32))[1]
    big = param_count(ModelConfig(vocab_size=100, d_model=64))[1]
    assert big > small
    hier = param_count(ModelConfig(vocab_size=1000, d_model=128))[1]
    flat = param_count(ModelConfig.preset("sand", vocab_size=1000, d_model=128))[1]
    print(f"non-embedding parameters at d=128: hierarchical {hier}, flattened {flat}")


def _bce_oracle(z, y):
    z, y = mpmath.mpf(z), mpmath.mpf(y)
    p = 1 / (1 + mpmath.exp(-z))
    return -(y * mpmath.log(p) + (1 - y) * mpmath.log(1 - p))


def test_loss_examples():
    assert loss_fn(torch.zeros(1, 1), [1.0], "mort").item() == pytest.approx(np.log(2))
    big = torch.full((1, 7), -50.0)
    big[0, 3] = 50.0
    assert loss_fn(big, [3], "fi_ac").item() < 1e-30
    with pytest.raises(ValueError):
        loss_fn(torch.tensor([[float("nan")]]), [1.0], "mort")


def test_loss_matches_arbitrary_precision_oracle():
    mpmath.mp.dps = 40
    rng = np.random.default_rng(5)
    z = rng.normal(0, 4, size=(16, 18))
    y = (rng.random((16, 18)) < 0.3).astype(float)
    got = loss_fn(torch.tensor(z), y, "dx").item()
    expect = sum(_bce_oracle(a, b) for a, b in zip(z.ravel(), y.ravel())) / z.size
    assert got == pytest.approx(float(expect), abs=1e-6)

    logits = rng.normal(0, 3, size=(10, 7))
    cls = rng.integers(0, 7, size=10)
    got = loss_fn(torch.tensor(logits), cls, "im_disch").item()
    oracle = 0
    for row, c in zip(logits, cls):
        lse = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in row))
        oracle += lse - mpmath.mpf(row[c])
    assert got == pytest.approx(float(oracle / 10), abs=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    model = build_model(ModelConfig(vocab_size=40, d_model=16, n_heads=2), seed=3).eval()
    save_checkpoint(tmp_path / "m.ckpt", model, "vh", 3, {"note": 1})
    head = read_checkpoint_header(tmp_path / "m.ckpt")
    assert head["config_hash"] == model.cfg.hash and head["seed"] == 3
    back, _ = load_checkpoint(tmp_path / "m.ckpt", "vh")
    b = _batch([[[5, 7, 9], [6, 8, 0]]])
    assert torch.equal(model(b), back(b))
    with pytest.raises(ValueError, match="mismatch"):
        load_checkpoint(tmp_path / "m.ckpt", "other")
    load_checkpoint(tmp_path / "m.ckpt", "other", allow_vocab_mismatch=True)


def test_same_seed_same_weights():
    a = build_model(ModelConfig(vocab_size=40, d_model=16, n_heads=2), seed=9)
    b = build_model(ModelConfig(vocab_size=40, d_model=16, n_heads=2), seed=9)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    c = copy.deepcopy(a)
    assert c.cfg == a.cfg
