"""Stratified splits, supervised training with early stopping, transfer and MLM pretraining."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from torch import nn
from torch.nn import functional as F

from .cohort import TASKS
from .evaluate import task_auprc
from .model import ModelConfig, PredictiveModel, build_model, loss_fn, scores_from_logits
from .seqbuild import EncodedSample, FlatBatch, flatten, iter_batches, task_labels
from .tokens import CLS, MASK, PAD, SEP, UNK

logger = logging.getLogger(__name__)

Mode = Literal["single", "pooled", "zero_shot", "fine_tune", "pretrain"]


class ExperimentPlan(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Mode = "single"
    sources: list[str]
    target: Optional[str] = None
    task: str = "mort"
    seeds: list[int] = [0, 1, 2, 3, 4]
    split_ratio: tuple[float, float, float] = (0.8, 0.1, 0.1)
    lr: float = 1e-4
    dropout: float = 0.3
    patience: int = 10
    batch_size: int = 32
    max_epochs: int = 100
    max_events: int = 256
    max_tokens: int = 128

    @field_validator("task")
    @classmethod
    def _known_task(cls, v):
        if v not in TASKS:
            raise ValueError(f"unknown task {v!r}; choose from {sorted(TASKS)}")
        return v

    @field_validator("split_ratio")
    @classmethod
    def _ratio(cls, v):
        check_ratio(v)
        return v

    @model_validator(mode="after")
    def _mode_rules(self):
        if not self.sources:
            raise ValueError("at least one source dataset is required")
        if self.mode in ("zero_shot", "fine_tune"):
            if self.target is None or self.target in self.sources:
                raise ValueError(f"{self.mode} needs a target different from the sources")
        if self.mode == "pooled" and len(set(self.sources)) < 2:
            raise ValueError("pooled training needs at least two sources")
        return self


def check_ratio(ratio: Sequence[float]) -> None:
    if len(ratio) != 3 or any(r <= 0 for r in ratio):
        raise ValueError("split ratio needs three positive parts (train, valid, test)")
    if not math.isclose(sum(ratio), 1.0, abs_tol=1e-9):
        raise ValueError("split ratio must sum to 1")


# ------------------------------------------------------------------ splits

def stratum_keys(labels: np.ndarray, kind: str) -> list:
    """One hashable key per sample; multi-label rows use their globally rarest positive class."""
    if kind != "multilabel":
        return [int(x) for x in np.asarray(labels).reshape(len(labels), -1)[:, 0]]
    labels = np.asarray(labels)
    freq = labels.sum(0)
    keys = []
    for row in labels:
        pos = np.flatnonzero(row)
        keys.append(int(pos[np.argmin(freq[pos])]) if len(pos) else -1)
    return keys


def split_stratified(
    labels: np.ndarray, ratio: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0,
    kind: str = "binary",
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index arrays (train, valid, test), stratified on the label.

    Each stratum is shuffled with the seeded generator and cut so that its
    valid and test shares are ``round(n * ratio)``.  For multi-label targets
    strata smaller than three are pooled together instead of rejected.
    """
    check_ratio(ratio)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot split an empty cohort")
    keys = stratum_keys(labels, kind)
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    if kind == "multilabel":
        small = [k for k, v in groups.items() if len(v) < 3]
        if small:
            merged = sorted(i for k in small for i in groups.pop(k))
            groups.setdefault("merged", []).extend(merged)
    for k, v in groups.items():
        if len(v) < 3:
            raise ValueError(f"label class {k!r} has {len(v)} members; at least 3 are needed")
    rng = np.random.default_rng(seed)
    out = ([], [], [])
    for k in sorted(groups, key=str):
        idx = rng.permutation(np.asarray(groups[k]))
        n = len(idx)
        n_test = max(1, int(round(n * ratio[2])))
        n_valid = max(1, int(round(n * ratio[1])))
        if n_test + n_valid >= n:
            n_test, n_valid = 1, 1
        out[2].extend(idx[:n_test])
        out[1].extend(idx[n_test:n_test + n_valid])
        out[0].extend(idx[n_test + n_valid:])
    return tuple(np.sort(np.asarray(o, dtype=np.int64)) for o in out)


def split_samples(samples: Sequence, task: str, ratio=(0.8, 0.1, 0.1), seed: int = 0):
    idx = split_stratified(task_labels(samples, task), ratio, seed, TASKS[task][0])
    return tuple([samples[i] for i in part] for part in idx)


# ---------------------------------------------------------------- training

class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without a strict improvement."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad = 0

    def update(self, metric: float) -> bool:
        self.epoch += 1
        if metric > self.best:
            self.best, self.best_epoch, self.bad = metric, self.epoch, 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class TrainResult:
    model: PredictiveModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid: float = float("nan")


def _batches(samples, task, bs, order, plan_caps, flat):
    for hb in iter_batches(samples, bs, task, order, **plan_caps):
        yield flatten(hb) if flat else hb


def predict(model: PredictiveModel, samples: Sequence[EncodedSample], task: str,
            batch_size: int = 64, max_events: int | None = None,
            max_tokens: int | None = None) -> np.ndarray:
    model.eval()
    out = []
    caps = {"max_events": max_events, "max_tokens": max_tokens}
    with torch.no_grad():
        for b in _batches(samples, None, batch_size, None, caps, False):
            out.append(scores_from_logits(model(b), task))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate_samples(model, samples, task, batch_size=64, **caps) -> float:
    return task_auprc(predict(model, samples, task, batch_size, **caps),
                      task_labels(samples, task), task)


def _groups(samples):
    by: dict[str, list] = {}
    for s in samples:
        by.setdefault(s.source, []).append(s)
    return by


def validation_score(model, valid, task, batch_size=64, **caps) -> float:
    """AUPRC on the validation set; with several sources, the mean over sources."""
    groups = _groups(valid)
    scores = [evaluate_samples(model, g, task, batch_size, **caps) for g in groups.values()]
    return float(np.mean(scores))


def load_matching(model: nn.Module, state: dict) -> list[str]:
    """Copy tensors whose names and shapes match; returns the loaded names."""
    own = model.state_dict()
    loaded = [k for k, v in state.items() if k in own and own[k].shape == v.shape]
    own.update({k: state[k] for k in loaded})
    model.load_state_dict(own)
    return loaded


def train_model(
    train: Sequence[EncodedSample],
    valid: Sequence[EncodedSample],
    cfg: ModelConfig,
    seed: int = 0,
    lr: float = 1e-4,
    patience: int = 10,
    batch_size: int = 32,
    max_epochs: int = 100,
    max_events: int | None = None,
    max_tokens: int | None = None,
    init: PredictiveModel | dict | None = None,
) -> TrainResult:
    """Adam at a fixed learning rate; keeps the parameters with the best validation AUPRC."""
    torch.manual_seed(seed)
    model = build_model(cfg, seed)
    if init is not None:
        load_matching(model, init.state_dict() if isinstance(init, nn.Module) else init)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    caps = {"max_events": max_events, "max_tokens": max_tokens}
    flat = cfg.structure == "flattened"
    stopper = EarlyStopper(patience)
    best_state = copy.deepcopy(model.state_dict())
    result = TrainResult(model)
    if max_epochs > 0:
        result.best_valid = validation_score(model, valid, cfg.task, **caps)
    for epoch in range(1, max_epochs + 1):
        model.train()
        losses = []
        for b in _batches(train, cfg.task, batch_size, rng.permutation(len(train)), caps, flat):
            loss = loss_fn(model(b), b.labels, cfg.task)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"loss diverged at epoch {epoch}: {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        score = validation_score(model, valid, cfg.task, **caps)
        result.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                               "valid_auprc": score})
        logger.debug("epoch %d loss %.4f valid %.4f", epoch, np.mean(losses), score)
        if score > stopper.best:
            best_state = copy.deepcopy(model.state_dict())
        if stopper.update(score):
            break
    result.best_epoch = stopper.best_epoch
    if stopper.best_epoch:
        result.best_valid = stopper.best
    model.load_state_dict(best_state)
    model.eval()
    return result


def run_transfer(
    source_model: PredictiveModel,
    target_train: Sequence[EncodedSample],
    target_valid: Sequence[EncodedSample],
    target_test: Sequence[EncodedSample],
    mode: str = "zero_shot",
    seed: int = 0,
    **train_kw,
) -> dict:
    """Zero-shot: score the source model on the target test set unchanged.

    Fine-tune: continue training from the source parameters on the target
    splits; the source model object itself is never modified.
    """
    task = source_model.cfg.task
    caps = {k: train_kw[k] for k in ("max_events", "max_tokens") if k in train_kw}
    if mode == "zero_shot":
        return {"auprc": evaluate_samples(source_model, target_test, task, **caps), "epochs": 0}
    if mode != "fine_tune":
        raise ValueError(f"unknown transfer mode {mode!r}")
    res = train_model(target_train, target_valid, source_model.cfg, seed,
                      init=copy.deepcopy(source_model.state_dict()), **train_kw)
    return {"auprc": evaluate_samples(res.model, target_test, task, **caps),
            "epochs": len(res.history), "model": res.model}


# ------------------------------------------------------------- pretraining

NON_TARGET = (PAD, UNK, CLS, SEP, MASK)


class MaskedLM(nn.Module):
    """Flattened encoder with a token-prediction head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.model_copy(update={"structure": "flattened"})
        self.backbone = PredictiveModel(self.cfg)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)

    def forward(self, flat: FlatBatch) -> torch.Tensor:
        return self.lm_head(self.backbone.forward_flat(flat, pool=False))


def mask_tokens(flat: FlatBatch, objective: str, rate: float, vocab_size: int,
                rng: np.random.Generator) -> tuple[FlatBatch, np.ndarray]:
    """Return the corrupted batch and a target array (-100 where not predicted)."""
    if rate <= 0:
        raise ValueError("mask rate must be positive")
    ids = flat.token_ids.copy()
    target = np.full(ids.shape, -100, dtype=np.int64)
    candidate = ~np.isin(ids, NON_TARGET)
    if objective == "mlm":
        chosen = candidate & (rng.random(ids.shape) < rate)
        roll = rng.random(ids.shape)
        target[chosen] = ids[chosen]
        ids[chosen & (roll < 0.8)] = MASK
        rand = chosen & (roll >= 0.8) & (roll < 0.9)
        ids[rand] = rng.integers(len(NON_TARGET), vocab_size, size=int(rand.sum()))
    elif objective == "span_mlm":
        for i in range(ids.shape[0]):
            o = flat.offsets[i]
            spans = [(a, b) for a, b in zip(o[:-1], o[1:]) if b > a]
            total = sum(b - a for a, b in spans)
            covered = 0
            for k in rng.permutation(len(spans)):
                if covered >= rate * total:
                    break
                a, b = spans[k]
                target[i, a:b] = ids[i, a:b]
                ids[i, a:b] = MASK
                covered += b - a
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if not (target != -100).any():
        raise ValueError("masking produced no prediction targets")
    return FlatBatch(ids, flat.type_ids, flat.token_mask, flat.offsets), target


@dataclass
class PretrainResult:
    model: MaskedLM
    history: list[dict]
    masked_accuracy: float


def masked_accuracy(model: MaskedLM, samples, objective, rate=0.15, batch_size=32, seed=0,
                    max_events=None, max_tokens=None) -> float:
    model.eval()
    rng = np.random.default_rng(seed)
    hit = total = 0
    with torch.no_grad():
        for hb in iter_batches(samples, batch_size, None, None,
                               max_events=max_events, max_tokens=max_tokens):
            fb, target = mask_tokens(flatten(hb), objective, rate, model.cfg.vocab_size, rng)
            pred = model(fb).argmax(-1).numpy()
            sel = target != -100
            hit += int((pred[sel] == target[sel]).sum())
            total += int(sel.sum())
    return hit / total


def pretrain(
    train: Sequence[EncodedSample],
    valid: Sequence[EncodedSample],
    cfg: ModelConfig,
    objective: str = "mlm",
    rate: float = 0.15,
    epochs: int = 5,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    max_events: int | None = None,
    max_tokens: int | None = None,
) -> PretrainResult:
    """Masked-token pretraining on flattened stays; reports held-out masked accuracy."""
    if rate <= 0:
        raise ValueError("mask rate must be positive")
    torch.manual_seed(seed)
    model = MaskedLM(cfg)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    for epoch in range(1, epochs + 1):
        model.train()
        losses = []
        for hb in iter_batches(train, batch_size, None, rng.permutation(len(train)),
                               max_events=max_events, max_tokens=max_tokens):
            fb, target = mask_tokens(flatten(hb), objective, rate, cfg.vocab_size, rng)
            logits = model(fb)
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]),
                                   torch.as_tensor(target).reshape(-1), ignore_index=-100)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        acc = masked_accuracy(model, valid, objective, rate, batch_size, seed,
                              max_events, max_tokens)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "masked_accuracy": acc})
        logger.info("%s epoch %d loss %.4f masked acc %.4f", objective, epoch, np.mean(losses), acc)
    return PretrainResult(model, history, history[-1]["masked_accuracy"] if history else float("nan"))


def pretrained_state(result: PretrainResult) -> dict:
    """Backbone weights, ready to pass as ``init`` to :func:`train_model`."""
    return {k: v.clone() for k, v in result.model.backbone.state_dict().items()
            if not k.startswith("head.")}
