"""AUPRC, significance tests, gradient feature importance, term-swap checks and reports."""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .cohort import TASKS

logger = logging.getLogger(__name__)


def auprc(scores: Sequence[float], labels: Sequence[int], ties: str = "stable") -> float:
    """Average precision: mean of precision@k over the ranks k of the positives.

    Items are ranked by descending score.  With ``ties="stable"`` equal
    scores keep their input order; ``ties="grouped"`` treats a run of equal
    scores as one threshold (the step-wise PR-curve area).
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("auprc needs at least one positive and one negative label")
    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    if ties == "stable":
        k = np.arange(1, len(y) + 1)
        return float(np.sum((tp / k)[y_sorted]) / n_pos)
    if ties != "grouped":
        raise ValueError(f"unknown tie policy {ties!r}")
    s_sorted = s[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s) - 1]
    tp_at = tp[last]
    precision = tp_at / (last + 1)
    recall_gain = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(precision * recall_gain))


def task_auprc(scores: np.ndarray, labels: np.ndarray, task: str) -> float:
    """AUPRC for a task; multi-class and multi-label scores are macro-averaged."""
    kind, n = TASKS[task]
    if kind == "binary":
        return auprc(scores, labels)
    scores = np.asarray(scores).reshape(len(labels), n)
    onehot = np.eye(n)[np.asarray(labels, dtype=int)] if kind == "multiclass" else np.asarray(labels)
    vals = [auprc(scores[:, c], onehot[:, c]) for c in range(n)
            if 0 < onehot[:, c].sum() < len(onehot)]
    if not vals:
        raise ValueError("no class has both positive and negative examples")
    return float(np.mean(vals))


def linear_probe_scores(x: np.ndarray, y: np.ndarray, iters: int = 50) -> np.ndarray:
    """In-sample logistic regression (Newton steps, small ridge) on a feature matrix."""
    x = np.asarray(x, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    X = np.hstack([np.ones((len(x), 1)), x])
    y = np.asarray(y, dtype=float)
    w = np.zeros(X.shape[1])
    ridge = 1e-6 * np.eye(X.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-X @ w))
        H = X.T @ (X * (p * (1 - p))[:, None]) + ridge
        step = np.linalg.solve(H, X.T @ (y - p) - ridge @ w)
        w += step
        if np.max(np.abs(step)) < 1e-10:
            break
    return X @ w


def linear_probe_auprc(x: np.ndarray, y: np.ndarray) -> float:
    """AUPRC of a logistic probe; tied probe scores form one threshold."""
    return auprc(linear_probe_scores(x, y), y, ties="grouped")


def t_test(a: Sequence[float], b: Sequence[float], paired: bool = False) -> float:
    """Two-sided p-value of Welch's t-test (or the paired t-test)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each sample needs at least two values")
    if paired:
        if len(a) != len(b):
            raise ValueError("paired samples must have equal length")
        d = a - b
        if np.all(d == d[0]):
            warnings.warn("zero variance in paired differences", RuntimeWarning, stacklevel=2)
            return 1.0 if d[0] == 0 else 0.0
        return float(stats.ttest_rel(a, b).pvalue)
    if a.var() == 0 and b.var() == 0:
        warnings.warn("both samples have zero variance", RuntimeWarning, stacklevel=2)
        return 1.0 if a[0] == b[0] else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


# -------------------------------------------------------------- importance

def feature_importance(model, samples, task: str | None = None, batch_size: int = 64,
                       max_events: int | None = None, max_tokens: int | None = None,
                       ) -> list[tuple[str, float]]:
    """Rank main features by the summed L2 norm of dLoss/dm over their events.

    The loss is summed (not averaged) over each batch, so every sample's
    gradient is independent of how samples are grouped into batches.
    """
    import torch

    from .model import loss_fn
    from .seqbuild import iter_batches

    if model.cfg.structure != "hierarchical":
        raise ValueError("feature importance needs a hierarchical model (event embeddings)")
    task = task or model.cfg.task
    model.eval()
    totals: dict[str, float] = defaultdict(float)
    for b in iter_batches(samples, batch_size, task, max_events=max_events, max_tokens=max_tokens):
        m, emask = model.encode_events(b)
        logits = model.aggregate(m, emask)
        loss = loss_fn(logits, b.labels, task) * len(b.labels)
        (grad,) = torch.autograd.grad(loss, m)
        norms = grad.norm(dim=-1).detach().double().numpy()
        for i, names in enumerate(b.main):
            for j, name in enumerate(names):
                totals[name] += float(norms[i, j])
    return sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))


# --------------------------------------------------------------- term swap

def swap_terms(records, mapping: dict[str, str]):
    """Copies of ``records`` with every mapped substring replaced in feature values."""
    import copy

    out, hits = [], 0
    keys = sorted(mapping, key=len, reverse=True)
    for r in records:
        r2 = copy.deepcopy(r)
        for e in r2.events:
            for f in e.features:
                for k in keys:
                    if k and k in f.value:
                        f.value = f.value.replace(k, mapping[k])
                        hits += 1
                        break
        out.append(r2)
    return out, hits


def term_swap_eval(model, featurizer, records, mapping: dict[str, str], task: str | None = None,
                   source: str = "") -> tuple[float, float]:
    """AUPRC before and after rewriting feature values of the test stays."""
    from .seqbuild import task_labels
    from .train import predict

    if featurizer.embedding_mode != "text":
        raise ValueError("term swap is defined for text-mode models")
    task = task or model.cfg.task
    before = featurizer.encode_all(records, source)
    swapped, hits = swap_terms(records, mapping)
    if hits == 0:
        logger.warning("term mapping matched no feature values")
    after = featurizer.encode_all(swapped, source)
    y = task_labels(before, task)
    return (task_auprc(predict(model, before, task), y, task),
            task_auprc(predict(model, after, task), y, task))


def random_mapping(mapping: dict[str, str], seed: int = 0) -> dict[str, str]:
    """Replace each target term with a random lowercase string of the same length."""
    rng = np.random.default_rng(seed)
    letters = np.array(list("bcdfghjklmnpqrstvwxz"))
    out = {}
    for k in mapping:
        out[k] = " ".join("".join(rng.choice(letters, size=len(w))) for w in mapping[k].split())
    return out


# ------------------------------------------------------------------ records

@dataclass
class MetricRecord:
    dataset: str
    task: str
    mode: str
    config: str
    seed: int
    auprc: float

    def __post_init__(self):
        if not 0.0 <= self.auprc <= 1.0:
            raise ValueError(f"auprc {self.auprc} outside [0, 1]")


_FIELDS = [f.name for f in fields(MetricRecord)]


def format_metrics(records: Iterable[MetricRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_FIELDS)
    for r in records:
        w.writerow([r.dataset, r.task, r.mode, r.config, r.seed, f"{r.auprc:.6f}"])
    return buf.getvalue()


def parse_metrics(text: str) -> list[MetricRecord]:
    rows = csv.DictReader(io.StringIO(text))
    if rows.fieldnames != _FIELDS:
        raise ValueError(f"metrics header must be {_FIELDS}")
    return [MetricRecord(r["dataset"], r["task"], r["mode"], r["config"], int(r["seed"]),
                         float(r["auprc"])) for r in rows]


def read_metrics(path: str | Path) -> list[MetricRecord]:
    return parse_metrics(Path(path).read_text(encoding="utf-8"))


@dataclass
class ReportRow:
    dataset: str
    task: str
    mode: str
    config: str
    n: int
    mean: float
    stderr: float


def aggregate(records: Iterable[MetricRecord]) -> list[ReportRow]:
    """Mean and standard error over seeds per (dataset, task, mode, config)."""
    cells: dict[tuple, list[float]] = defaultdict(list)
    for r in records:
        cells[(r.dataset, r.task, r.mode, r.config)].append(r.auprc)
    rows = []
    for key in sorted(cells):
        v = np.asarray(cells[key])
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        rows.append(ReportRow(*key, len(v), float(v.mean()), se))
    return rows


def format_report(rows: Iterable[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "task", "mode", "config", "n", "mean", "stderr"])
    for r in rows:
        w.writerow([r.dataset, r.task, r.mode, r.config, r.n, f"{r.mean:.6f}", f"{r.stderr:.6f}"])
    return buf.getvalue()


def format_importance(table: Sequence[tuple[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "main_feature", "importance"])
    for i, (name, val) in enumerate(table, 1):
        w.writerow([i, name, f"{val:.8g}"])
    return buf.getvalue()


__all__ = ["auprc", "task_auprc", "t_test", "feature_importance", "swap_terms", "term_swap_eval",
           "random_mapping", "MetricRecord", "format_metrics", "parse_metrics", "read_metrics",
           "ReportRow", "aggregate", "format_report", "format_importance"]
