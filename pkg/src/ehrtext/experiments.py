"""Experiment protocols over prepared hospitals: single-domain, pooled and transfer runs.

Fitted artifacts (vocab or code table, time buckets) only ever see training
splits.  In text mode with more than one participating hospital they are
fitted on the union of those hospitals' training splits, so sub-word ids are
shared; in code mode each run fits its own code table on its training data,
which is what makes cross-hospital codes unknown.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from pydantic import BaseModel, ConfigDict

from .cohort import CohortStats, PatientRecord, cohort_for_dataset
from .config import CohortOptions, DatasetConfig, load_dataset_config
from .evaluate import MetricRecord
from .ingest import IngestStats, ingest_dataset
from .model import ModelConfig, PredictiveModel
from .seqbuild import EncodedSample, Featurizer, fit_featurizer
from .synth_ehr import HospitalSpec, TRUTH_FILE, export_truth, generate_hospital, read_truth
from .train import ExperimentPlan, evaluate_samples, run_transfer, split_stratified, train_model

logger = logging.getLogger(__name__)


class DeskSettings(BaseModel):
    """Sizes and optimiser settings for a run; defaults are the desk-scale ones."""

    model_config = ConfigDict(extra="forbid")

    d_model: int = 32
    n_heads: int = 4
    dropout: float = 0.3
    max_tokens: int = 32
    max_events: int = 64
    vocab_size: int = 600
    lr: float = 1e-3
    patience: int = 10
    max_epochs: int = 30
    batch_size: int = 32

    def model_config_for(self, preset: str, vocab_size: int, task: str) -> ModelConfig:
        return ModelConfig.preset(preset, vocab_size=vocab_size, d_model=self.d_model,
                                  n_heads=self.n_heads, dropout=self.dropout, task=task)

    def train_kwargs(self) -> dict:
        return {"lr": self.lr, "patience": self.patience, "max_epochs": self.max_epochs,
                "batch_size": self.batch_size}


@dataclass
class Hospital:
    name: str
    records: list[PatientRecord]
    selection: dict[str, list[str]] = field(default_factory=dict)
    truth: dict | None = None
    cohort_stats: CohortStats | None = None
    ingest_stats: IngestStats | None = None


def load_hospital(source: str | Path | DatasetConfig, options: CohortOptions | None = None,
                  ) -> Hospital:
    cfg = source if isinstance(source, DatasetConfig) else load_dataset_config(source)
    events, istats = ingest_dataset(cfg)
    records, cstats = cohort_for_dataset(cfg, events, options)
    truth_path = Path(cfg.base_dir) / TRUTH_FILE
    truth = read_truth(truth_path) if truth_path.exists() else None
    return Hospital(cfg.name, records, cfg.selection, truth, cstats, istats)


def synth_hospital(spec: HospitalSpec, out_dir: str | Path) -> Hospital:
    out = Path(out_dir)
    generate_hospital(spec, out)
    export_truth(spec, out)
    return load_hospital(out)


Splits = tuple[list[PatientRecord], list[PatientRecord], list[PatientRecord]]


def split_hospital(h: Hospital, task: str, seed: int, ratio=(0.8, 0.1, 0.1)) -> Splits:
    from .cohort import TASKS

    kind = TASKS[task][0]
    labels = [r.labels.get(task) for r in h.records]
    parts = split_stratified(labels, ratio, seed, kind)
    return tuple([h.records[i] for i in p] for p in parts)


@dataclass
class SeedRun:
    seed: int
    featurizer: Featurizer
    model: PredictiveModel
    samples: dict[str, tuple[list[EncodedSample], ...]]
    metrics: list[MetricRecord]
    history: list[dict] = field(default_factory=list)


def _mode_of(preset: str) -> tuple[str, bool]:
    cfg = ModelConfig.preset(preset, vocab_size=1)
    return cfg.embedding_mode, cfg.feature_mode == "selected"


def run_seed(
    plan: ExperimentPlan,
    hospitals: dict[str, Hospital],
    preset: str,
    seed: int,
    settings: DeskSettings | None = None,
    artifact_sources: Sequence[str] | None = None,
    source_model: PredictiveModel | None = None,
    featurizer: Featurizer | None = None,
) -> SeedRun:
    """Run one seed of ``plan``.

    ``artifact_sources`` names the hospitals whose training splits fit the
    vocab/buckets; by default the plan's sources, plus the target for
    text-mode transfer.  Passing ``source_model`` and ``featurizer`` skips
    source training in the transfer modes.
    """
    settings = settings or DeskSettings()
    mode, selected = _mode_of(preset)
    task = plan.task
    names = list(dict.fromkeys(plan.sources + ([plan.target] if plan.target else [])))
    splits = {n: split_hospital(hospitals[n], task, seed, plan.split_ratio) for n in names}

    if artifact_sources is None:
        artifact_sources = list(plan.sources)
        if mode == "text" and plan.target:
            artifact_sources.append(plan.target)
    selection: dict[str, list[str]] = {}
    if selected:
        for n in names:
            selection.update(hospitals[n].selection)
    if featurizer is None:
        for n in artifact_sources:
            if n not in splits:
                splits[n] = split_hospital(hospitals[n], task, seed, plan.split_ratio)
        fit_on = [r for n in artifact_sources for r in splits[n][0]]
        featurizer = fit_featurizer(fit_on, mode, selection or None, settings.vocab_size,
                                    max_tokens=settings.max_tokens,
                                    max_events=settings.max_events)
    samples = {n: tuple(featurizer.encode_all(p, n) for p in splits[n]) for n in names}
    cfg = settings.model_config_for(preset, featurizer.vocab_size, task)
    kw = settings.train_kwargs()
    metrics: list[MetricRecord] = []
    history: list[dict] = []

    def record(dataset, mode_name, model):
        score = evaluate_samples(model, samples[dataset][2], task)
        metrics.append(MetricRecord(dataset, task, mode_name, cfg.name, seed, score))

    if plan.mode in ("single", "pooled", "zero_shot", "fine_tune") and source_model is None:
        train = [s for n in plan.sources for s in samples[n][0]]
        valid = [s for n in plan.sources for s in samples[n][1]]
        res = train_model(train, valid, cfg, seed, **kw)
        source_model, history = res.model, res.history
        if plan.mode in ("single", "pooled"):
            for n in plan.sources:
                record(n, plan.mode, source_model)
    if plan.mode in ("zero_shot", "fine_tune"):
        tr, va, te = samples[plan.target]
        out = run_transfer(source_model, tr, va, te, plan.mode, seed, **kw)
        metrics.append(MetricRecord(plan.target, task, plan.mode, cfg.name, seed, out["auprc"]))
    if plan.mode == "pretrain":
        raise ValueError("use train.pretrain for pretraining plans")
    return SeedRun(seed, featurizer, source_model, samples, metrics, history)


def run_plan(plan: ExperimentPlan, hospitals: dict[str, Hospital], preset: str,
             settings: DeskSettings | None = None) -> list[SeedRun]:
    return [run_seed(plan, hospitals, preset, s, settings) for s in plan.seeds]
