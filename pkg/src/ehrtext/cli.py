"""Command-line entry point for the staged pipeline.

Stages read one YAML run config (``--config PATH`` or the built-in name
``demo``) and pass artifacts forward through the output directory::

    synth -> ingest -> cohort -> vocab -> build -> train -> eval -> report

Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import dataclasses
import json
import logging
import os
import shutil
import struct
import sys
import tempfile
from pathlib import Path
from typing import Iterator, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .cohort import TASKS, PatientRecord, read_cohort, write_cohort
from .config import CohortOptions, load_dataset_config
from .evaluate import (
    MetricRecord,
    aggregate,
    feature_importance,
    format_importance,
    format_metrics,
    format_report,
    random_mapping,
    read_metrics,
    term_swap_eval,
)
from .experiments import DeskSettings
from .ingest import Feature, MedicalEvent, ingest_dataset
from .model import PRESETS, load_checkpoint, save_checkpoint
from .seqbuild import fit_featurizer, load_dataset, load_featurizer, save_dataset, save_featurizer
from .synth_ehr import SYNONYMS, HospitalSpec, export_truth, generate_hospital
from .train import ExperimentPlan, evaluate_samples, split_stratified, train_model

logger = logging.getLogger("ehrtext")

ENV_OUT = "UNIHPF_OUT"


class HospitalEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hospital_id: str
    code_prefix: str
    layout: str = "mimic"
    n_patients: int = 500
    signal_strength: float = 1.0
    seed: Optional[int] = None  # defaults to run seed + position


class RunConfig(BaseModel):
    """One document driving every stage."""

    model_config = ConfigDict(extra="forbid")

    out_dir: str = "out"
    seed: int = 0
    hospitals: list[HospitalEntry] = Field(default_factory=list)
    # dataset name -> dataset.yaml (or its directory); synthetic hospitals are added implicitly
    datasets: dict[str, str] = Field(default_factory=dict)
    cohort: CohortOptions = Field(default_factory=CohortOptions)
    preset: str = "unihpf"
    plan: ExperimentPlan
    settings: DeskSettings = Field(default_factory=DeskSettings)
    term_mapping: dict[str, str] = Field(default_factory=lambda: dict(SYNONYMS))

    @field_validator("preset")
    @classmethod
    def _known_preset(cls, v):
        if v.lower() not in PRESETS:
            raise ValueError(f"unknown preset {v!r}; choose from {sorted(PRESETS)}")
        return v.lower()

    @field_validator("datasets")
    @classmethod
    def _paths_exist(cls, v):
        for name, path in v.items():
            if not Path(path).exists():
                raise ValueError(f"dataset {name!r}: path {path} does not exist")
        return v

    @model_validator(mode="after")
    def _plan_names_known(self):
        known = set(self.datasets) | {h.hospital_id for h in self.hospitals}
        p = self.plan
        missing = [n for n in p.sources + ([p.target] if p.target else []) if n not in known]
        if missing:
            raise ValueError(f"plan refers to unknown datasets {missing}")
        return self


DEMO = {
    "out_dir": "demo_out",
    "seed": 0,
    "hospitals": [
        {"hospital_id": "A", "code_prefix": "A_", "layout": "mimic", "n_patients": 200},
        {"hospital_id": "B", "code_prefix": "B_", "layout": "eicu", "n_patients": 200},
    ],
    "preset": "unihpf",
    "plan": {"mode": "single", "sources": ["A"], "task": "mort", "seeds": [0]},
    "settings": {"max_epochs": 10, "patience": 10},
}


class ConfigError(Exception):
    pass


def load_run_config(ref: str) -> RunConfig:
    if ref == "demo":
        doc = json.loads(json.dumps(DEMO))
    else:
        path = Path(ref)
        if not path.exists():
            raise ConfigError(f"config file not found: {ref}")
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    return RunConfig.model_validate(doc)


# ------------------------------------------------------------------ output

@contextlib.contextmanager
def atomic_path(path: Path) -> Iterator[Path]:
    """Yield a temporary sibling path; rename it onto ``path`` on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def atomic_write(path: Path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


@contextlib.contextmanager
def atomic_dir(path: Path) -> Iterator[Path]:
    """Build a directory's files in a scratch dir, then move each into place."""
    path.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        yield scratch
        for f in sorted(scratch.iterdir()):
            os.replace(f, path / f.name)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)


# ----------------------------------------------------------- event stream

_MAGIC = b"EHRTEVT1"


def _put_str(buf: list[bytes], s: str) -> None:
    b = s.encode("utf-8")
    buf.append(struct.pack("<I", len(b)))
    buf.append(b)


def write_events(path: Path, events: list[MedicalEvent]) -> None:
    """Little-endian records: stay_id, event_type, timestamp, features, patient_id."""
    buf = [_MAGIC, struct.pack("<Q", len(events))]
    for e in events:
        _put_str(buf, e.stay_id)
        _put_str(buf, e.event_type)
        buf.append(struct.pack("<q", e.timestamp))
        buf.append(struct.pack("<I", len(e.features)))
        for f in e.features:
            _put_str(buf, f.name)
            _put_str(buf, f.value)
            _put_str(buf, f.kind)
        _put_str(buf, e.patient_id)
    with atomic_path(path) as tmp:
        tmp.write_bytes(b"".join(buf))


def read_events(path: Path) -> list[MedicalEvent]:
    data = memoryview(Path(path).read_bytes())
    if bytes(data[:8]) != _MAGIC:
        raise ValueError(f"{path}: not an event stream")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals[0]

    def text():
        nonlocal pos
        n = take("<I")
        s = bytes(data[pos:pos + n]).decode("utf-8")
        pos += n
        return s

    out = []
    for _ in range(take("<Q")):
        stay, etype, ts = text(), text(), take("<q")
        feats = [Feature(text(), text(), text()) for _ in range(take("<I"))]
        out.append(MedicalEvent(etype, feats, ts, text(), stay))
    return out


# ----------------------------------------------------------------- stages

def _json(obj) -> str:
    doc = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else obj
    return json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n"


class Context:
    def __init__(self, cfg: RunConfig, out: Path, seed_override: int | None):
        self.cfg = cfg
        self.out = out
        self.seeds = [seed_override] if seed_override is not None else list(cfg.plan.seeds)
        self.task = cfg.plan.task

    def dataset_names(self) -> list[str]:
        p = self.cfg.plan
        return list(dict.fromkeys(p.sources + ([p.target] if p.target else [])))

    def dataset_path(self, name: str) -> Path:
        if name in self.cfg.datasets:
            return Path(self.cfg.datasets[name])
        if any(h.hospital_id == name for h in self.cfg.hospitals):
            return self.out / name
        raise ConfigError(f"dataset {name!r} is neither configured nor synthetic")

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise ConfigError(f"missing {path}; run the '{stage}' stage first")
        return path

    def records(self, name: str) -> list[PatientRecord]:
        return read_cohort(self.require(self.out / name / "cohort.jsonl", "cohort"))

    def seed_dir(self, seed: int) -> Path:
        return self.out / "artifacts" / f"{self.cfg.preset}_{self.task}_seed{seed}"

    def run_name(self, seed: int) -> str:
        p = self.cfg.plan
        return f"{self.cfg.preset}_{self.task}_{p.mode}_seed{seed}"


def stage_synth(ctx: Context, seed_override: int | None) -> None:
    if not ctx.cfg.hospitals:
        raise ConfigError("no synthetic hospitals configured")
    base = ctx.cfg.seed if seed_override is None else seed_override
    prefixes = [h.code_prefix for h in ctx.cfg.hospitals]
    if len(set(prefixes)) != len(prefixes):
        raise ConfigError("synthetic hospitals must use distinct code prefixes")
    for i, h in enumerate(ctx.cfg.hospitals):
        seed = h.seed if h.seed is not None else base + i
        spec = HospitalSpec(h.hospital_id, h.code_prefix, h.layout, h.n_patients,
                            h.signal_strength, seed)
        with atomic_dir(ctx.out / h.hospital_id) as tmp:
            generate_hospital(spec, tmp)
            export_truth(spec, tmp)
        logger.info("synth: wrote %s", ctx.out / h.hospital_id)


def stage_ingest(ctx: Context) -> None:
    for name in ctx.dataset_names():
        ds = load_dataset_config(ctx.require(ctx.dataset_path(name), "synth"))
        events, stats = ingest_dataset(ds)
        write_events(ctx.out / name / "events.bin", events)
        atomic_write(ctx.out / name / "ingest_stats.json", _json(stats))
        logger.info("ingest %s: %d events", name, len(events))


def stage_cohort(ctx: Context) -> None:
    from .cohort import cohort_for_dataset

    for name in ctx.dataset_names():
        ds = load_dataset_config(ctx.dataset_path(name))
        events = read_events(ctx.require(ctx.out / name / "events.bin", "ingest"))
        records, stats = cohort_for_dataset(ds, events, ctx.cfg.cohort)
        with atomic_path(ctx.out / name / "cohort.jsonl") as tmp:
            write_cohort(tmp, records)
        atomic_write(ctx.out / name / "cohort_stats.json", _json(stats))
        logger.info("cohort %s: %d stays", name, len(records))


def _splits(ctx: Context, name: str, seed: int):
    recs = ctx.records(name)
    kind = TASKS[ctx.task][0]
    parts = split_stratified([r.labels.get(ctx.task) for r in recs], ctx.cfg.plan.split_ratio,
                             seed, kind)
    return [[recs[i] for i in p] for p in parts]


def _artifact_sources(ctx: Context) -> list[str]:
    p = ctx.cfg.plan
    mode = PRESETS[ctx.cfg.preset][0]
    names = list(p.sources)
    if mode == "text" and p.target:
        names.append(p.target)
    return names


def stage_vocab(ctx: Context) -> None:
    emb, feat, _ = PRESETS[ctx.cfg.preset]
    selection = {}
    if feat == "selected":
        for name in ctx.dataset_names():
            selection.update(load_dataset_config(ctx.dataset_path(name)).selection)
    s = ctx.cfg.settings
    for seed in ctx.seeds:
        train = [r for n in _artifact_sources(ctx) for r in _splits(ctx, n, seed)[0]]
        fz = fit_featurizer(train, emb, selection or None, s.vocab_size,
                            max_tokens=s.max_tokens, max_events=s.max_events)
        with atomic_dir(ctx.seed_dir(seed)) as tmp:
            save_featurizer(fz, tmp)
        logger.info("vocab seed %d: %d entries", seed, fz.vocab_size)


def stage_build(ctx: Context) -> None:
    for seed in ctx.seeds:
        d = ctx.require(ctx.seed_dir(seed), "vocab")
        fz = load_featurizer(d)
        for name in ctx.dataset_names():
            for part, recs in zip(("train", "valid", "test"), _splits(ctx, name, seed)):
                samples = fz.encode_all(recs, name)
                header = {"vocab_hash": fz.hash, "dataset": name, "split": part, "seed": seed,
                          "embedding_mode": fz.embedding_mode}
                with atomic_path(d / f"{name}_{part}.npz") as tmp:
                    save_dataset(tmp, samples, header)
        logger.info("build seed %d done", seed)


def _load_part(ctx, seed, name, part, vocab_hash):
    path = ctx.require(ctx.seed_dir(seed) / f"{name}_{part}.npz", "build")
    return load_dataset(path, vocab_hash)[1]


def stage_train(ctx: Context) -> None:
    p = ctx.cfg.plan
    s = ctx.cfg.settings
    kw = s.train_kwargs()
    for seed in ctx.seeds:
        fz = load_featurizer(ctx.require(ctx.seed_dir(seed), "vocab"))
        cfg = s.model_config_for(ctx.cfg.preset, fz.vocab_size, ctx.task)
        train = [x for n in p.sources for x in _load_part(ctx, seed, n, "train", fz.hash)]
        valid = [x for n in p.sources for x in _load_part(ctx, seed, n, "valid", fz.hash)]
        res = train_model(train, valid, cfg, seed, **kw)
        model, history = res.model, res.history
        run_dir = ctx.out / "runs" / ctx.run_name(seed)
        if p.mode == "fine_tune":
            tr = _load_part(ctx, seed, p.target, "train", fz.hash)
            va = _load_part(ctx, seed, p.target, "valid", fz.hash)
            with atomic_path(run_dir / "source.ckpt") as tmp:
                save_checkpoint(tmp, model, fz.hash, seed)
            model = train_model(tr, va, cfg, seed, init=copy.deepcopy(model.state_dict()),
                                **kw).model
        with atomic_path(run_dir / "model.ckpt") as tmp:
            save_checkpoint(tmp, model, fz.hash, seed, {"plan": p.model_dump(), "run": ctx.run_name(seed)})
        lines = ["epoch,train_loss,valid_auprc"] + [
            f"{h['epoch']},{h['train_loss']:.6f},{h['valid_auprc']:.6f}" for h in history]
        atomic_write(run_dir / "history.csv", "\n".join(lines) + "\n")
        manifest = {"plan": p.model_dump(), "preset": ctx.cfg.preset, "seed": seed,
                    "settings": s.model_dump(), "vocab_hash": fz.hash,
                    "config_hash": cfg.hash, "best_epoch": res.best_epoch}
        atomic_write(run_dir / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        logger.info("train seed %d: best epoch %d", seed, res.best_epoch)


def _checkpoint(ctx: Context, seed: int, allow_mismatch: bool = False):
    fz = load_featurizer(ctx.require(ctx.seed_dir(seed), "vocab"))
    path = ctx.require(ctx.out / "runs" / ctx.run_name(seed) / "model.ckpt", "train")
    model, _ = load_checkpoint(path, fz.hash, allow_mismatch)
    return fz, model


def stage_eval(ctx: Context, allow_mismatch: bool) -> None:
    p = ctx.cfg.plan
    records = []
    for seed in ctx.seeds:
        fz, model = _checkpoint(ctx, seed, allow_mismatch)
        targets = p.sources if p.mode in ("single", "pooled") else [p.target]
        for name in targets:
            test = _load_part(ctx, seed, name, "test", fz.hash)
            score = evaluate_samples(model, test, ctx.task)
            records.append(MetricRecord(name, ctx.task, p.mode, model.cfg.name, seed, score))
    atomic_write(ctx.out / "metrics.csv", format_metrics(records))
    logger.info("eval: %d metric records", len(records))


def stage_importance(ctx: Context) -> None:
    p = ctx.cfg.plan
    for seed in ctx.seeds:
        fz, model = _checkpoint(ctx, seed)
        name = p.target if p.mode in ("zero_shot", "fine_tune") else p.sources[0]
        test = _load_part(ctx, seed, name, "test", fz.hash)
        table = feature_importance(model, test, ctx.task)
        atomic_write(ctx.out / f"importance_{ctx.run_name(seed)}.csv", format_importance(table))


def stage_swap_eval(ctx: Context) -> None:
    p = ctx.cfg.plan
    lines = ["seed,mapping,auprc_before,auprc_after"]
    for seed in ctx.seeds:
        fz, model = _checkpoint(ctx, seed)
        name = p.target if p.mode in ("zero_shot", "fine_tune") else p.sources[0]
        test = _splits(ctx, name, seed)[2]
        for label, mapping in (("synonym", ctx.cfg.term_mapping),
                               ("random", random_mapping(ctx.cfg.term_mapping, seed))):
            before, after = term_swap_eval(model, fz, test, mapping, ctx.task, name)
            lines.append(f"{seed},{label},{before:.6f},{after:.6f}")
    atomic_write(ctx.out / f"swap_{ctx.cfg.preset}_{ctx.task}.csv", "\n".join(lines) + "\n")


def stage_report(ctx: Context, inputs: list[str]) -> None:
    paths = [Path(x) for x in inputs] or [ctx.require(ctx.out / "metrics.csv", "eval")]
    records = [r for path in paths for r in read_metrics(path)]
    atomic_write(ctx.out / "report.csv", format_report(aggregate(records)))
    logger.info("report: %d records aggregated", len(records))


# ------------------------------------------------------------------- main

COMMANDS = ["synth", "ingest", "cohort", "vocab", "build", "train", "eval", "importance",
            "swap-eval", "report"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrtext", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", default="demo", help="run config YAML, or 'demo'")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--task", choices=sorted(TASKS), default=None)
        sp.add_argument("--mode", default=None,
                        choices=["single", "pooled", "zero_shot", "fine_tune"])
        sp.add_argument("--out", default=None, help=f"output dir (else ${ENV_OUT}, else config)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            sp.add_argument("--allow-vocab-mismatch", action="store_true")
        if name == "report":
            sp.add_argument("inputs", nargs="*", help="metrics files (default: <out>/metrics.csv)")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    doc = cfg.model_dump()
    if args.task:
        doc["plan"]["task"] = args.task
    if args.mode:
        doc["plan"]["mode"] = args.mode
    if args.seed is not None:
        doc["seed"] = args.seed
    return RunConfig.model_validate(doc)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        out = Path(args.out or os.environ.get(ENV_OUT) or cfg.out_dir)
        seed_override = args.seed if args.command != "synth" else None
        ctx = Context(cfg, out, seed_override)
        cmd = args.command
        if cmd == "synth":
            stage_synth(ctx, args.seed)
        elif cmd == "ingest":
            stage_ingest(ctx)
        elif cmd == "cohort":
            stage_cohort(ctx)
        elif cmd == "vocab":
            stage_vocab(ctx)
        elif cmd == "build":
            stage_build(ctx)
        elif cmd == "train":
            stage_train(ctx)
        elif cmd == "eval":
            stage_eval(ctx, args.allow_vocab_mismatch)
        elif cmd == "importance":
            stage_importance(ctx)
        elif cmd == "swap-eval":
            stage_swap_eval(ctx)
        elif cmd == "report":
            stage_report(ctx, args.inputs)
    except ValidationError as exc:
        for err in exc.errors():
            loc = ".".join(str(x) for x in err["loc"]) or "<root>"
            print(f"config error: {loc}: {err['msg']}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
