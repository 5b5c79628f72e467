"""Per-event token sequences and padded batches for the four model layouts.

Text mode turns every event into sub-word ids (event type, then each feature
name followed by its value, then a time-interval token).  Code mode replaces
the sub-word tokenizer with one dense id per distinct string, numeric values
first being bucketed per source item.  Both produce the same ragged
structure, which is padded into hierarchical (N, S, W) batches or flattened.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cohort import TASKS, LabelSet, PatientRecord
from .ingest import NUMERIC, MedicalEvent
from .tokens import (
    N_TIME,
    PAD,
    SPECIALS,
    TIME_TOKENS,
    UNK,
    QuantileBuckets,
    TimeBuckets,
    Vocab,
    encode_numeric_dpe,
    parse_decimal,
    train_vocab,
)

logger = logging.getLogger(__name__)

TYPE_PAD, TYPE_EVENT, TYPE_NAME, TYPE_VALUE, TYPE_TIME = range(5)
N_TYPES = 5

MAX_TOKENS = 128
MAX_EVENTS = 256
FLAT_MAX = 8192


@dataclass
class TokenizedEvent:
    token_ids: list[int]
    type_ids: list[int]

    def __len__(self) -> int:
        return len(self.token_ids)


def record_intervals(record: PatientRecord) -> list[int]:
    """Gap to the next event for every event; the last one gets 0."""
    return list(record.intervals) + [0] if record.events else []


def _truncate_features(head, spans, tail, max_tokens):
    ids, types = [], []
    budget = max_tokens - len(tail)
    ids.extend(head[0][:budget])
    types.extend(head[1][:budget])
    for span_ids, span_types in spans:
        if len(ids) + len(span_ids) > budget:
            break
        ids.extend(span_ids)
        types.extend(span_types)
    ids.extend(tail)
    types.extend([TYPE_TIME] * len(tail))
    return TokenizedEvent(ids, types)


def build_event_sequence(
    event: MedicalEvent,
    vocab: Vocab,
    buckets: TimeBuckets | None = None,
    interval: float | None = None,
    max_tokens: int = MAX_TOKENS,
) -> TokenizedEvent:
    """Type tokens, then name/value tokens per feature, then one TIME token.

    Values that parse as decimals use digit-place tokens; other values are
    sub-word tokenized.  When the event is longer than ``max_tokens``,
    whole trailing features are dropped; the TIME token is always kept.
    """
    head_ids = vocab.tokenize(event.event_type)
    spans = []
    for f in event.features:
        name = vocab.tokenize(f.name)
        if f.value and parse_decimal(f.value) is not None:
            value = encode_numeric_dpe(f.value)
        else:
            value = vocab.tokenize(f.value)
        spans.append((name + value, [TYPE_NAME] * len(name) + [TYPE_VALUE] * len(value)))
    tail = [buckets.token(interval)] if buckets is not None and interval is not None else []
    return _truncate_features((head_ids, [TYPE_EVENT] * len(head_ids)), spans, tail, max_tokens)


def select_features(event: MedicalEvent, selection: dict[str, Sequence[str]]) -> MedicalEvent:
    """Keep only the listed feature names; event types without an entry pass through."""
    names = selection.get(event.event_type)
    if names is None:
        return event
    if not names:
        raise ValueError(f"empty feature selection for {event.event_type!r}")
    keep = set(names)
    return MedicalEvent(event.event_type, [f for f in event.features if f.name in keep],
                        event.timestamp, event.patient_id, event.stay_id)


def validate_selection(selection: dict[str, Sequence[str]],
                       schema: dict[str, Iterable[str]]) -> None:
    """``schema`` maps event type to its available feature names."""
    problems = []
    for event_type, names in selection.items():
        if not names:
            problems.append(f"{event_type}: empty selection")
            continue
        if event_type not in schema:
            problems.append(f"{event_type}: unknown event type")
            continue
        missing = sorted(set(names) - set(schema[event_type]))
        if missing:
            problems.append(f"{event_type}: unknown features {missing}")
    if problems:
        raise ValueError("invalid feature selection: " + "; ".join(problems))


# ---------------------------------------------------------------- code mode

CODE_RESERVED = SPECIALS + TIME_TOKENS


class CodeTable:
    """One id per distinct feature string, for the conventional embedding.

    Ids 0..24 mirror the text vocabulary's specials and TIME tokens so that
    the time-interval token has the same id in both modes.
    """

    def __init__(self, codes: list[str], numeric: dict[str, QuantileBuckets] | None = None):
        if codes[: len(CODE_RESERVED)] != CODE_RESERVED:
            raise ValueError("code table must start with the reserved codes")
        if len(set(codes)) != len(codes):
            raise ValueError("duplicate codes")
        self.codes = list(codes)
        self.index = {c: i for i, c in enumerate(self.codes)}
        self.numeric = dict(numeric or {})

    def __len__(self) -> int:
        return len(self.codes)

    def __eq__(self, other) -> bool:
        return (isinstance(other, CodeTable) and self.codes == other.codes
                and self.numeric == other.numeric)

    @property
    def learned(self) -> set[str]:
        return set(self.codes[len(CODE_RESERVED):])

    @property
    def hash(self) -> str:
        h = hashlib.sha256("\n".join(self.codes).encode("utf-8"))
        for key in sorted(self.numeric):
            h.update(key.encode("utf-8"))
            h.update(self.numeric[key].boundaries.tobytes())
        return h.hexdigest()

    @staticmethod
    def _group(event: MedicalEvent, name: str) -> str:
        return f"{event.event_type}|{event.main_feature}|{name}"

    def event_strings(self, event: MedicalEvent) -> list[str]:
        out = [event.event_type]
        for f in event.features:
            out.append(f"{event.event_type}|{f.name}")
            if not f.value:
                continue
            group = self._group(event, f.name)
            if f.kind == NUMERIC and group in self.numeric and parse_decimal(f.value):
                k = self.numeric[group].bucket(float(f.value))
                out.append(f"{group}|Q{k}")
            else:
                out.append(f"{event.event_type}|{f.name}={f.value}")
        return out

    @classmethod
    def fit(cls, events: Iterable[MedicalEvent]) -> "CodeTable":
        events = list(events)
        values: dict[str, list[float]] = {}
        for ev in events:
            for f in ev.features:
                if f.kind == NUMERIC and f.value and parse_decimal(f.value):
                    values.setdefault(cls._group(ev, f.name), []).append(float(f.value))
        numeric = {g: QuantileBuckets.fit(v) for g, v in values.items()}
        table = cls(CODE_RESERVED, numeric)
        seen = set()
        for ev in events:
            seen.update(table.event_strings(ev))
        return cls(CODE_RESERVED + sorted(seen), numeric)

    def encode_event(
        self,
        event: MedicalEvent,
        buckets: TimeBuckets | None = None,
        interval: float | None = None,
        max_tokens: int = MAX_TOKENS,
    ) -> TokenizedEvent:
        strings = self.event_strings(event)
        ids = [self.index.get(s, UNK) for s in strings]
        head = ([ids[0]], [TYPE_EVENT])
        spans, i = [], 1
        for f in event.features:
            n = 2 if f.value else 1
            spans.append((ids[i:i + n], [TYPE_NAME, TYPE_VALUE][:n]))
            i += n
        tail = [buckets.token(interval)] if buckets is not None and interval is not None else []
        return _truncate_features(head, spans, tail, max_tokens)

    def save(self, path: str | Path) -> None:
        doc = {
            "codes": self.codes,
            "numeric": {k: b.boundaries.tolist() for k, b in sorted(self.numeric.items())},
        }
        Path(path).write_text(json.dumps(doc, indent=0), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CodeTable":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["codes"], {k: QuantileBuckets(v) for k, v in doc["numeric"].items()})

    @classmethod
    def union(cls, tables: Sequence["CodeTable"]) -> "CodeTable":
        codes, numeric = set(), {}
        for t in tables:
            codes |= t.learned
            numeric.update(t.numeric)
        return cls(CODE_RESERVED + sorted(codes), numeric)


# ----------------------------------------------------------------- samples

@dataclass
class EncodedSample:
    """Ragged token ids of one stay: events are consecutive slices of ``ids``."""

    ids: np.ndarray
    types: np.ndarray
    lengths: np.ndarray
    labels: LabelSet
    main: list[str]
    stay_id: str = ""
    source: str = ""

    @property
    def n_events(self) -> int:
        return len(self.lengths)

    def events(self) -> list[np.ndarray]:
        return np.split(self.ids, np.cumsum(self.lengths)[:-1]) if len(self.lengths) else []

    def event_types(self) -> list[np.ndarray]:
        return np.split(self.types, np.cumsum(self.lengths)[:-1]) if len(self.lengths) else []


def make_sample(events: list[TokenizedEvent], labels: LabelSet, main: list[str],
                stay_id: str = "", source: str = "") -> EncodedSample:
    ids = np.fromiter((t for e in events for t in e.token_ids), dtype=np.int32)
    types = np.fromiter((t for e in events for t in e.type_ids), dtype=np.int8)
    lengths = np.array([len(e) for e in events], dtype=np.int32)
    return EncodedSample(ids, types, lengths, labels, main, stay_id, source)


@dataclass
class Featurizer:
    """Fitted artifacts needed to encode stays in one of the two embedding modes."""

    embedding_mode: str  # text | code
    buckets: TimeBuckets
    vocab: Vocab | None = None
    codes: CodeTable | None = None
    selection: dict[str, list[str]] | None = None
    max_tokens: int = MAX_TOKENS
    max_events: int = MAX_EVENTS

    def __post_init__(self):
        if self.embedding_mode == "text" and self.vocab is None:
            raise ValueError("text mode needs a vocab")
        if self.embedding_mode == "code" and self.codes is None:
            raise ValueError("code mode needs a code table")
        if self.embedding_mode not in ("text", "code"):
            raise ValueError(f"unknown embedding mode {self.embedding_mode!r}")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) if self.embedding_mode == "text" else len(self.codes)

    @property
    def hash(self) -> str:
        return self.vocab.hash if self.embedding_mode == "text" else self.codes.hash

    def prepare(self, event: MedicalEvent) -> MedicalEvent:
        return select_features(event, self.selection) if self.selection else event

    def encode_event(self, event: MedicalEvent, interval: float | None) -> TokenizedEvent:
        event = self.prepare(event)
        if self.embedding_mode == "text":
            return build_event_sequence(event, self.vocab, self.buckets, interval, self.max_tokens)
        return self.codes.encode_event(event, self.buckets, interval, self.max_tokens)

    def encode(self, record: PatientRecord, source: str = "") -> EncodedSample:
        # truncation keeps the earliest events
        events = record.events[: self.max_events]
        intervals = record_intervals(record)[: self.max_events]
        toks = [self.encode_event(e, t) for e, t in zip(events, intervals)]
        return make_sample(toks, record.labels, [e.main_feature for e in events],
                           record.stay_id, source)

    def encode_all(self, records: Iterable[PatientRecord], source: str = "") -> list[EncodedSample]:
        return [self.encode(r, source) for r in records]


def save_featurizer(fz: Featurizer, directory: str | Path) -> None:
    """vocab.txt or codes.json, buckets.txt and a small featurizer.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if fz.embedding_mode == "text":
        fz.vocab.save(d / "vocab.txt")
    else:
        fz.codes.save(d / "codes.json")
    fz.buckets.save(d / "buckets.txt")
    meta = {"embedding_mode": fz.embedding_mode, "selection": fz.selection,
            "max_tokens": fz.max_tokens, "max_events": fz.max_events, "hash": fz.hash}
    (d / "featurizer.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")


def load_featurizer(directory: str | Path) -> Featurizer:
    d = Path(directory)
    meta = json.loads((d / "featurizer.json").read_text(encoding="utf-8"))
    text = meta["embedding_mode"] == "text"
    fz = Featurizer(
        meta["embedding_mode"], TimeBuckets.load(d / "buckets.txt"),
        vocab=Vocab.load(d / "vocab.txt") if text else None,
        codes=None if text else CodeTable.load(d / "codes.json"),
        selection=meta["selection"], max_tokens=meta["max_tokens"],
        max_events=meta["max_events"],
    )
    if fz.hash != meta["hash"]:
        raise ValueError(f"{d}: vocab/code table does not match featurizer.json")
    return fz


def text_corpus(records: Iterable[PatientRecord]) -> list[str]:
    """Strings the sub-word vocabulary is learned from; decimal values are excluded."""
    out = []
    for r in records:
        for e in r.events:
            out.append(e.event_type)
            for f in e.features:
                out.append(f.name)
                if f.value and parse_decimal(f.value) is None:
                    out.append(f.value)
    return out


def fit_featurizer(
    train_records: Sequence[PatientRecord],
    embedding_mode: str,
    selection: dict[str, list[str]] | None = None,
    vocab_size: int = 600,
    vocab: Vocab | None = None,
    codes: CodeTable | None = None,
    max_tokens: int = MAX_TOKENS,
    max_events: int = MAX_EVENTS,
) -> Featurizer:
    """Fit time buckets and the vocab or code table on training stays only."""
    intervals = [t for r in train_records for t in r.intervals]
    buckets = TimeBuckets.fit(intervals)
    if embedding_mode == "text" and vocab is None:
        vocab = train_vocab(text_corpus(train_records), vocab_size)
    if embedding_mode == "code" and codes is None:
        sel = selection or {}
        codes = CodeTable.fit(select_features(e, sel) if sel else e
                              for r in train_records for e in r.events[:max_events])
    return Featurizer(embedding_mode, buckets, vocab, codes, selection, max_tokens, max_events)


# ----------------------------------------------------------------- batches

@dataclass
class HierBatch:
    """Padded (N, S, W) ids; the last non-pad token of every event is its TIME token."""

    token_ids: np.ndarray
    type_ids: np.ndarray
    event_mask: np.ndarray  # (N, S) True for real events
    token_mask: np.ndarray  # (N, S, W) True for real tokens
    labels: np.ndarray | None = None
    main: list[list[str]] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.token_ids.shape


CodeBatch = HierBatch


@dataclass
class FlatBatch:
    token_ids: np.ndarray  # (N, L)
    type_ids: np.ndarray
    token_mask: np.ndarray
    offsets: np.ndarray  # (N, S + 1) event start positions, padded with the row length
    labels: np.ndarray | None = None
    main: list[list[str]] = field(default_factory=list)


def task_labels(samples: Sequence[EncodedSample], task: str) -> np.ndarray:
    kind, _ = TASKS[task]
    vals = [s.labels.get(task) for s in samples]
    if kind == "multiclass":
        return np.asarray(vals, dtype=np.int64)
    return np.asarray(vals, dtype=np.float32)


def collate(
    samples: Sequence[EncodedSample],
    task: str | None = None,
    max_events: int | None = None,
    max_tokens: int | None = None,
) -> HierBatch:
    n = len(samples)
    evs = [s.events() for s in samples]
    tys = [s.event_types() for s in samples]
    if max_events is not None:
        evs = [e[:max_events] for e in evs]
        tys = [t[:max_events] for t in tys]
    S = max((len(e) for e in evs), default=0) or 1
    W = max((len(x) for e in evs for x in e), default=0) or 1
    if max_tokens is not None:
        W = min(W, max_tokens)
    ids = np.zeros((n, S, W), dtype=np.int64)
    types = np.zeros((n, S, W), dtype=np.int64)
    for i, (e, t) in enumerate(zip(evs, tys)):
        for j, (x, y) in enumerate(zip(e, t)):
            if len(x) > W:  # keep the TIME token at the end
                x = np.concatenate([x[: W - 1], x[-1:]])
                y = np.concatenate([y[: W - 1], y[-1:]])
            ids[i, j, : len(x)] = x
            types[i, j, : len(y)] = y
    token_mask = ids != PAD
    labels = task_labels(samples, task) if task else None
    main = [s.main[: len(e)] for s, e in zip(samples, evs)]
    return HierBatch(ids, types, token_mask.any(-1), token_mask, labels, main)


build_code_batch = collate


def flatten(batch: HierBatch, max_len: int = FLAT_MAX) -> FlatBatch:
    """Concatenate the non-pad tokens of each row's events, in order.

    Rows longer than ``max_len`` lose whole trailing events; an event that
    alone exceeds the cap is cut token-wise.
    """
    n, S, _ = batch.token_ids.shape
    rows, trows, offs = [], [], []
    for i in range(n):
        parts, tparts, starts, total = [], [], [0], 0
        for j in range(S):
            m = batch.token_mask[i, j]
            x, y = batch.token_ids[i, j][m], batch.type_ids[i, j][m]
            if len(x) == 0:
                continue
            if total + len(x) > max_len:
                if total == 0:
                    x, y = x[:max_len], y[:max_len]
                else:
                    break
            parts.append(x)
            tparts.append(y)
            total += len(x)
            starts.append(total)
        rows.append(np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64))
        trows.append(np.concatenate(tparts) if tparts else np.zeros(0, dtype=np.int64))
        offs.append(starts)
    L = max((len(r) for r in rows), default=0) or 1
    E = max(len(o) for o in offs) if offs else 1
    ids = np.zeros((n, L), dtype=np.int64)
    types = np.zeros((n, L), dtype=np.int64)
    offsets = np.zeros((n, E), dtype=np.int64)
    for i, (r, t, o) in enumerate(zip(rows, trows, offs)):
        ids[i, : len(r)] = r
        types[i, : len(t)] = t
        offsets[i, : len(o)] = o
        offsets[i, len(o):] = len(r)
    return FlatBatch(ids, types, ids != PAD, offsets, batch.labels, batch.main)


def unflatten(flat: FlatBatch) -> list[list[np.ndarray]]:
    """Split each flat row back into its events using the boundary offsets."""
    out = []
    for i in range(flat.token_ids.shape[0]):
        o = flat.offsets[i]
        out.append([flat.token_ids[i, a:b] for a, b in zip(o[:-1], o[1:]) if b > a])
    return out


def iter_batches(samples: Sequence[EncodedSample], batch_size: int, task: str | None = None,
                 order: np.ndarray | None = None, **kw) -> Iterable[HierBatch]:
    idx = np.arange(len(samples)) if order is None else order
    for start in range(0, len(idx), batch_size):
        yield collate([samples[k] for k in idx[start:start + batch_size]], task, **kw)


# ------------------------------------------------------------ dataset file

DATASET_FORMAT = "ehrtext-dataset-1"


def save_dataset(path: str | Path, samples: Sequence[EncodedSample], header: dict) -> None:
    """Write samples as ragged id arrays plus a JSON header.

    ``header`` must carry ``vocab_hash``; dims and caps are added here.
    """
    if "vocab_hash" not in header:
        raise ValueError("dataset header needs a vocab_hash")
    head = dict(header, format=DATASET_FORMAT, n_samples=len(samples),
                max_events=max((s.n_events for s in samples), default=0),
                max_tokens=int(max((s.lengths.max() for s in samples if s.n_events), default=0)))
    meta = [
        {"stay_id": s.stay_id, "source": s.source, "main": s.main, "labels": s.labels.__dict__}
        for s in samples
    ]
    arrays = {
        "ids": np.concatenate([s.ids for s in samples]) if samples else np.zeros(0, np.int32),
        "types": np.concatenate([s.types for s in samples]) if samples else np.zeros(0, np.int8),
        "lengths": (np.concatenate([s.lengths for s in samples]) if samples
                    else np.zeros(0, np.int32)),
        "n_events": np.array([s.n_events for s in samples], dtype=np.int32),
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(head, sort_keys=True)),
                 meta=np.array(json.dumps(meta)), **arrays)


def load_dataset(path: str | Path, vocab_hash: str | None = None) -> tuple[dict, list[EncodedSample]]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a dataset file")
        if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
            raise ValueError(f"{path}: built with a different vocab (hash mismatch)")
        meta = json.loads(str(z["meta"]))
        ids, types, lengths, n_events = z["ids"], z["types"], z["lengths"], z["n_events"]
    samples, tok, ev = [], 0, 0
    for m, k in zip(meta, n_events):
        lens = lengths[ev:ev + k]
        total = int(lens.sum())
        samples.append(EncodedSample(ids[tok:tok + total].copy(), types[tok:tok + total].copy(),
                                     lens.copy(), LabelSet(**m["labels"]), m["main"],
                                     m["stay_id"], m["source"]))
        tok += total
        ev += k
    return header, samples


__all__ = [
    "N_TIME", "TYPE_PAD", "TYPE_EVENT", "TYPE_NAME", "TYPE_VALUE", "TYPE_TIME", "N_TYPES",
    "TokenizedEvent", "build_event_sequence", "select_features", "validate_selection",
    "CodeTable", "EncodedSample", "Featurizer", "fit_featurizer", "text_corpus",
    "HierBatch", "CodeBatch", "FlatBatch", "collate", "build_code_batch", "flatten",
    "unflatten", "iter_batches", "task_labels", "save_dataset", "load_dataset",
]
