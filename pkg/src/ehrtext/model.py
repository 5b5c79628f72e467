"""Event encoder f, event aggregator g, flat encoder h and task heads."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from torch import nn
from torch.nn import functional as F

from .cohort import TASKS
from .seqbuild import N_TYPES, FlatBatch, HierBatch, flatten

PRESETS = {
    "unihpf": ("text", "entire", "hierarchical"),
    "descemb": ("text", "selected", "hierarchical"),
    "rajkomar": ("code", "entire", "hierarchical"),
    "sand": ("code", "selected", "flattened"),
}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    embedding_mode: Literal["text", "code"] = "text"
    feature_mode: Literal["entire", "selected"] = "entire"
    structure: Literal["hierarchical", "flattened"] = "hierarchical"
    vocab_size: int = 0
    d_model: int = 128
    n_heads: int = 4
    ffn_dim: Optional[int] = None  # defaults to 4 * d_model
    layers_f: int = 2
    layers_g: int = 2
    layers_h: int = 4
    dropout: float = 0.3
    pooling: Literal["mean", "cls"] = "mean"
    task: str = "mort"

    @classmethod
    def preset(cls, name: str, **kw) -> "ModelConfig":
        try:
            emb, feat, struct_ = PRESETS[name.lower().rstrip("*")]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(embedding_mode=emb, feature_mode=feat, structure=struct_, **kw)

    @property
    def name(self) -> str:
        key = (self.embedding_mode, self.feature_mode, self.structure)
        for name, triple in PRESETS.items():
            if triple == key:
                return name
        return "-".join(key)

    @property
    def ffn(self) -> int:
        return self.ffn_dim or 4 * self.d_model

    @property
    def n_outputs(self) -> int:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        return TASKS[self.task][1]

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()


def sinusoidal(n: int, d: int, device=None, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(n, device=device, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, device=device, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n, d, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        if d % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.h = n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, L, d = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.h, d // self.h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.h)
        scores = scores.masked_fill(~mask[:, None, None, :], torch.finfo(x.dtype).min)
        attn = torch.softmax(scores, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(B, L, d)
        return self.out(y)


class Block(nn.Module):
    """Pre-norm transformer block with a GELU feed-forward.

    Dropout acts on the residual branches and inside the feed-forward, not
    on attention weights.
    """

    def __init__(self, d: int, n_heads: int, ffn: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.ln2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, ffn), nn.GELU(), nn.Dropout(dropout), nn.Linear(ffn, d))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = x + self.drop(self.attn(self.ln1(x), mask))
        return x + self.drop(self.ff(self.ln2(x)))


class Encoder(nn.Module):
    """Stack of blocks followed by a final norm and pooling over real positions."""

    def __init__(self, cfg: ModelConfig, n_layers: int):
        super().__init__()
        d = cfg.d_model
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads, cfg.ffn, cfg.dropout)
                                    for _ in range(n_layers))
        self.norm = nn.LayerNorm(d)
        self.pooling = cfg.pooling
        self.cls = nn.Parameter(torch.zeros(d)) if cfg.pooling == "cls" else None

    def forward(self, x: torch.Tensor, mask: torch.Tensor, pool: bool = True) -> torch.Tensor:
        if self.cls is not None:
            x = torch.cat([self.cls.expand(x.shape[0], 1, -1), x], dim=1)
            mask = torch.cat([mask.new_ones(mask.shape[0], 1), mask], dim=1)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x)
        if not pool:
            return x[:, 1:] if self.cls is not None else x
        if self.cls is not None:
            return x[:, 0]
        m = mask.unsqueeze(-1).to(x.dtype)
        return (x * m).sum(1) / m.sum(1).clamp(min=1.0)


class InputEmbedding(nn.Module):
    """Token (or code) embedding, plus type embedding in text mode, plus sinusoidal position."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.vocab_size <= 0:
            raise ValueError("vocab_size must be set before building a model")
        self.tokens = nn.Embedding(cfg.vocab_size, cfg.d_model, padding_idx=0)
        self.types = (nn.Embedding(N_TYPES, cfg.d_model, padding_idx=0)
                      if cfg.embedding_mode == "text" else None)
        self.drop = nn.Dropout(cfg.dropout)
        self.d = cfg.d_model

    def forward(self, ids: torch.Tensor, types: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.tokens.num_embeddings):
            raise IndexError("token id outside the embedding table")
        x = self.tokens(ids)
        if self.types is not None:
            x = x + self.types(types)
        x = x + sinusoidal(ids.shape[-1], self.d, ids.device, x.dtype)
        x = x * mask.unsqueeze(-1).to(x.dtype)
        return self.drop(x)


class PredictiveModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = InputEmbedding(cfg)
        if cfg.structure == "hierarchical":
            self.f = Encoder(cfg, cfg.layers_f)
            self.g = Encoder(cfg, cfg.layers_g)
        else:
            self.h = Encoder(cfg, cfg.layers_h)
        self.head = nn.Linear(cfg.d_model, cfg.n_outputs)

    @property
    def device(self):
        return self.head.weight.device

    def _t(self, a):
        return torch.as_tensor(a, device=self.device)

    def encode_events(self, batch: HierBatch) -> tuple[torch.Tensor, torch.Tensor]:
        """Event embeddings m of shape (N, S, d) and the event mask."""
        if self.cfg.structure != "hierarchical":
            raise ValueError("event embeddings exist only for hierarchical models")
        ids, types = self._t(batch.token_ids), self._t(batch.type_ids)
        tmask, emask = self._t(batch.token_mask), self._t(batch.event_mask)
        N, S, W = ids.shape
        real = emask.reshape(-1)
        x = self.embed(ids.reshape(N * S, W)[real], types.reshape(N * S, W)[real],
                       tmask.reshape(N * S, W)[real])
        pooled = self.f(x, tmask.reshape(N * S, W)[real])
        m = pooled.new_zeros(N * S, pooled.shape[-1])
        m = m.index_copy(0, real.nonzero().squeeze(1), pooled)
        return m.view(N, S, -1), emask

    def aggregate(self, m: torch.Tensor, emask: torch.Tensor) -> torch.Tensor:
        x = m + sinusoidal(m.shape[1], m.shape[2], m.device, m.dtype)
        x = x * emask.unsqueeze(-1).to(x.dtype)
        return self.head(self.g(x, emask))

    def forward(self, batch) -> torch.Tensor:
        if self.cfg.structure == "hierarchical":
            if not isinstance(batch, HierBatch):
                raise TypeError("hierarchical model expects a HierBatch")
            return self.aggregate(*self.encode_events(batch))
        if isinstance(batch, HierBatch):
            batch = flatten(batch)
        return self.forward_flat(batch)

    def forward_flat(self, batch: FlatBatch, pool: bool = True) -> torch.Tensor:
        ids, types, mask = self._t(batch.token_ids), self._t(batch.type_ids), self._t(batch.token_mask)
        x = self.h(self.embed(ids, types, mask), mask, pool=pool)
        return self.head(x) if pool else x


def build_model(cfg: ModelConfig, seed: int | None = None) -> PredictiveModel:
    if seed is not None:
        torch.manual_seed(seed)
    return PredictiveModel(cfg)


def param_count(model_or_cfg) -> tuple[int, int]:
    """(total, non-embedding) trainable scalar counts."""
    model = model_or_cfg if isinstance(model_or_cfg, nn.Module) else PredictiveModel(model_or_cfg)
    total = sum(p.numel() for p in model.parameters() if p.requires_grad)
    emb = sum(p.numel() for mod in model.modules() if isinstance(mod, nn.Embedding)
              for p in mod.parameters() if p.requires_grad)
    return total, total - emb


def loss_fn(logits: torch.Tensor, labels, task: str) -> torch.Tensor:
    kind, _ = TASKS[task]
    labels = torch.as_tensor(labels, device=logits.device)
    if torch.isnan(logits).any():
        raise ValueError("NaN in logits")
    if kind == "multiclass":
        return F.cross_entropy(logits, labels.long())
    if kind == "binary":
        logits = logits.reshape(-1)
    return F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype))


def scores_from_logits(logits: torch.Tensor, task: str) -> np.ndarray:
    kind, _ = TASKS[task]
    with torch.no_grad():
        if kind == "multiclass":
            return torch.softmax(logits, -1).double().cpu().numpy()
        p = torch.sigmoid(logits).double().cpu().numpy()
    return p.reshape(-1) if kind == "binary" else p


# ------------------------------------------------------------- checkpoints

_MAGIC = b"EHRTCKPT"


def save_checkpoint(path: str | Path, model: PredictiveModel, vocab_hash: str, seed: int,
                    extra: dict | None = None) -> None:
    state = model.state_dict()
    names = list(state)
    header = {
        "config": model.cfg.model_dump(),
        "config_hash": model.cfg.hash,
        "vocab_hash": vocab_hash,
        "seed": seed,
        "params": [[n, list(state[n].shape)] for n in names],
        "extra": extra or {},
    }
    flat = np.concatenate([state[n].detach().cpu().double().numpy().ravel() for n in names])
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.astype("<f4").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def load_checkpoint(path: str | Path, vocab_hash: str | None = None,
                    allow_vocab_mismatch: bool = False) -> tuple[PredictiveModel, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n))
        flat = np.frombuffer(fh.read(), dtype="<f4")
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash and not allow_vocab_mismatch:
        raise ValueError(f"{path}: vocab hash mismatch (pass allow_vocab_mismatch to override)")
    model = PredictiveModel(ModelConfig(**header["config"]))
    state, pos = {}, 0
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        state[name] = torch.from_numpy(flat[pos:pos + size].reshape(shape).copy())
        pos += size
    if pos != flat.size:
        raise ValueError(f"{path}: parameter payload size mismatch")
    model.load_state_dict(state)
    return model.eval(), header
