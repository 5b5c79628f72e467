"""Sub-word vocabulary, digit-place numeric encoding and time-interval buckets."""

from __future__ import annotations

import hashlib
import logging
import re
from collections import Counter
from decimal import Decimal
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
PAD, UNK, CLS, SEP, MASK = range(5)

N_TIME = 20
TIME_0 = len(SPECIALS)
TIME_TOKENS = [f"[TIME_{k}]" for k in range(N_TIME)]

MIN_PLACE, MAX_PLACE = -4, 6
PLACES = list(range(MIN_PLACE, MAX_PLACE + 1))
DPE_0 = TIME_0 + N_TIME
DPE_TOKENS = [f"[DPE_{d}_{p}]" for p in PLACES for d in range(10)]
NEG = DPE_0 + len(DPE_TOKENS)
RESERVED = SPECIALS + TIME_TOKENS + DPE_TOKENS + ["[NEG]"]
N_RESERVED = len(RESERVED)

MAX_INT_DIGITS = MAX_PLACE + 1
MAX_FRAC_DIGITS = -MIN_PLACE

_NUM_RE = re.compile(r"^([+-]?)(\d*)(?:\.(\d*))?$")


def dpe_id(digit: int, place: int) -> int:
    if not (0 <= digit <= 9 and MIN_PLACE <= place <= MAX_PLACE):
        raise ValueError(f"no DPE token for digit {digit} at place {place}")
    return DPE_0 + (place - MIN_PLACE) * 10 + digit


def time_id(k: int) -> int:
    return TIME_0 + k


def is_time_id(i: int) -> bool:
    return TIME_0 <= i < TIME_0 + N_TIME


class Vocab:
    """Ordered token list; a token's line number in the vocab file is its id."""

    def __init__(self, tokens: list[str]):
        if tokens[:N_RESERVED] != RESERVED:
            raise ValueError("vocab must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocab")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        # sub-word matching never sees the reserved block
        self._pieces = {t: i for i, t in enumerate(self.tokens) if i >= N_RESERVED}
        self._cache: dict[str, list[int]] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    @classmethod
    def from_wordpiece_file(cls, path: str | Path) -> "Vocab":
        """Import an external one-token-per-line vocab (e.g. a BERT vocab.txt)."""
        extra = []
        seen = set(RESERVED)
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            tok = line.strip()
            if tok and tok not in seen and not (tok.startswith("[") and tok.endswith("]")):
                seen.add(tok)
                extra.append(tok)
        return cls(RESERVED + extra)

    def tokenize(self, text: str) -> list[int]:
        cached = self._cache.get(text)
        if cached is None:
            cached = tokenize_text(text, self)
            self._cache[text] = cached
        return list(cached)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


def _split_word(word: str) -> tuple[str, ...]:
    return (word[0],) + tuple("##" + c for c in word[1:])


def _join(a: str, b: str) -> str:
    return a + (b[2:] if b.startswith("##") else b)


def train_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Learn sub-word pieces by greedy pair merging.

    Continuation pieces carry a ``##`` prefix.  The most frequent adjacent
    pair is merged first; ties go to the lexicographically smallest pair.
    """
    words = Counter(w for line in corpus for w in line.lower().split())
    if not words:
        raise ValueError("cannot train a vocab on an empty corpus")
    segs = {w: _split_word(w) for w in sorted(words)}
    alphabet = sorted({s for seg in segs.values() for s in seg})
    if target_size < N_RESERVED + len(alphabet):
        raise ValueError(
            f"target_size {target_size} too small: need at least "
            f"{N_RESERVED} reserved + {len(alphabet)} alphabet tokens"
        )
    tokens = RESERVED + alphabet
    known = set(tokens)
    while len(tokens) < target_size:
        pairs: Counter = Counter()
        for w, seg in segs.items():
            for a, b in zip(seg, seg[1:]):
                pairs[(a, b)] += words[w]
        if not pairs:
            break
        (a, b), _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        merged = _join(a, b)
        for w, seg in segs.items():
            if len(seg) < 2:
                continue
            out, i = [], 0
            while i < len(seg):
                if i + 1 < len(seg) and seg[i] == a and seg[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seg[i])
                    i += 1
            segs[w] = tuple(out)
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    return Vocab(tokens)


def tokenize_text(text: str, vocab: Vocab) -> list[int]:
    """Lowercase, split on whitespace, then greedy longest-match per word."""
    out = []
    pieces = vocab._pieces
    for word in text.lower().split():
        ids, start = [], 0
        while start < len(word):
            end = len(word)
            found = None
            while end > start:
                piece = word[start:end] if start == 0 else "##" + word[start:end]
                found = pieces.get(piece)
                if found is not None:
                    break
                end -= 1
            if found is None:
                ids = [UNK]
                break
            ids.append(found)
            start = end
        out.extend(ids)
    return out


def parse_decimal(s: str) -> tuple[bool, str, str] | None:
    m = _NUM_RE.match(s.strip())
    if not m or not (m.group(2) or m.group(3)):
        return None
    return m.group(1) == "-", m.group(2) or "", m.group(3) or ""


def encode_numeric_dpe(s: str, vocab: Vocab | None = None) -> list[int]:
    """One token per digit whose identity carries the digit's decimal place.

    ``"120.5"`` becomes DPE(1,2) DPE(2,1) DPE(0,0) DPE(5,-1).  Strings that
    do not parse as decimals fall back to ``vocab.tokenize``.
    """
    parsed = parse_decimal(s)
    if parsed is None:
        if vocab is None:
            raise ValueError(f"not a decimal: {s!r}")
        return vocab.tokenize(s)
    negative, int_part, frac_part = parsed
    int_part = int_part.lstrip("0") or "0"
    if len(int_part) > MAX_INT_DIGITS:
        logger.warning("clamping %r to %d integer digits", s, MAX_INT_DIGITS)
        int_part = "9" * MAX_INT_DIGITS
        frac_part = "9" * MAX_FRAC_DIGITS
    if len(frac_part) > MAX_FRAC_DIGITS:
        logger.warning("truncating %r to %d fractional digits", s, MAX_FRAC_DIGITS)
        frac_part = frac_part[:MAX_FRAC_DIGITS]
    ids = [NEG] if negative else []
    n = len(int_part)
    ids += [dpe_id(int(c), n - 1 - i) for i, c in enumerate(int_part)]
    ids += [dpe_id(int(c), -1 - i) for i, c in enumerate(frac_part)]
    return ids


def decode_dpe(ids: Iterable[int]) -> Decimal:
    total = Decimal(0)
    sign = 1
    for i in ids:
        if i == NEG:
            sign = -1
            continue
        k = i - DPE_0
        if not 0 <= k < len(DPE_TOKENS):
            raise ValueError(f"id {i} is not a DPE token")
        place, digit = divmod(k, 10)
        total += digit * Decimal(10) ** (place + MIN_PLACE)
    return sign * total


class QuantileBuckets:
    """Equal-frequency (quantile) buckets; values outside the fit clamp to the ends."""

    def __init__(self, boundaries: Iterable[float]):
        b = np.asarray(list(boundaries), dtype=float)
        if b.shape != (N_TIME - 1,) or np.any(np.diff(b) < 0):
            raise ValueError(f"need {N_TIME - 1} ascending boundaries")
        self.boundaries = b

    @classmethod
    def fit(cls, values: Iterable[float]):
        arr = np.asarray(list(values), dtype=float)
        if arr.size == 0:
            raise ValueError("cannot fit buckets on an empty set")
        qs = np.arange(1, N_TIME) / N_TIME
        return cls(np.quantile(arr, qs))

    def bucket(self, x: float) -> int:
        """Bucket index k in [0, 19]."""
        return int(np.searchsorted(self.boundaries, x, side="left"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{x!r}\n" for x in self.boundaries.tolist()),
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path):
        return cls(float(x) for x in Path(path).read_text(encoding="utf-8").split())

    def __eq__(self, other) -> bool:
        return type(other) is type(self) and np.array_equal(self.boundaries, other.boundaries)


class TimeBuckets(QuantileBuckets):
    """Buckets over inter-event intervals in minutes, mapped to TIME tokens."""

    def token(self, t: float) -> int:
        return time_id(self.bucket(t))
