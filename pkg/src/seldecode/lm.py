"""Vocabulary, decoding state and the tabular n-gram models used as student and teacher."""

from __future__ import annotations

import functools
import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RESERVED_SENTINEL = -1e9
DEFAULT_RESERVED = 16
FEATURE_WINDOW = 3
MODEL_FORMAT_VERSION = 1


def bundled_corpus() -> bytes:
    """Raw bytes of the plain-text corpus shipped with the package."""
    return resources.files("seldecode.data").joinpath("corpus.txt").read_bytes()


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True)
class Vocab:
    """Text units mapped to ids ``0..n_text-1``, followed by ``reserved_count`` reserved ids.

    Reserved ids have no surface form and are never emitted as text.
    """

    text_tokens: tuple[str, ...]
    reserved_count: int = DEFAULT_RESERVED
    mode: str = "char"
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if self.mode not in ("char", "byte"):
            raise ValueError(f"unknown tokenization mode {self.mode!r}")
        if self.reserved_count < 0:
            raise ValueError("reserved_count must be nonnegative")
        index = {tok: i for i, tok in enumerate(self.text_tokens)}
        if len(index) != len(self.text_tokens):
            raise ValueError("duplicate surface strings in vocabulary")
        object.__setattr__(self, "_index", index)

    @property
    def n_text(self) -> int:
        return len(self.text_tokens)

    @property
    def size(self) -> int:
        return self.n_text + self.reserved_count

    @property
    def reserved_ids(self) -> range:
        return range(self.n_text, self.size)

    def is_text(self, token_id: int) -> bool:
        return 0 <= token_id < self.n_text

    def _units(self, data) -> Iterable[str]:
        if self.mode == "byte":
            if isinstance(data, str):
                data = data.encode("utf-8")
            return (chr(b) for b in data)
        if isinstance(data, (bytes, bytearray)):
            data = data.decode("utf-8")
        return iter(data)

    def encode(self, data) -> list[int]:
        try:
            return [self._index[u] for u in self._units(data)]
        except KeyError as exc:
            raise ValueError(f"unit {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        parts = []
        for i in ids:
            if not self.is_text(i):
                raise ValueError(f"token id {i} is not a text id")
            parts.append(self.text_tokens[i])
        if self.mode == "byte":
            return bytes(ord(c) for c in parts).decode("utf-8", errors="replace")
        return "".join(parts)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "reserved_count": self.reserved_count, "text_tokens": list(self.text_tokens)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tuple(d["text_tokens"]), int(d["reserved_count"]), d["mode"])

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_vocab(corpus, tokenization: str = "char", reserved_count: int = DEFAULT_RESERVED) -> Vocab:
    """Collect the distinct units of ``corpus`` (sorted) and append the reserved tail."""
    if not corpus:
        raise ValueError("empty corpus")
    if reserved_count < 0:
        raise ValueError("reserved_count must be nonnegative")
    if tokenization == "byte":
        data = corpus.encode("utf-8") if isinstance(corpus, str) else bytes(corpus)
        units = sorted({chr(b) for b in data})
    elif tokenization == "char":
        text = corpus.decode("utf-8") if isinstance(corpus, (bytes, bytearray)) else corpus
        units = sorted(set(text))
    else:
        raise ValueError(f"unknown tokenization mode {tokenization!r}")
    return Vocab(tuple(units), reserved_count, tokenization)


# ---------------------------------------------------------------------------
# state and logits


@dataclass(frozen=True)
class DecodingState:
    prompt: tuple[int, ...]
    generated: tuple[int, ...] = ()

    @property
    def t(self) -> int:
        return len(self.generated)

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.prompt + self.generated

    def append(self, token_id: int) -> "DecodingState":
        return DecodingState(self.prompt, self.generated + (int(token_id),))


@dataclass(frozen=True)
class LogitVector:
    values: np.ndarray
    n_text: int
    provenance: str = ""

    @property
    def text(self) -> np.ndarray:
        return self.values[: self.n_text]

    @property
    def reserved(self) -> np.ndarray:
        return self.values[self.n_text :]


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def masked_softmax(logits: LogitVector, temperature: float = 1.0) -> np.ndarray:
    """Next-token distribution over the text region; reserved entries are dropped."""
    return softmax(logits.text / temperature)


def greedy_from_logits(logits: LogitVector) -> int:
    # np.argmax returns the first maximum, i.e. the lowest id on ties
    return int(np.argmax(logits.text))


def features(tokens: Sequence[int], n_text: int, window: int = FEATURE_WINDOW) -> np.ndarray:
    """One-hot encoding of the last ``window`` tokens, most recent first, zero-padded."""
    phi = np.zeros(window * n_text)
    for j in range(min(window, len(tokens))):
        phi[j * n_text + tokens[-1 - j]] = 1.0
    return phi


def feature_indices(tokens: Sequence[int], n_text: int, window: int = FEATURE_WINDOW) -> np.ndarray:
    """Active coordinates of :func:`features`; ``-1`` marks a padded slot."""
    idx = np.full(window, -1, dtype=np.int64)
    for j in range(min(window, len(tokens))):
        idx[j] = j * n_text + tokens[-1 - j]
    return idx


# ---------------------------------------------------------------------------
# tabular n-gram model


@dataclass(frozen=True, eq=False)
class TabularLM:
    """Add-k smoothed n-gram model that backs off to the longest context seen in training.

    ``counts[L]`` maps a context tuple of length ``L`` to a vector of next-token counts.
    """

    vocab: Vocab
    order: int
    k: float
    counts: tuple[dict, ...]
    name: str = "tabular"
    readout: object = None

    def __post_init__(self):
        # per-instance row cache; models are immutable so this never goes stale
        object.__setattr__(self, "_row", functools.lru_cache(maxsize=None)(self._compute_row))

    def _compute_row(self, context: tuple) -> np.ndarray:
        for L in range(min(len(context), self.order - 1), -1, -1):
            ctx = context[len(context) - L :] if L else ()
            c = self.counts[L].get(ctx)
            if c is not None:
                # add-k over the longest seen context; the constant backoff weight of
                # shorter levels cancels under row normalisation
                row = (c + self.k) / (c.sum() + self.k * self.vocab.n_text)
                row.setflags(write=False)
                return row
        raise RuntimeError("unigram table missing")  # unreachable after training

    def next_probs(self, state) -> np.ndarray:
        tokens = state.tokens if isinstance(state, DecodingState) else tuple(state)
        for t in tokens[-(self.order - 1) :] if self.order > 1 else ():
            if not self.vocab.is_text(t):
                raise ValueError(f"unknown token id {t}")
        context = tuple(tokens[-(self.order - 1) :]) if self.order > 1 else ()
        return self._row(context)

    def next_logits(self, state) -> LogitVector:
        tokens = state.tokens if isinstance(state, DecodingState) else tuple(state)
        for t in tokens[-max(self.order - 1, FEATURE_WINDOW) :]:
            if not self.vocab.is_text(t):
                raise ValueError(f"unknown token id {t}")
        values = np.empty(self.vocab.size)
        values[: self.vocab.n_text] = np.log(self.next_probs(tokens))
        if self.readout is not None:
            values[self.vocab.n_text :] = self.readout.reserved_logits(features(tokens, self.vocab.n_text))
        else:
            values[self.vocab.n_text :] = RESERVED_SENTINEL
        return LogitVector(values, self.vocab.n_text, self.name)

    def with_readout(self, readout) -> "TabularLM":
        if readout is not None and readout.n_reserved != self.vocab.reserved_count:
            raise ValueError("readout size does not match the reserved region")
        return replace(self, readout=readout)

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        tables = []
        for table in self.counts:
            rows = []
            for ctx in sorted(table):
                c = table[ctx]
                nz = np.flatnonzero(c)
                rows.append([list(ctx), nz.tolist(), c[nz].tolist()])
            tables.append(rows)
        return {
            "format": "seldecode.tabular",
            "version": MODEL_FORMAT_VERSION,
            "name": self.name,
            "order": self.order,
            "k": self.k,
            "vocab": self.vocab.to_dict(),
            "counts": tables,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularLM":
        if d.get("format") != "seldecode.tabular" or d.get("version") != MODEL_FORMAT_VERSION:
            raise ValueError("unsupported model file")
        vocab = Vocab.from_dict(d["vocab"])
        counts = []
        for rows in d["counts"]:
            table = {}
            for ctx, ids, vals in rows:
                c = np.zeros(vocab.n_text, dtype=np.int64)
                c[ids] = vals
                table[tuple(ctx)] = c
            counts.append(table)
        return cls(vocab, int(d["order"]), float(d["k"]), tuple(counts), d.get("name", "tabular"))

    def save(self, path) -> None:
        Path(path).write_text(dumps_canonical(self.to_dict()))

    @classmethod
    def load(cls, path) -> "TabularLM":
        return cls.from_dict(json.loads(Path(path).read_text()))


def dumps_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def train_tabular(tokens: Sequence[int], vocab: Vocab, order: int, k: float = 0.5, name: str = "tabular") -> TabularLM:
    """Count every context of length ``0..order-1`` in ``tokens``."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if not k > 0:
        raise ValueError("smoothing constant k must be positive")
    toks = np.asarray(tokens, dtype=np.int64)
    if len(toks) < order:
        raise ValueError(f"corpus of {len(toks)} tokens is shorter than order {order}")
    V = vocab.n_text
    if toks.size and (toks.min() < 0 or toks.max() >= V):
        raise ValueError("corpus contains ids outside the text region")
    counts = []
    for L in range(order):
        # encode (context, next) as one base-V integer and count with unique
        n = len(toks) - L
        code = np.zeros(n, dtype=np.int64)
        for j in range(L + 1):
            code = code * V + toks[j : j + n]
        uniq, cnt = np.unique(code, return_counts=True)
        ctx_code, nxt = np.divmod(uniq, V)
        table: dict = {}
        for cc, tok, c in zip(ctx_code.tolist(), nxt.tolist(), cnt.tolist()):
            ctx = []
            for _ in range(L):
                cc, r = divmod(cc, V)
                ctx.append(r)
            key = tuple(reversed(ctx))
            row = table.get(key)
            if row is None:
                row = table[key] = np.zeros(V, dtype=np.int64)
            row[tok] = c
        counts.append(table)
    return TabularLM(vocab, order, float(k), tuple(counts), name)


def greedy_next(model: TabularLM, state: DecodingState) -> int:
    return greedy_from_logits(model.next_logits(state))


def rollout(
    model: TabularLM,
    prompt: Sequence[int],
    horizon: int,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> list[DecodingState]:
    """States visited by a student-only rollout; greedy when ``rng`` is None.

    Returns the ``horizon`` states *before* each emission.
    """
    state = DecodingState(tuple(int(t) for t in prompt))
    visited = []
    for _ in range(horizon):
        visited.append(state)
        if rng is None:
            tok = greedy_next(model, state)
        else:
            p = masked_softmax(model.next_logits(state), temperature)
            tok = int(rng.choice(len(p), p=p))
        state = state.append(tok)
    return visited


def corpus_prompts(tokens: Sequence[int], n: int, length: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """``n`` random windows of ``length`` tokens drawn from ``tokens``."""
    if len(tokens) <= length:
        raise ValueError("corpus too short for the requested prompt length")
    starts = rng.integers(0, len(tokens) - length, size=n)
    return [tuple(int(t) for t in tokens[s : s + length]) for s in starts]
