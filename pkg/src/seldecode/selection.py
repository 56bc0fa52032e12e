"""Candidate proposal and scoring at triggered steps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lm import DecodingState, LogitVector, feature_indices, features, masked_softmax, softmax


@dataclass(frozen=True)
class CandidateSet:
    tokens: tuple[int, ...]
    student_logprobs: tuple[float, ...]
    strategy: str = "topk"
    step: int = 0

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("empty candidate set")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("candidate tokens must be distinct")
        if len(self.student_logprobs) != len(self.tokens):
            raise ValueError("logprobs misaligned with tokens")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class ScoreVector:
    scores: np.ndarray
    source: str


def topk_order(p: np.ndarray) -> np.ndarray:
    """Indices sorted by descending probability, ties by ascending id."""
    return np.lexsort((np.arange(len(p)), -np.asarray(p)))


def propose_candidates(
    logits: LogitVector,
    K: int,
    strategy: str = "topk",
    rng: np.random.Generator | None = None,
    step: int = 0,
) -> CandidateSet:
    p = masked_softmax(logits)
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > len(p):
        raise ValueError("K exceeds vocabulary")
    if strategy == "topk":
        toks = topk_order(p)[:K]
    elif strategy == "multinomial":
        if rng is None:
            raise ValueError("multinomial proposals need an rng")
        # without replacement so the K candidates are distinct
        toks = rng.choice(len(p), size=K, replace=False, p=p)
    else:
        raise ValueError(f"unknown proposal strategy {strategy!r}")
    logp = np.log(p[toks])
    return CandidateSet(tuple(int(t) for t in toks), tuple(float(x) for x in logp), strategy, step)


# ---------------------------------------------------------------------------
# reserved-token readout


def bin_values(n_reserved: int) -> np.ndarray:
    """Equally spaced bins on [0, 1]."""
    if n_reserved < 2:
        return np.zeros(n_reserved) if n_reserved == 0 else np.ones(1)
    return np.linspace(0.0, 1.0, n_reserved)


@dataclass
class ReadoutHead:
    """Linear map from state features to reserved-token logits, read out as ``v . softmax(z)``."""

    bins: np.ndarray
    weight: np.ndarray  # (n_features, n_reserved)
    bias: np.ndarray  # (n_reserved,)

    def __post_init__(self):
        if self.weight.shape[1] != len(self.bins) or self.bias.shape != (len(self.bins),):
            raise ValueError("readout shapes disagree with bin count")
        if len(self.bins) > 1 and not np.all(np.diff(self.bins) > 0):
            raise ValueError("bin values must be strictly increasing")

    @classmethod
    def zeros(cls, n_text: int, n_reserved: int = 16, window: int = 3) -> "ReadoutHead":
        return cls(bin_values(n_reserved), np.zeros((window * n_text, n_reserved)), np.zeros(n_reserved))

    @property
    def n_reserved(self) -> int:
        return len(self.bins)

    @property
    def n_text(self) -> int:
        return self.weight.shape[0] // 3

    def reserved_logits(self, phi: np.ndarray) -> np.ndarray:
        return np.asarray(phi) @ self.weight + self.bias

    def reserved_logits_idx(self, idx: np.ndarray) -> np.ndarray:
        """Same as :meth:`reserved_logits` for one-hot features given by active indices.

        ``idx`` has shape (..., window) with -1 for padding.
        """
        idx = np.asarray(idx)
        rows = np.where(idx[..., None] >= 0, self.weight[np.maximum(idx, 0)], 0.0)
        return rows.sum(axis=-2) + self.bias

    def score_logits(self, z: np.ndarray) -> np.ndarray:
        return softmax(z) @ self.bins

    def copy(self) -> "ReadoutHead":
        return ReadoutHead(self.bins.copy(), self.weight.copy(), self.bias.copy())

    def to_dict(self) -> dict:
        return {
            "format": "seldecode.readout",
            "shape": list(self.weight.shape),
            "bins": self.bins.tolist(),
            "weight": self.weight.ravel().tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReadoutHead":
        if d.get("format") != "seldecode.readout":
            raise ValueError("not a readout file")
        w = np.array(d["weight"], dtype=np.float64).reshape(d["shape"])
        return cls(np.array(d["bins"], dtype=np.float64), w, np.array(d["bias"], dtype=np.float64))


# ---------------------------------------------------------------------------
# scoring


def teacher_scores(teacher, state: DecodingState, candidates: CandidateSet) -> ScoreVector:
    p = np.asarray(teacher.next_probs(state))
    toks = np.asarray(candidates.tokens)
    if toks.max() >= len(p) or toks.min() < 0:
        raise ValueError("candidate ids fall outside the teacher vocabulary")
    return ScoreVector(p[toks].copy(), "teacher_prob")


def augmented_indices(state: DecodingState, candidates: CandidateSet, n_text: int) -> np.ndarray:
    """Feature indices of every augmented state (prefix + candidate), shape (K, window)."""
    base = state.tokens
    return np.stack([feature_indices(base + (c,), n_text) for c in candidates.tokens])


def local_scores(model, state: DecodingState, candidates: CandidateSet, readout: ReadoutHead | None = None) -> ScoreVector:
    readout = readout if readout is not None else getattr(model, "readout", None)
    if readout is None:
        raise ValueError("no readout attached to the student")
    n_text = model.vocab.n_text
    # all K augmented states in one batched evaluation
    Z = readout.reserved_logits_idx(augmented_indices(state, candidates, n_text))
    return ScoreVector(readout.score_logits(Z), "local_readout")


def local_scores_dense(model, state: DecodingState, candidates: CandidateSet, readout: ReadoutHead) -> ScoreVector:
    """Reference path through explicit one-hot feature vectors (used in tests)."""
    Phi = np.stack([features(state.tokens + (c,), model.vocab.n_text) for c in candidates.tokens])
    return ScoreVector(readout.score_logits(readout.reserved_logits(Phi)), "local_readout")


def select(candidates: CandidateSet | Sequence[int], scores) -> int:
    """Highest-scoring candidate; ties go to the lowest token id."""
    toks = candidates.tokens if isinstance(candidates, CandidateSet) else tuple(candidates)
    s = np.asarray(scores.scores if isinstance(scores, ScoreVector) else scores, dtype=np.float64)
    if len(toks) == 0:
        raise ValueError("empty candidate set")
    if len(s) != len(toks):
        raise ValueError("scores misaligned with candidates")
    best = s.max()
    return int(min(t for t, x in zip(toks, s) if x == best))
