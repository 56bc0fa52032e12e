"""Teacher-annotated preference data and training of the reserved-token selector."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .lm import DecodingState, TabularLM, feature_indices, masked_softmax
from .selection import CandidateSet, ReadoutHead, propose_candidates, select
from .trigger import (
    TriggerConfig,
    calibrate_threshold,
    kl_divergence,
    rollout_stream,
    split_indices,
    trigger_decision,
)


@dataclass(frozen=True)
class PreferenceRecord:
    prefix: tuple[int, ...]
    candidates: tuple[int, ...]
    student_logprobs: tuple[float, ...]
    teacher_probs: tuple[float, ...]
    target: int
    kl: float
    teacher_margin: float

    def to_json(self) -> dict:
        return {
            "prefix": list(self.prefix),
            "candidates": list(self.candidates),
            "student_logprobs": list(self.student_logprobs),
            "teacher_probs": list(self.teacher_probs),
            "target": self.target,
            "kl": self.kl,
            "teacher_margin": self.teacher_margin,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PreferenceRecord":
        return cls(
            tuple(d["prefix"]),
            tuple(d["candidates"]),
            tuple(d["student_logprobs"]),
            tuple(d["teacher_probs"]),
            int(d["target"]),
            float(d["kl"]),
            float(d["teacher_margin"]),
        )


def target_index(candidates: Sequence[int], teacher_probs: Sequence[float]) -> int:
    """Position of the teacher's favourite candidate; ties go to the lowest token id."""
    chosen = select(tuple(candidates), np.asarray(teacher_probs))
    return list(candidates).index(chosen)


def teacher_margin(teacher_probs: Sequence[float]) -> float:
    top = np.sort(np.asarray(teacher_probs))[::-1]
    return float(top[0] - top[1]) if len(top) > 1 else float(top[0])


def make_record(state: DecodingState, cands: CandidateSet, p_teacher: np.ndarray, kl: float) -> PreferenceRecord:
    tp = tuple(float(p_teacher[c]) for c in cands.tokens)
    return PreferenceRecord(
        prefix=state.tokens,
        candidates=cands.tokens,
        student_logprobs=cands.student_logprobs,
        teacher_probs=tp,
        target=target_index(cands.tokens, tp),
        kl=float(kl),
        teacher_margin=teacher_margin(tp),
    )


def collect_preferences(
    student: TabularLM,
    teacher: TabularLM,
    prompts: Sequence[Sequence[int]],
    trigger: TriggerConfig,
    K: int = 16,
    horizon: int = 50,
    strategy: str = "topk",
    seed: int | None = 0,
) -> list[PreferenceRecord]:
    """Roll the student out and annotate the candidate set at every triggered step.

    An uncalibrated ``oracle_kl`` trigger is calibrated on the collection stream itself, so
    the records are the top ``trigger.tau`` fraction of steps by KL.
    """
    if not 1 <= K <= student.vocab.n_text:
        raise ValueError("K must lie in [1, |V_text|]")
    states = rollout_stream(student, prompts, horizon, seed=seed)
    qs = [masked_softmax(student.next_logits(s)) for s in states]
    ps = [np.asarray(teacher.next_probs(s)) for s in states]
    kls = [kl_divergence(p, q) for p, q in zip(ps, qs)]
    if trigger.mode == "oracle_kl" and trigger.calibrated_kl_threshold is None:
        trigger = TriggerConfig("oracle_kl", trigger.tau, trigger.learned_threshold, calibrate_threshold(kls, trigger.tau))
    rng = np.random.default_rng(None if seed is None else seed + 1)
    records = []
    for s, p, kl in zip(states, ps, kls):
        if not trigger_decision(trigger, kl_value=kl, rng=rng):
            continue
        cands = propose_candidates(student.next_logits(s), K, strategy, rng, step=s.t)
        records.append(make_record(s, cands, p, kl))
    if not records:
        raise ValueError("empty dataset")
    return records


def filter_by_margin(records: Sequence[PreferenceRecord], delta: float) -> list[PreferenceRecord]:
    """Keep records whose teacher top1 - top2 gap strictly exceeds ``delta``."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    kept = [r for r in records if r.teacher_margin > delta]
    if not kept:
        raise ValueError("empty dataset after filtering")
    return kept


def save_preferences(path, records: Sequence[PreferenceRecord], header: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) + "\n")


def load_preferences(path) -> tuple[dict, list[PreferenceRecord]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError("empty preference file")
    header = json.loads(lines[0])
    return header, [PreferenceRecord.from_json(json.loads(x)) for x in lines[1:]]


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossConfig:
    temperature: float = 0.2
    beta: float = 10.0
    margin_enabled: bool = True
    sigma_source: str = "per_record"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.sigma_source != "per_record":
            raise ValueError("only per_record sigma is supported")


@dataclass
class LossBreakdown:
    l_sel: float
    l_margin: float
    l_reg: float
    total: float
    m_eff: float
    sigma_t: float


def _check(scores, target):
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise ValueError("need at least two candidate scores")
    if not 0 <= target < len(s):
        raise ValueError("target index out of range")
    return s


def selection_loss(scores, target: int, temperature: float) -> float:
    """Softmax cross-entropy of the target candidate at ``temperature``."""
    s = _check(scores, target)
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = s / temperature
    m = z.max()
    return float(m + math.log(np.exp(z - m).sum()) - z[target])


def hard_negative(s: np.ndarray, target: int) -> int:
    masked = np.where(np.arange(len(s)) == target, -np.inf, s)
    return int(np.argmax(masked))


def margin_loss(scores, target: int, temperature: float) -> tuple[float, float, float]:
    """Hinge on the gap to the hard negative with margin ``std(scores) / temperature``.

    Returns ``(loss, m_eff, sigma)``.
    """
    s = _check(scores, target)
    # exact zero for constant scores; np.std leaves rounding residue there
    sigma = 0.0 if np.all(s == s[0]) else float(np.std(s))
    m_eff = sigma / temperature
    gap = s[target] - s[hard_negative(s, target)]
    return max(0.0, m_eff - gap), m_eff, sigma


def kl_regularizer(base_dist, tuned_dist) -> float:
    return kl_divergence(base_dist, tuned_dist)


def total_loss(scores, target: int, config: LossConfig = LossConfig(), base_dist=None, tuned_dist=None) -> LossBreakdown:
    l_sel = selection_loss(scores, target, config.temperature)
    l_m, m_eff, sigma = margin_loss(scores, target, config.temperature)
    if not config.margin_enabled:
        l_m = 0.0
    l_reg = 0.0 if base_dist is None else kl_regularizer(base_dist, tuned_dist)
    return LossBreakdown(l_sel, l_m, l_reg, l_sel + l_m + config.beta * l_reg, m_eff, sigma)


def _onehot(S: np.ndarray, targets) -> np.ndarray:
    out = np.zeros_like(S)
    out[np.arange(len(S)), targets] = 1.0
    return out


def selection_loss_grad(S: np.ndarray, targets, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Batched selection loss over rows of ``S`` (B, K) and its gradient w.r.t. ``S``."""
    S = np.asarray(S, dtype=np.float64)
    rows = np.arange(len(S))
    z = S / temperature
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    Z = e.sum(axis=1, keepdims=True)
    losses = zmax[:, 0] + np.log(Z[:, 0]) - z[rows, targets]
    return losses, (e / Z - _onehot(S, targets)) / temperature


def margin_loss_grad(S: np.ndarray, targets, temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Batched margin hinge and its (sub)gradient w.r.t. ``S``; sigma is differentiated too."""
    S = np.asarray(S, dtype=np.float64)
    B, K = S.shape
    rows = np.arange(B)
    onehot = _onehot(S, targets)
    neg = np.argmax(np.where(onehot > 0, -np.inf, S), axis=1)
    sigma = np.where(np.all(S == S[:, :1], axis=1), 0.0, S.std(axis=1))
    losses = np.maximum(0.0, sigma / temperature - (S[rows, targets] - S[rows, neg]))
    centered = S - S.mean(axis=1, keepdims=True)
    safe = np.where(sigma > 0, sigma, 1.0)[:, None]
    dsigma = np.where(sigma[:, None] > 0, centered / (K * safe), 0.0)
    d = dsigma / temperature - onehot
    d[rows, neg] += 1.0
    return losses, (losses > 0)[:, None] * d


def loss_grad_scores(S: np.ndarray, targets, config: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-record selection + margin loss and its gradient w.r.t. the scores (regularizer excluded)."""
    losses, dS = selection_loss_grad(S, targets, config.temperature)
    if config.margin_enabled:
        lm, dm = margin_loss_grad(S, targets, config.temperature)
        losses, dS = losses + lm, dS + dm
    return losses, dS


def kl_reg_grad_logits(base_dist, tuned_logits) -> np.ndarray:
    """Gradient of KL(base || softmax(tuned_logits)) w.r.t. the tuned logits."""
    z = np.asarray(tuned_logits, dtype=np.float64)
    q = np.exp(z - z.max())
    q /= q.sum()
    return q - np.asarray(base_dist, dtype=np.float64)


# ---------------------------------------------------------------------------
# readout training


def readout_forward(readout: ReadoutHead, idx: np.ndarray):
    """Scores for feature-index tensor ``idx`` of shape (B, K, window); returns (scores, softmax)."""
    Z = readout.reserved_logits_idx(idx)
    Z = Z - Z.max(axis=-1, keepdims=True)
    Q = np.exp(Z)
    Q /= Q.sum(axis=-1, keepdims=True)
    return Q @ readout.bins, Q


def readout_loss_and_grad(readout: ReadoutHead, idx: np.ndarray, targets: np.ndarray, config: LossConfig):
    """Mean training loss over a batch and its gradients w.r.t. (weight, bias)."""
    S, Q = readout_forward(readout, idx)
    losses, dS = loss_grad_scores(S, targets, config)
    B = len(targets)
    dS = dS / B
    # d score / d z = q * (v - score)
    dZ = dS[..., None] * Q * (readout.bins - S[..., None])
    gb = dZ.sum(axis=(0, 1))
    gw = np.zeros_like(readout.weight)
    flat_idx = idx.reshape(-1, idx.shape[-1])
    flat_dz = dZ.reshape(-1, dZ.shape[-1])
    for j in range(flat_idx.shape[1]):
        col = flat_idx[:, j]
        ok = col >= 0
        np.add.at(gw, col[ok], flat_dz[ok])
    return float(losses.mean()), gw, gb


def record_indices(records: Sequence[PreferenceRecord], n_text: int) -> np.ndarray:
    return np.stack(
        [np.stack([feature_indices(r.prefix + (c,), n_text) for c in r.candidates]) for r in records]
    )


def agreement(readout: ReadoutHead, records: Sequence[PreferenceRecord], idx: np.ndarray | None = None) -> float:
    """Fraction of records where the readout's pick is the teacher's target."""
    if not records:
        return float("nan")
    if idx is None:
        idx = record_indices(records, readout.n_text)
    S, _ = readout_forward(readout, idx)
    hits = 0
    for r, s in zip(records, S):
        hits += r.candidates.index(select(r.candidates, s)) == r.target
    return hits / len(records)


@dataclass
class SelectorTrainReport:
    K: int
    epoch_loss: list = field(default_factory=list)
    val_agree: list = field(default_factory=list)
    init_val_agree: float = float("nan")
    init_loss: float = float("nan")
    best_epoch: int = 0
    best_val_agree: float = float("nan")
    n_train: int = 0
    n_val: int = 0

    @property
    def random_rate(self) -> float:
        return 1.0 / self.K


def train_selector(
    records: Sequence[PreferenceRecord],
    readout: ReadoutHead,
    lr: float = 2.0,
    epochs: int = 60,
    batch_size: int = 64,
    seed: int = 0,
    loss: LossConfig = LossConfig(),
    train_frac: float = 0.9,
    split_seed: int = 42,
) -> tuple[ReadoutHead, SelectorTrainReport]:
    """Fit the readout by mini-batch gradient descent; returns the best-by-validation checkpoint."""
    if not records:
        raise ValueError("no preference records")
    K = len(records[0].candidates)
    if any(len(r.candidates) != K for r in records):
        raise ValueError("records must share one candidate-set size")
    if K < 2:
        raise ValueError("degenerate dataset: single-candidate records")
    n_text = readout.n_text
    idx = record_indices(records, n_text)
    targets = np.array([r.target for r in records])
    tr, va = split_indices(len(records), train_frac, split_seed)
    val_records = [records[i] for i in va]

    head = readout.copy()
    report = SelectorTrainReport(K, n_train=len(tr), n_val=len(va))

    def train_loss(h):
        S, _ = readout_forward(h, idx[tr])
        return float(loss_grad_scores(S, targets[tr], loss)[0].mean())

    report.init_loss = train_loss(head)
    report.init_val_agree = agreement(head, val_records, idx[va]) if len(va) else float("nan")
    best, best_agree = head.copy(), report.init_val_agree
    rng = np.random.default_rng(seed)
    for epoch in range(1, epochs + 1):
        order = tr[rng.permutation(len(tr))]
        for start in range(0, len(order), batch_size):
            b = order[start : start + batch_size]
            _, gw, gb = readout_loss_and_grad(head, idx[b], targets[b], loss)
            head.weight -= lr * gw
            head.bias -= lr * gb
        report.epoch_loss.append(train_loss(head))
        agree = agreement(head, val_records, idx[va]) if len(va) else float("nan")
        report.val_agree.append(agree)
        if len(va) == 0 or agree > best_agree:
            best, best_agree = head.copy(), agree
            report.best_epoch = epoch
    report.best_val_agree = best_agree
    return best, report
