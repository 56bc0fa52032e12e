"""When to intervene: KL-percentile oracle trigger and a small MLP head that imitates it."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .lm import DecodingState, TabularLM, corpus_prompts, features, masked_softmax, rollout

EPS = 1e-12
TRIGGER_MODES = ("oracle_kl", "learned", "random", "always", "never", "entropy")


def kl_divergence(p, q, eps: float = EPS) -> float:
    """KL(p || q) in nats; ``q`` is floored at ``eps`` and terms with p=0 contribute nothing."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distribution lengths differ: {p.shape} vs {q.shape}")
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(np.maximum(q[nz], eps)))))


def calibrate_threshold(samples: Sequence[float], tau: float) -> float:
    """Nearest-rank (1 - tau) quantile of ``samples``.

    A step fires when its value is strictly greater than the returned threshold.
    """
    if len(samples) == 0:
        raise ValueError("empty samples")
    if len(samples) < 10:
        raise ValueError("need at least 10 calibration samples")
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    xs = np.sort(np.asarray(samples, dtype=np.float64))
    n = len(xs)
    # round before ceil so that e.g. 0.9 * 10 is not lifted to 10 by representation error
    rank = math.ceil(round((1.0 - tau) * n, 9))
    rank = min(max(rank, 1), n)
    return float(xs[rank - 1])


@dataclass
class TriggerConfig:
    mode: str = "oracle_kl"
    tau: float = 0.01
    learned_threshold: float = 0.7
    calibrated_kl_threshold: float | None = None
    entropy_threshold: float | None = None

    def __post_init__(self):
        if self.mode not in TRIGGER_MODES:
            raise ValueError(f"unknown trigger mode {self.mode!r}")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < self.learned_threshold < 1:
            raise ValueError("learned_threshold must lie in (0, 1)")


def trigger_decision(
    config: TriggerConfig,
    kl_value: float | None = None,
    head_prob: float | None = None,
    rng: np.random.Generator | None = None,
    student_entropy: float | None = None,
) -> int:
    mode = config.mode
    if mode == "always":
        return 1
    if mode == "never":
        return 0
    if mode == "oracle_kl":
        if kl_value is None:
            raise ValueError("oracle_kl trigger needs a KL value")
        if config.calibrated_kl_threshold is None:
            raise ValueError("oracle_kl trigger is not calibrated")
        return int(kl_value > config.calibrated_kl_threshold)
    if mode == "learned":
        if head_prob is None:
            raise ValueError("learned trigger needs a head probability")
        return int(head_prob > config.learned_threshold)
    if mode == "random":
        if rng is None:
            raise ValueError("random trigger needs an rng")
        return int(rng.random() < config.tau)
    if mode == "entropy":
        if student_entropy is None:
            raise ValueError("entropy trigger needs the student entropy")
        if config.entropy_threshold is None:
            raise ValueError("entropy trigger is not calibrated")
        return int(student_entropy > config.entropy_threshold)
    raise ValueError(f"unknown trigger mode {mode!r}")


# ---------------------------------------------------------------------------
# KL streams


def step_kl(student: TabularLM, teacher: TabularLM, state: DecodingState) -> float:
    q = masked_softmax(student.next_logits(state))
    p = np.asarray(teacher.next_probs(state))
    return kl_divergence(p, q)


def rollout_stream(
    student: TabularLM,
    prompts: Sequence[Sequence[int]],
    horizon: int,
    seed: int | None = 0,
    temperature: float = 1.0,
) -> list[DecodingState]:
    """Concatenated rollout states over ``prompts``; sampled with ``seed``, greedy if seed is None."""
    rng = None if seed is None else np.random.default_rng(seed)
    states = []
    for prompt in prompts:
        states.extend(rollout(student, prompt, horizon, rng, temperature))
    return states


def kl_stream(student: TabularLM, teacher: TabularLM, states: Sequence[DecodingState]) -> np.ndarray:
    return np.array([step_kl(student, teacher, s) for s in states])


def calibration_states(
    student: TabularLM,
    corpus_tokens: Sequence[int],
    n_steps: int,
    seed: int,
    horizon: int = 50,
    prompt_len: int = 16,
) -> list[DecodingState]:
    """``n_steps`` sampled student states started from random corpus windows."""
    rng = np.random.default_rng(seed)
    n_prompts = -(-n_steps // horizon)
    prompts = corpus_prompts(corpus_tokens, n_prompts, prompt_len, rng)
    states = rollout_stream(student, prompts, horizon, seed=int(rng.integers(2**32)))
    return states[:n_steps]


def calibration_stream(
    student: TabularLM,
    teacher: TabularLM,
    corpus_tokens: Sequence[int],
    n_steps: int,
    seed: int,
    horizon: int = 50,
    prompt_len: int = 16,
) -> np.ndarray:
    """KL values over the states of :func:`calibration_states`."""
    states = calibration_states(student, corpus_tokens, n_steps, seed, horizon, prompt_len)
    return kl_stream(student, teacher, states)


# ---------------------------------------------------------------------------
# trigger head


@dataclass
class TriggerHead:
    """Linear(H, hidden) -> ReLU -> Dropout -> Linear(hidden, 1), emitting a criticality logit."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    dropout: float = 0.1

    @classmethod
    def init(cls, n_features: int, hidden: int = 256, seed: int = 0, dropout: float = 0.1) -> "TriggerHead":
        rng = np.random.default_rng(seed)
        w1 = rng.normal(0.0, math.sqrt(2.0 / n_features), size=(n_features, hidden))
        w2 = rng.normal(0.0, 0.01, size=hidden)
        return cls(w1, np.zeros(hidden), w2, 0.0, dropout)

    @property
    def n_features(self) -> int:
        return self.w1.shape[0]

    def logits(self, X: np.ndarray) -> np.ndarray:
        h = np.maximum(np.atleast_2d(X) @ self.w1 + self.b1, 0.0)
        return h @ self.w2 + self.b2

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(X))

    def params(self) -> list:
        return [self.w1, self.b1, self.w2, np.array(self.b2)]

    def copy(self) -> "TriggerHead":
        return TriggerHead(self.w1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2), self.dropout)

    def to_dict(self) -> dict:
        return {
            "format": "seldecode.trigger_head",
            "shape": [int(self.w1.shape[0]), int(self.w1.shape[1])],
            "dropout": self.dropout,
            "w1": self.w1.ravel().tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": float(self.b2),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerHead":
        if d.get("format") != "seldecode.trigger_head":
            raise ValueError("not a trigger head file")
        H, hidden = d["shape"]
        w1 = np.array(d["w1"], dtype=np.float64).reshape(H, hidden)
        return cls(w1, np.array(d["b1"]), np.array(d["w2"]), float(d["b2"]), float(d["dropout"]))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def _log_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))


def weighted_bce(logits, y, pos_weight: float) -> float:
    """Mean of ``-[w*y*log s(z) + (1-y)*log(1-s(z))]``."""
    y = np.asarray(y, dtype=np.float64)
    per = -(pos_weight * y * _log_sigmoid(logits) + (1.0 - y) * _log_sigmoid(-np.asarray(logits)))
    return float(per.mean())


def head_loss_and_grad(head: TriggerHead, X, y, pos_weight: float, mask: np.ndarray | None = None):
    """Weighted BCE and its gradients w.r.t. (w1, b1, w2, b2).

    ``mask`` is an inverted-dropout multiplier on the hidden layer (None = inference).
    """
    X = np.atleast_2d(X)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    pre = X @ head.w1 + head.b1
    h = np.maximum(pre, 0.0)
    if mask is not None:
        h = h * mask
    z = h @ head.w2 + head.b2
    loss = weighted_bce(z, y, pos_weight)
    s = _sigmoid(z)
    dz = (-(pos_weight * y) * (1.0 - s) + (1.0 - y) * s) / n
    gw2 = h.T @ dz
    gb2 = dz.sum()
    dh = np.outer(dz, head.w2)
    if mask is not None:
        dh = dh * mask
    dpre = dh * (pre > 0)
    gw1 = X.T @ dpre
    gb1 = dpre.sum(axis=0)
    return loss, [gw1, gb1, gw2, gb2]


# ---------------------------------------------------------------------------
# dataset


@dataclass
class TriggerSample:
    feature: np.ndarray
    label: int
    kl: float


@dataclass
class TriggerDataset:
    samples: list
    threshold: float
    tau: float
    n_pos: int
    n_neg: int

    def arrays(self):
        X = np.stack([s.feature for s in self.samples])
        y = np.array([s.label for s in self.samples], dtype=np.float64)
        return X, y


def collect_trigger_dataset(
    student: TabularLM,
    teacher: TabularLM,
    prompts: Sequence[Sequence[int]],
    tau: float,
    horizon: int = 50,
    seed: int = 0,
) -> TriggerDataset:
    """Roll the student out from each prompt and label every step by the calibrated KL threshold."""
    if tau >= 1.0:
        # every step would be an intervention step: nothing to discriminate
        raise ValueError("degenerate calibration: tau = 1 leaves no negative steps")
    states = rollout_stream(student, prompts, horizon, seed=seed)
    kls = kl_stream(student, teacher, states)
    if len(kls) < math.ceil(1.0 / tau):
        raise ValueError("calibration stream shorter than 1/tau steps")
    threshold = calibrate_threshold(kls, tau)
    n_text = student.vocab.n_text
    samples = [TriggerSample(features(s.tokens, n_text), int(k > threshold), float(k)) for s, k in zip(states, kls)]
    n_pos = sum(s.label for s in samples)
    n_neg = len(samples) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("degenerate calibration")
    return TriggerDataset(samples, threshold, tau, n_pos, n_neg)


def save_trigger_dataset(path, dataset: TriggerDataset, header: dict | None = None) -> None:
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for s in dataset.samples:
            row = {"feature": np.flatnonzero(s.feature).tolist(), "label": s.label, "kl": s.kl}
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def load_trigger_dataset(path, n_features: int) -> tuple[dict | None, list[TriggerSample]]:
    """Inverse of :func:`save_trigger_dataset`; features are stored by their active coordinates."""
    header = None
    samples = []
    for line in Path(path).read_text().splitlines():
        obj = json.loads(line)
        if "label" not in obj:
            header = obj
            continue
        phi = np.zeros(n_features)
        phi[obj["feature"]] = 1.0
        samples.append(TriggerSample(phi, int(obj["label"]), float(obj["kl"])))
    return header, samples


# ---------------------------------------------------------------------------
# training


@dataclass
class TriggerTrainReport:
    pos_weight: float
    majority_rate: float
    epoch_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    n_train: int = 0
    n_val: int = 0


def split_indices(n: int, train_frac: float = 0.9, seed: int = 42) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    return perm[:cut], perm[cut:]


def train_trigger_head(
    samples: Sequence[TriggerSample] | TriggerDataset,
    epochs: int = 50,
    lr: float = 0.1,
    batch_size: int = 64,
    pos_weight: float | str = "auto",
    train_frac: float = 0.9,
    split_seed: int = 42,
    seed: int = 0,
    hidden: int = 256,
    dropout: float = 0.1,
    threshold: float = 0.7,
) -> tuple[TriggerHead, TriggerTrainReport]:
    """Mini-batch gradient descent on weighted BCE; keeps the checkpoint with best validation accuracy.

    Accuracy is measured with the same probability cutoff used at inference (``threshold``).
    """
    if isinstance(samples, TriggerDataset):
        samples = samples.samples
    X = np.stack([s.feature for s in samples])
    y = np.array([s.label for s in samples], dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("trigger dataset has a single class")
    pw = n_neg / n_pos if pos_weight == "auto" else float(pos_weight)

    tr, va = split_indices(len(y), train_frac, split_seed)
    Xtr, ytr, Xva, yva = X[tr], y[tr], X[va], y[va]
    rng = np.random.default_rng(seed)
    head = TriggerHead.init(X.shape[1], hidden, seed=int(rng.integers(2**32)), dropout=dropout)

    def accuracy(h):
        if len(yva) == 0:
            return float("nan")
        return float(np.mean((h.predict_proba(Xva) > threshold) == (yva > 0.5)))

    report = TriggerTrainReport(pw, max(n_pos, n_neg) / len(y), n_train=len(tr), n_val=len(va))
    best, best_acc = head.copy(), accuracy(head)
    report.best_val_accuracy = best_acc
    keep = 1.0 - dropout
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(ytr))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            mask = (rng.random((len(idx), hidden)) < keep) / keep if dropout > 0 else None
            _, grads = head_loss_and_grad(head, Xtr[idx], ytr[idx], pw, mask)
            head.w1 -= lr * grads[0]
            head.b1 -= lr * grads[1]
            head.w2 -= lr * grads[2]
            head.b2 -= lr * float(grads[3])
        report.epoch_loss.append(weighted_bce(head.logits(Xtr), ytr, pw))
        acc = accuracy(head)
        report.val_accuracy.append(acc)
        if acc > best_acc:
            best, best_acc = head.copy(), acc
            report.best_epoch = epoch
    report.best_val_accuracy = best_acc
    return best, report
