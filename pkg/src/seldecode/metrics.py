"""Sufficiency and selection-fidelity metrics: Hit@K, Agree@1, rank correlations, entropy."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats


def reference_rank(student_probs, reference: int) -> int:
    """1-based rank of ``reference`` under descending probability, ties by ascending id."""
    p = np.asarray(student_probs, dtype=np.float64)
    pr = p[reference]
    ids = np.arange(len(p))
    ahead = (p > pr) | ((p == pr) & (ids < reference))
    return int(ahead.sum()) + 1


def hit_at_k(ranks: Sequence[int], K: int) -> float:
    if K < 1:
        raise ValueError("K must be at least 1")
    if len(ranks) == 0:
        raise ValueError("empty records")
    r = np.asarray(ranks)
    return float(np.mean(r <= K))


def rank_cdf(ranks: Sequence[int], n_text: int) -> list[tuple[int, float]]:
    if len(ranks) == 0:
        raise ValueError("empty records")
    r = np.asarray(ranks)
    counts = np.bincount(r, minlength=n_text + 1)[1 : n_text + 1]
    cdf = np.cumsum(counts) / len(r)
    return [(k + 1, float(v)) for k, v in enumerate(cdf)]


def agree_at_1(chosen_indices: Sequence[int], target_indices: Sequence[int]) -> float:
    if len(chosen_indices) == 0:
        raise ValueError("empty records")
    if len(chosen_indices) != len(target_indices):
        raise ValueError("length mismatch")
    return float(np.mean(np.asarray(chosen_indices) == np.asarray(target_indices)))


def entropy(dist) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    p = np.asarray(dist, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("distribution is not normalized")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class RankCorrelation:
    kendall_tau: float
    spearman_rho: float
    n_used: int
    n_skipped: int


def rank_correlations(selector_scores: Sequence[Sequence[float]], teacher_probs: Sequence[Sequence[float]]) -> RankCorrelation:
    """Mean per-record Kendall tau-b and Spearman rho (average ranks on ties).

    Records where either side is constant have no defined correlation and are skipped.
    """
    taus, rhos, skipped = [], [], 0
    for s, p in zip(selector_scores, teacher_probs):
        s = np.asarray(s, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if len(s) < 2 or len(s) != len(p):
            raise ValueError("each record needs >= 2 aligned candidates")
        if np.all(s == s[0]) or np.all(p == p[0]):
            skipped += 1
            continue
        taus.append(stats.kendalltau(s, p, variant="b").statistic)
        rhos.append(stats.spearmanr(s, p).statistic)
    if not taus:
        return RankCorrelation(float("nan"), float("nan"), 0, skipped)
    return RankCorrelation(float(np.mean(taus)), float(np.mean(rhos)), len(taus), skipped)


@dataclass
class MetricsReport:
    hit_at_k: dict = field(default_factory=dict)
    rank_cdf: list = field(default_factory=list)
    agree_at_1: float | None = None
    kendall_tau: float | None = None
    spearman_rho: float | None = None
    correlation_skipped: int = 0
    mean_teacher_entropy: float | None = None
    mean_selector_entropy: float | None = None
    confidence: dict | None = None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hit_at_k"] = {str(k): v for k, v in self.hit_at_k.items()}
        return d

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    def write_hit_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["K", "hit_rate"])
            for k in sorted(self.hit_at_k):
                w.writerow([k, f"{self.hit_at_k[k]:.6f}"])
