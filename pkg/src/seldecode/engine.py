"""End-to-end decoding loop with per-step traces and hit/selection error bookkeeping."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .lm import DecodingState, TabularLM, features, greedy_from_logits, masked_softmax
from .metrics import entropy
from .selection import CandidateSet, local_scores, propose_candidates, select, teacher_scores
from .trigger import TriggerConfig, TriggerHead, kl_divergence, trigger_decision

DECODE_MODES = ("greedy", "sample", "collaborative", "local", "takeover")


@dataclass
class DecodeConfig:
    mode: str = "collaborative"
    K: int = 8
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    max_len: int = 64
    temperature: float = 1.0
    seed: int = 0
    eos: int | None = None
    strategy: str = "topk"

    def __post_init__(self):
        if self.mode not in DECODE_MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")


@dataclass
class StepTrace:
    t: int
    g: int
    k_t: int
    candidates: tuple[int, ...]
    scores: tuple[float, ...] | None
    score_source: str | None
    chosen: int
    reference: int | None
    delta_hit: int | None
    delta_sel: int | None
    kl: float | None

    def to_json(self) -> dict:
        d = asdict(self)
        d["candidates"] = list(self.candidates)
        d["scores"] = None if self.scores is None else list(self.scores)
        return d


@dataclass
class Trajectory:
    prompt: tuple[int, ...]
    generated: list[int]
    traces: list[StepTrace]
    termination: str


def reference_token(teacher, state: DecodingState) -> int:
    """Teacher's masked greedy argmax (lowest id on ties)."""
    return int(np.argmax(teacher.next_probs(state)))


def takeover_step(teacher, state: DecodingState) -> int:
    return reference_token(teacher, state)


def _has_full_distribution(model) -> bool:
    return model is not None and hasattr(model, "next_probs")


def decode(
    student: TabularLM,
    prompt: Sequence[int],
    config: DecodeConfig,
    teacher=None,
    readout=None,
    trigger_head: TriggerHead | None = None,
) -> Trajectory:
    """Generate up to ``config.max_len`` tokens.

    At each step the trigger decides between plain student decoding and selection over the
    student's top-K: scored by the teacher (collaborative), by the reserved-token readout
    (local), or bypassed by the teacher's own argmax (takeover).
    """
    mode = config.mode
    if mode in ("collaborative", "takeover") and teacher is None:
        raise ValueError(f"{mode} mode needs a teacher")
    if mode == "takeover" and not _has_full_distribution(teacher):
        raise ValueError("takeover mode needs a teacher with a full next-token distribution")
    if mode == "local":
        readout = readout if readout is not None else getattr(student, "readout", None)
        if readout is None:
            raise ValueError("local mode needs a trained readout")
    if mode == "sample" and config.seed is None:
        raise ValueError("sample mode needs a seed")
    full_teacher = _has_full_distribution(teacher)
    if teacher is not None and full_teacher and teacher.vocab != student.vocab:
        raise ValueError("student and teacher vocabularies differ")
    trig = config.trigger
    if trig.mode == "learned" and trigger_head is None and mode not in ("greedy", "sample"):
        raise ValueError("learned trigger needs a trigger head")

    rng = np.random.default_rng(config.seed)
    n_text = student.vocab.n_text
    state = DecodingState(tuple(int(t) for t in prompt))
    traces: list[StepTrace] = []
    termination = "max_len"
    for _ in range(config.max_len):
        logits = student.next_logits(state)
        q = masked_softmax(logits)
        p = np.asarray(teacher.next_probs(state)) if full_teacher else None
        kl = kl_divergence(p, q) if p is not None else None
        ref = int(np.argmax(p)) if p is not None else None

        if mode in ("greedy", "sample"):
            g = 0
        else:
            head_prob = None
            if trig.mode == "learned":
                head_prob = float(trigger_head.predict_proba(features(state.tokens, n_text))[0])
            ent = entropy(q) if trig.mode == "entropy" else None
            g = trigger_decision(trig, kl_value=kl, head_prob=head_prob, rng=rng, student_entropy=ent)

        scores = source = None
        if g:
            cands = propose_candidates(logits, config.K, config.strategy, rng, step=state.t)
            if mode == "collaborative":
                sv = teacher_scores(teacher, state, cands) if full_teacher else teacher.score_candidates(state, cands)
                chosen = select(cands, sv)
            elif mode == "local":
                sv = local_scores(student, state, cands, readout)
                chosen = select(cands, sv)
            else:  # takeover: the teacher generates, the candidate set is only recorded
                sv = None
                chosen = takeover_step(teacher, state)
            if sv is not None:
                scores, source = tuple(float(x) for x in sv.scores), sv.source
            cand_tokens = cands.tokens
            # takeover searches the whole text vocabulary
            k_t = n_text if mode == "takeover" else len(cand_tokens)
            search = range(n_text) if mode == "takeover" else cand_tokens
        else:
            if mode == "sample":
                p_s = masked_softmax(logits, config.temperature)
                chosen = int(rng.choice(n_text, p=p_s))
            else:
                chosen = greedy_from_logits(logits)
            cand_tokens = (chosen,)
            k_t = 1
            search = cand_tokens

        if ref is not None:
            hit = ref in search
            d_hit = int(not hit)
            d_sel = int(hit and chosen != ref)
        else:
            d_hit = d_sel = None
        traces.append(StepTrace(state.t, int(g), k_t, tuple(cand_tokens), scores, source, int(chosen), ref, d_hit, d_sel, kl))
        state = state.append(chosen)
        if config.eos is not None and chosen == config.eos:
            termination = "eos"
            break
    return Trajectory(tuple(state.prompt), list(state.generated), traces, termination)


# ---------------------------------------------------------------------------
# error decomposition


@dataclass
class ErrorDecomposition:
    cumulative: int
    sum_hit: int
    sum_sel: int
    untriggered_hit: int
    triggered_hit: int
    triggered_sel: int
    n_steps: int
    n_triggered: int

    @property
    def holds(self) -> bool:
        return self.cumulative == self.untriggered_hit + self.triggered_hit + self.triggered_sel


def decompose_errors(traces: Sequence[StepTrace]) -> ErrorDecomposition:
    """Split the cumulative 0-1 mismatch against the reference into hit and selection failures."""
    cum = uh = th = ts = n_trig = 0
    for tr in traces:
        if tr.reference is None or tr.delta_hit is None:
            raise ValueError(f"step {tr.t} has no reference token")
        cum += int(tr.chosen != tr.reference)
        if tr.g:
            n_trig += 1
            th += tr.delta_hit
            ts += tr.delta_sel
        else:
            uh += tr.delta_hit
            # an untriggered step has a singleton candidate set: it cannot fail selection
            if tr.delta_sel:
                raise ValueError(f"step {tr.t}: selection failure without a trigger")
    return ErrorDecomposition(cum, uh + th, ts, uh, th, ts, len(traces), n_trig)


# ---------------------------------------------------------------------------
# baselines


def final_token(traj: Trajectory):
    return traj.generated[-1] if traj.generated else None


def majority_vote(trajectories: Sequence[Trajectory], extractor: Callable = final_token):
    """Most frequent extracted answer; ties resolved by first occurrence."""
    if not trajectories:
        raise ValueError("no trajectories")
    answers = []
    for tr in trajectories:
        try:
            a = extractor(tr)
        except Exception:
            continue
        if a is not None:
            answers.append(a)
    if not answers:
        raise ValueError("answer extraction failed on every trajectory")
    counts = Counter(answers)
    top = max(counts.values())
    return next(a for a in answers if counts[a] == top)


# ---------------------------------------------------------------------------
# persistence


def save_trajectories(path, trajectories: Sequence[Trajectory], header: dict) -> None:
    """One header line, then per trajectory a start line and one line per step."""
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for i, traj in enumerate(trajectories):
            start = {"kind": "trajectory", "index": i, "prompt": list(traj.prompt), "termination": traj.termination}
            fh.write(json.dumps(start, sort_keys=True, separators=(",", ":")) + "\n")
            for tr in traj.traces:
                row = {"kind": "step", "index": i, **tr.to_json()}
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def load_trajectories(path) -> tuple[dict, list[Trajectory]]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    out: list[Trajectory] = []
    for line in lines[1:]:
        obj = json.loads(line)
        if obj["kind"] == "trajectory":
            out.append(Trajectory(tuple(obj["prompt"]), [], [], obj["termination"]))
            continue
        obj.pop("kind")
        obj.pop("index")
        obj["candidates"] = tuple(obj["candidates"])
        if obj["scores"] is not None:
            obj["scores"] = tuple(obj["scores"])
        tr = StepTrace(**obj)
        out[-1].traces.append(tr)
        out[-1].generated.append(tr.chosen)
    return header, out
