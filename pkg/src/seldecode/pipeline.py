"""Stage runner: each stage reads its inputs from the run directory and writes its artifacts there.

Every artifact carries the config hash and seed. Loading one written under a different config is
an error, so a stale directory can never mix into a new run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .backends import RemoteModelConfig, RemoteTeacher
from .config import config_hash
from .distill import (
    LossConfig,
    collect_preferences,
    filter_by_margin,
    load_preferences,
    readout_forward,
    record_indices,
    save_preferences,
    train_selector,
)
from .engine import DecodeConfig, decode, decompose_errors, save_trajectories
from .lm import TabularLM, build_vocab, bundled_corpus, corpus_prompts, masked_softmax, train_tabular
from .metrics import agree_at_1, entropy, hit_at_k, rank_correlations, rank_cdf, reference_rank
from .selection import ReadoutHead, select
from .trigger import (
    TriggerConfig,
    TriggerHead,
    calibrate_threshold,
    calibration_states,
    collect_trigger_dataset,
    kl_divergence,
    load_trigger_dataset,
    save_trigger_dataset,
    train_trigger_head,
)

log = logging.getLogger(__name__)

STAGES = ("train-lm", "calibrate", "collect-trigger", "train-trigger", "collect-prefs", "train-selector", "decode", "eval")
REPORT_K_GRID = (1, 2, 4, 8, 16)



class ArtifactError(RuntimeError):
    """A stage input is missing or was produced under another config."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{message} (run stage {stage!r})")
        self.stage = stage


def stage_seed(seed: int, name: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:4], "little")


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default)


class Run:
    def __init__(self, config: dict, out: str | Path):
        self.config = config
        self.out = Path(out)
        self.hash = config_hash(config)
        self.seed = config["run"]["seed"]
        self._corpus_tokens = None

    @property
    def meta(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed}

    def path(self, name: str) -> Path:
        return self.out / name

    # io ------------------------------------------------------------------

    def write_json(self, name: str, payload: dict) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        self.path(name).write_text(dumps({"meta": self.meta, **payload}) + "\n")

    def _check_meta(self, meta: dict | None, stage: str, name: str) -> None:
        if not meta or meta.get("config_hash") != self.hash:
            found = None if not meta else meta.get("config_hash")
            raise ArtifactError(stage, f"{name} was written under config {found}, current is {self.hash}")

    def read_json(self, name: str, stage: str) -> dict:
        p = self.path(name)
        if not p.is_file():
            raise ArtifactError(stage, f"missing {name}")
        obj = json.loads(p.read_text())
        self._check_meta(obj.get("meta"), stage, name)
        return obj

    def jsonl_header(self, **extra) -> dict:
        return {"meta": self.meta, **extra}

    def check_jsonl(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.is_file():
            raise ArtifactError(stage, f"missing {name}")
        with open(p) as fh:
            header = json.loads(fh.readline() or "{}")
        self._check_meta(header.get("meta"), stage, name)
        return p

    # shared inputs -------------------------------------------------------

    def corpus_bytes(self) -> bytes:
        path = self.config["corpus"]["path"]
        return Path(path).read_bytes() if path else bundled_corpus()

    def corpus_text(self):
        raw = self.corpus_bytes()
        return raw.decode("utf-8") if self.config["corpus"]["tokenization"] == "char" else raw

    def models(self) -> tuple[TabularLM, TabularLM | None]:
        s = self.read_json("student.json", "train-lm")
        student = TabularLM.from_dict(s["model"])
        teacher = None
        if self.config["teacher"]["kind"] == "tabular":
            teacher = TabularLM.from_dict(self.read_json("teacher.json", "train-lm")["model"])
        return student, teacher

    def tabular_teacher(self, teacher, stage: str) -> TabularLM:
        if teacher is None:
            raise ValueError(f"stage {stage} needs a tabular teacher (teacher.kind = tabular)")
        return teacher

    def corpus_tokens(self, student: TabularLM) -> list[int]:
        if self._corpus_tokens is None:
            self._corpus_tokens = student.vocab.encode(self.corpus_text())
        return self._corpus_tokens

    def trigger_config(self, tau: float | None = None) -> TriggerConfig:
        c = self.config["trigger"]
        cal = self.read_json("calibration.json", "calibrate")
        tau = c["tau"] if tau is None else tau
        return TriggerConfig(
            c["mode"],
            tau,
            c["learned_threshold"],
            cal["kl_thresholds"].get(repr(tau)),
            cal["entropy_threshold"],
        )

    def readout(self) -> ReadoutHead:
        return ReadoutHead.from_dict(self.read_json("readout.json", "train-selector")["readout"])

    def trigger_head(self) -> TriggerHead:
        return TriggerHead.from_dict(self.read_json("trigger_head.json", "train-trigger")["head"])

    def teacher_for_decode(self, student, teacher):
        t = self.config["teacher"]
        if t["kind"] == "tabular":
            return teacher
        cfg = RemoteModelConfig(
            t["endpoint"], t["model"], t["api_key_env"], t["top_logprobs_n"], t["timeout"], t["retries"], t["backoff_base"], t["floor_logprob"]
        )
        return RemoteTeacher(cfg, student.vocab)


# ---------------------------------------------------------------------------
# stages


def stage_train_lm(run: Run) -> None:
    c = run.config
    text = run.corpus_text()
    vocab = build_vocab(text, c["corpus"]["tokenization"], c["corpus"]["reserved"])
    tokens = vocab.encode(text)
    corpus_sha = hashlib.sha256(run.corpus_bytes()).hexdigest()
    student = train_tabular(tokens, vocab, c["student"]["order"], c["student"]["k"], name="student")
    run.write_json("student.json", {"corpus_sha256": corpus_sha, "model": student.to_dict()})
    if c["teacher"]["kind"] == "tabular":
        teacher = train_tabular(tokens, vocab, c["teacher"]["order"], c["teacher"]["k"], name="teacher")
        run.write_json("teacher.json", {"corpus_sha256": corpus_sha, "model": teacher.to_dict()})


def stage_calibrate(run: Run) -> None:
    c = run.config["trigger"]
    student, teacher = run.models()
    states = calibration_states(
        student, run.corpus_tokens(student), c["calibration_steps"], stage_seed(run.seed, "calibrate"), c["horizon"], c["prompt_len"]
    )
    ents = [entropy(masked_softmax(student.next_logits(s))) for s in states]
    taus = sorted({c["tau"], run.config["distill"]["tau"], *run.config["eval"]["fire_rate_taus"]})
    kl_thresholds = {}
    if teacher is not None:
        kls = [kl_divergence(np.asarray(teacher.next_probs(s)), masked_softmax(student.next_logits(s))) for s in states]
        kl_thresholds = {repr(t): calibrate_threshold(kls, t) for t in taus}
    run.write_json(
        "calibration.json",
        {
            "n_steps": len(states),
            "tau": c["tau"],
            "kl_thresholds": kl_thresholds,
            "entropy_threshold": calibrate_threshold(ents, c["tau"]),
        },
    )


def stage_collect_trigger(run: Run) -> None:
    c = run.config["trigger_head"]
    student, teacher = run.models()
    teacher = run.tabular_teacher(teacher, "collect-trigger")
    seed = stage_seed(run.seed, "collect-trigger")
    prompts = corpus_prompts(run.corpus_tokens(student), c["prompts"], run.config["trigger"]["prompt_len"], np.random.default_rng(seed))
    ds = collect_trigger_dataset(student, teacher, prompts, c["label_tau"], c["horizon"], seed=seed)
    header = run.jsonl_header(
        kind="trigger_dataset",
        tau=ds.tau,
        threshold=ds.threshold,
        n_pos=ds.n_pos,
        n_neg=ds.n_neg,
        n_features=int(ds.samples[0].feature.shape[0]),
        vocab=student.vocab.fingerprint(),
    )
    run.out.mkdir(parents=True, exist_ok=True)
    save_trigger_dataset(run.path("trigger_dataset.jsonl"), ds, header)


def stage_train_trigger(run: Run) -> None:
    c = run.config["trigger_head"]
    p = run.check_jsonl("trigger_dataset.jsonl", "collect-trigger")
    header = json.loads(p.read_text().split("\n", 1)[0])
    _, samples = load_trigger_dataset(p, header["n_features"])
    head, report = train_trigger_head(
        samples,
        epochs=c["epochs"],
        lr=c["lr"],
        batch_size=c["batch_size"],
        pos_weight=c["pos_weight"],
        split_seed=c["split_seed"],
        seed=stage_seed(run.seed, "train-trigger"),
        hidden=c["hidden"],
        dropout=c["dropout"],
        threshold=run.config["trigger"]["learned_threshold"],
    )
    run.write_json("trigger_head.json", {"head": head.to_dict()})
    run.write_json("trigger_train.json", {"report": asdict(report)})


def stage_collect_prefs(run: Run) -> None:
    c = run.config["distill"]
    student, teacher = run.models()
    teacher = run.tabular_teacher(teacher, "collect-prefs")
    seed = stage_seed(run.seed, "collect-prefs")
    prompts = corpus_prompts(run.corpus_tokens(student), c["prompts"], run.config["trigger"]["prompt_len"], np.random.default_rng(seed))
    records = collect_preferences(student, teacher, prompts, TriggerConfig("oracle_kl", c["tau"]), c["K"], c["horizon"], c["strategy"], seed)
    header = run.jsonl_header(kind="preferences", vocab=student.vocab.fingerprint(), K=c["K"], tau=c["tau"])
    run.out.mkdir(parents=True, exist_ok=True)
    save_preferences(run.path("preferences.jsonl"), records, header)


def loss_config(run: Run) -> LossConfig:
    c = run.config["distill"]
    return LossConfig(c["temperature"], c["beta"], c["margin"])


def stage_train_selector(run: Run) -> None:
    c = run.config["distill"]
    student, _ = run.models()
    p = run.check_jsonl("preferences.jsonl", "collect-prefs")
    _, records = load_preferences(p)
    kept = filter_by_margin(records, c["margin_delta"])
    init = ReadoutHead.zeros(student.vocab.n_text, student.vocab.reserved_count)
    readout, report = train_selector(
        kept,
        init,
        lr=c["lr"],
        epochs=c["epochs"],
        batch_size=c["batch_size"],
        seed=stage_seed(run.seed, "train-selector"),
        loss=loss_config(run),
        split_seed=c["split_seed"],
    )
    run.write_json("readout.json", {"readout": readout.to_dict()})
    d = asdict(report)
    d.update(n_collected=len(records), n_kept=len(kept), random_rate=report.random_rate)
    run.write_json("selector_train.json", {"report": d})


def decode_config(run: Run, mode: str, trigger: TriggerConfig) -> DecodeConfig:
    c = run.config["decode"]
    return DecodeConfig(mode, c["K"], trigger, c["max_len"], c["temperature"], stage_seed(run.seed, "decode"), None, c["strategy"])


def _decode_inputs(run: Run, mode: str, student, teacher):
    trig = run.trigger_config()
    if mode in ("greedy", "sample"):
        return trig, None, None
    readout = run.readout() if mode == "local" else None
    head = run.trigger_head() if trig.mode == "learned" else None
    if trig.mode == "oracle_kl" and teacher is None:
        raise ValueError("trigger.mode oracle_kl needs a tabular teacher")
    return trig, readout, head


def decode_prompts(run: Run, student) -> list:
    c = run.config["decode"]
    rng = np.random.default_rng(stage_seed(run.seed, "decode-prompts"))
    return corpus_prompts(run.corpus_tokens(student), c["prompts"], c["prompt_len"], rng)


def run_mode(run: Run, mode: str, student, teacher) -> list:
    trig, readout, head = _decode_inputs(run, mode, student, teacher)
    scorer = run.teacher_for_decode(student, teacher) if mode in ("collaborative", "takeover") else teacher
    cfg = decode_config(run, mode, trig)
    return [decode(student, pr, cfg, teacher=scorer, readout=readout, trigger_head=head) for pr in decode_prompts(run, student)]


def stage_decode(run: Run) -> None:
    mode = run.config["decode"]["mode"]
    student, teacher = run.models()
    trajs = run_mode(run, mode, student, teacher)
    run.out.mkdir(parents=True, exist_ok=True)
    header = run.jsonl_header(kind="trajectories", mode=mode, K=run.config["decode"]["K"], trigger=run.config["trigger"]["mode"])
    save_trajectories(run.path(f"trajectories_{mode}.jsonl"), trajs, header)


def _selector_section(run: Run, student, teacher, readout: ReadoutHead) -> dict:
    K = run.config["decode"]["K"]
    seed = stage_seed(run.seed, "eval-agree")
    prompts = corpus_prompts(run.corpus_tokens(student), run.config["eval"]["agree_prompts"], run.config["trigger"]["prompt_len"], np.random.default_rng(seed))
    c = run.config["distill"]
    records = collect_preferences(student, teacher, prompts, TriggerConfig("oracle_kl", c["tau"]), K, c["horizon"], "topk", seed)
    S, _ = readout_forward(readout, record_indices(records, student.vocab.n_text))
    chosen = [r.candidates.index(select(r.candidates, s)) for r, s in zip(records, S)]
    corr = rank_correlations(S, [r.teacher_probs for r in records])
    t_ent, s_ent, conf_t, conf_s, conf_sel = [], [], [], [], []
    for r, s, i in zip(records, S, chosen):
        tp = np.asarray(r.teacher_probs)
        t_ent.append(entropy(tp / tp.sum()))
        sn = s / s.sum() if s.sum() > 0 else np.full(len(s), 1.0 / len(s))
        s_ent.append(entropy(sn))
        conf_t.append(tp[i])
        conf_s.append(np.exp(r.student_logprobs[i]))
        conf_sel.append(s[i])
    targets = [r.target for r in records]
    # zero-init readout scores every candidate alike, so it always picks the lowest id
    cold = [r.candidates.index(min(r.candidates)) for r in records]
    keep = [i for i, r in enumerate(records) if r.teacher_margin > c["margin_delta"]]
    sub = lambda xs: [xs[i] for i in keep]
    return {
        "K": K,
        "n_records": len(records),
        "agree_at_1": agree_at_1(chosen, targets),
        "cold_start_rate": agree_at_1(cold, targets),
        "n_records_filtered": len(keep),
        "agree_at_1_filtered": agree_at_1(sub(chosen), sub(targets)) if keep else None,
        "cold_start_rate_filtered": agree_at_1(sub(cold), sub(targets)) if keep else None,
        "random_rate": 1.0 / K,
        "kendall_tau": corr.kendall_tau,
        "spearman_rho": corr.spearman_rho,
        "correlation_used": corr.n_used,
        "correlation_skipped": corr.n_skipped,
        "mean_teacher_entropy": float(np.mean(t_ent)),
        "mean_selector_entropy": float(np.mean(s_ent)),
        "confidence": {
            "teacher_prob": float(np.mean(conf_t)),
            "student_prob": float(np.mean(conf_s)),
            "selector_score": float(np.mean(conf_sel)),
        },
    }


def stage_eval(run: Run) -> None:
    ev = run.config["eval"]
    student, teacher = run.models()
    teacher = run.tabular_teacher(teacher, "eval")
    cal = run.read_json("calibration.json", "calibrate")
    n_text = student.vocab.n_text

    # held-out stream: sufficiency at triggered steps and fire rate per budget
    tc = run.config["trigger"]
    states = calibration_states(student, run.corpus_tokens(student), ev["stream_steps"], stage_seed(run.seed, "eval-stream"), tc["horizon"], tc["prompt_len"])
    qs = [masked_softmax(student.next_logits(s)) for s in states]
    ps = [np.asarray(teacher.next_probs(s)) for s in states]
    kls = np.array([kl_divergence(p, q) for p, q in zip(ps, qs)])
    thr = cal["kl_thresholds"][repr(tc["tau"])]
    ranks = [reference_rank(q, int(np.argmax(p))) for q, p, k in zip(qs, ps, kls) if k > thr]
    section_hit = None
    if ranks:
        grid = sorted({k for k in (*REPORT_K_GRID, *ev["k_grid"]) if k <= n_text})
        section_hit = {
            "tau": tc["tau"],
            "n_records": len(ranks),
            "hit_at_k": {str(k): hit_at_k(ranks, k) for k in grid},
            "rank_cdf": rank_cdf(ranks, n_text),
        }
    fire = [
        {"tau": t, "threshold": cal["kl_thresholds"][repr(t)], "fire_rate": float(np.mean(kls > cal["kl_thresholds"][repr(t)]))}
        for t in ev["fire_rate_taus"]
    ]

    readout = None
    if run.path("readout.json").is_file():
        readout = run.readout()
    decomposition, absent = [], []
    for mode in ev["modes"]:
        if mode == "local" and readout is None:
            absent.append("decomposition.local")
            continue
        if run.config["trigger"]["mode"] == "learned" and mode not in ("greedy", "sample") and not run.path("trigger_head.json").is_file():
            absent.append(f"decomposition.{mode}")
            continue
        trajs = run_mode(run, mode, student, teacher)
        rows = [decompose_errors(t.traces) for t in trajs]
        total = {f: int(sum(getattr(r, f) for r in rows)) for f in asdict(rows[0])}
        decomposition.append({"mode": mode, **total, "holds": total["cumulative"] == total["sum_hit"] + total["sum_sel"]})

    selector = None
    if readout is not None:
        selector = _selector_section(run, student, teacher, readout)
    else:
        absent.append("selector")
    run.write_json(
        "eval.json",
        {
            "sufficiency": section_hit,
            "fire_rate": fire,
            "decomposition": decomposition,
            "selector": selector,
            "absent": absent,
            "counts": {"stream_steps": len(states), "triggered_steps": len(ranks)},
        },
    )
    emit_report(run.out)


STAGE_FUNCS = {
    "train-lm": stage_train_lm,
    "calibrate": stage_calibrate,
    "collect-trigger": stage_collect_trigger,
    "train-trigger": stage_train_trigger,
    "collect-prefs": stage_collect_prefs,
    "train-selector": stage_train_selector,
    "decode": stage_decode,
    "eval": stage_eval,
}


def run_stage(config: dict, out, stage: str) -> Run:
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    run = Run(config, out)
    log.info("stage %s -> %s (config %s)", stage, run.out, run.hash)
    STAGE_FUNCS[stage](run)
    return run


def run_pipeline(config: dict, out, stages=STAGES) -> Run:
    run = None
    for stage in stages:
        run = run_stage(config, out, stage)
    return run


# ---------------------------------------------------------------------------
# reports


def _write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return "absent" if x is None else f"{x:.6f}"


def emit_report(run_dir) -> Path:
    """Turn ``eval.json`` into ``report/report.json`` plus one CSV table per section."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not any(run_dir.iterdir()):
        raise ArtifactError("eval", f"run directory {run_dir} is empty")
    src = run_dir / "eval.json"
    if not src.is_file():
        raise ArtifactError("eval", "missing eval.json")
    ev = json.loads(src.read_text())
    rep = run_dir / "report"
    rep.mkdir(exist_ok=True)

    suff = ev["sufficiency"]
    sel = ev["selector"]
    report = {
        "meta": ev["meta"],
        "hit_at_k": None if suff is None else suff["hit_at_k"],
        "rank_cdf": None if suff is None else suff["rank_cdf"],
        "agree_at_1": None if sel is None else sel["agree_at_1"],
        "rank_correlations": None if sel is None else {k: sel[k] for k in ("kendall_tau", "spearman_rho", "correlation_used", "correlation_skipped")},
        "selector": sel,
        "decomposition": ev["decomposition"],
        "fire_rate": ev["fire_rate"],
        "absent": ev["absent"],
        "counts": ev["counts"],
    }
    (rep / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")

    hit = {} if suff is None else suff["hit_at_k"]
    _write_csv(rep / "hit_at_k.csv", ["K", "hit_rate"], [[k, _fmt(hit.get(str(k)))] for k in REPORT_K_GRID])
    cdf = [] if suff is None else suff["rank_cdf"]
    _write_csv(rep / "rank_cdf.csv", ["K", "cdf"], [[k, _fmt(v)] for k, v in cdf])
    cols = ["mode", "cumulative", "sum_hit", "sum_sel", "untriggered_hit", "triggered_hit", "triggered_sel", "n_steps", "n_triggered"]
    _write_csv(rep / "decomposition.csv", cols, [[row[c] for c in cols] for row in ev["decomposition"]])
    _write_csv(rep / "fire_rate.csv", ["tau", "threshold", "fire_rate"], [[r["tau"], _fmt(r["threshold"]), _fmt(r["fire_rate"])] for r in ev["fire_rate"]])
    fields = ["agree_at_1", "cold_start_rate", "agree_at_1_filtered", "cold_start_rate_filtered", "random_rate", "kendall_tau", "spearman_rho", "mean_teacher_entropy", "mean_selector_entropy"]
    _write_csv(rep / "selector.csv", ["metric", "value"], [[f, _fmt(None if sel is None else sel[f])] for f in fields])
    return rep
