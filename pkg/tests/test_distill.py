import math

import numpy as np
import pytest

import oracles
from helpers import synthetic_records
from seldecode.distill import (
    LossConfig,
    PreferenceRecord,
    agreement,
    collect_preferences,
    filter_by_margin,
    kl_regularizer,
    load_preferences,
    margin_loss,
    save_preferences,
    selection_loss,
    target_index,
    total_loss,
    train_selector,
)
from seldecode.lm import corpus_prompts, masked_softmax
from seldecode.selection import ReadoutHead, propose_candidates
from seldecode.trigger import TriggerConfig


def test_selection_loss_examples():
    assert selection_loss([1.0, 0.0], 0, 1.0) == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert selection_loss([1.0, 0.0], 0, 1.0) == pytest.approx(0.3133, abs=1e-4)
    assert selection_loss([1.0, 0.0], 0, 0.5) == pytest.approx(0.1269, abs=1e-4)
    for t in range(4):
        assert selection_loss([0.3] * 4, t, 0.7) == pytest.approx(math.log(4), abs=1e-12)


def test_selection_loss_matches_oracle_and_is_shift_invariant():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = rng.normal(size=6)
        t = int(rng.integers(6))
        a = selection_loss(s, t, 0.2)
        assert a == pytest.approx(oracles.selection_loss(list(s), t, 0.2), rel=1e-10)
        assert abs(selection_loss(s + 3.7, t, 0.2) - a) <= 1e-9


def test_selection_loss_target_range():
    with pytest.raises(ValueError):
        selection_loss([1.0, 0.0], 2, 1.0)


def test_margin_loss_examples():
    # s* = 0.9, s_neg = 0.7 and a third score placed so the population std is 0.1
    s = np.array([0.9, 0.7, 0.6775255128608411])
    loss, m_eff, sigma = margin_loss(s, 0, 0.2)
    assert sigma == pytest.approx(0.1, abs=1e-12)
    assert m_eff == pytest.approx(0.5, abs=1e-10)
    assert loss == pytest.approx(0.3, abs=1e-10)
    assert margin_loss([10.0, 0.0], 0, 100.0)[0] == 0.0
    assert margin_loss([0.4] * 3, 1, 0.2) == (0.0, 0.0, 0.0)


def test_total_loss_examples():
    b = total_loss([1.0, 0.0], 0, LossConfig(1.0, 0.0, True))
    assert b.l_margin == 0.0 and b.total == pytest.approx(0.3133, abs=1e-4)
    b = total_loss([0.2] * 4, 1, LossConfig(1.0, 0.0, True))
    assert b.total == pytest.approx(math.log(4))
    b = total_loss([0.9, 0.1, 0.5], 2, LossConfig(0.2, 0.0, False))
    assert b.total == b.l_sel


def test_kl_regularizer():
    base = [0.7, 0.1, 0.1, 0.1]
    assert kl_regularizer(base, base) <= 1e-12
    assert kl_regularizer(base, [0.25] * 4) == pytest.approx(0.4459, abs=1e-3)
    b = total_loss([1.0, 0.0], 0, LossConfig(1.0, 10.0, False), base, [0.25] * 4)
    assert b.total == pytest.approx(b.l_sel + 10 * oracles.kl(base, [0.25] * 4))
    with pytest.raises(ValueError):
        kl_regularizer([0.5, 0.5], [1.0])


def test_target_index_tie_rule():
    assert target_index((7, 3, 5), (0.4, 0.4, 0.2)) == 1


def _rec(margin):
    return PreferenceRecord((0,), (1, 2), (-0.1, -0.2), (0.5, 0.5), 0, 1.0, margin)


def test_filter_by_margin():
    assert len(filter_by_margin([_rec(0.05), _rec(0.10)], 0.08)) == 1
    assert len(filter_by_margin([_rec(0.0), _rec(0.2)], 0)) == 1
    with pytest.raises(ValueError, match="empty dataset after filtering"):
        filter_by_margin([_rec(0.5)], 1.0)
    recs = [_rec(m) for m in np.random.default_rng(0).random(50)]
    for d in (0.1, 0.3, 0.7):
        assert {id(r) for r in filter_by_margin(recs, d)} <= {id(r) for r in filter_by_margin(recs, 0)}


def test_collect_always_trigger_one_record_per_step(student, teacher, tokens):
    prompts = corpus_prompts(tokens, 10, 16, np.random.default_rng(0))
    recs = collect_preferences(student, teacher, prompts, TriggerConfig("always"), K=8, horizon=50, seed=0)
    assert len(recs) == 500
    for r in recs[:50]:
        p = teacher.next_probs(r.prefix)
        assert r.teacher_probs == tuple(float(p[c]) for c in r.candidates)
        assert r.candidates == propose_candidates(student.next_logits(r.prefix), 8).tokens
        assert r.teacher_margin >= 0


def test_collect_self_teacher_targets_student_top(student, tokens):
    prompts = corpus_prompts(tokens, 5, 16, np.random.default_rng(1))
    recs = collect_preferences(student, student, prompts, TriggerConfig("always"), K=8, horizon=20)
    assert all(r.target == 0 for r in recs)


def test_collect_oracle_calibrates_to_budget(student, teacher, tokens):
    prompts = corpus_prompts(tokens, 100, 16, np.random.default_rng(2))
    recs = collect_preferences(student, teacher, prompts, TriggerConfig("oracle_kl", 0.1), K=16, horizon=50, seed=3)
    assert abs(len(recs) - 500) <= 5
    assert all(len(r.candidates) == 16 for r in recs)
    again = collect_preferences(student, teacher, prompts, TriggerConfig("oracle_kl", 0.1), K=16, horizon=50, seed=3)
    assert again == recs


def test_collect_never_is_empty(student, teacher, tokens):
    with pytest.raises(ValueError, match="empty dataset"):
        collect_preferences(student, teacher, [tokens[:16]], TriggerConfig("never"), K=4, horizon=5)


def test_preferences_jsonl_roundtrip(tmp_path):
    recs = synthetic_records(20)
    p = tmp_path / "p.jsonl"
    save_preferences(p, recs, {"K": 4})
    header, back = load_preferences(p)
    assert header == {"K": 4} and back == recs


def test_train_selector_synthetic():
    recs = synthetic_records(600, seed=1)
    head, rep = train_selector(recs, ReadoutHead.zeros(10, 16), lr=2.0, epochs=40)
    assert rep.best_val_agree >= 0.9
    held_out = synthetic_records(300, seed=99)
    assert agreement(head, held_out) >= 0.9


def test_train_selector_zero_epochs_is_cold_start():
    recs = synthetic_records(400, seed=2)
    init = ReadoutHead.zeros(10, 16)
    head, rep = train_selector(recs, init, epochs=0)
    assert np.array_equal(head.weight, init.weight)
    # uniform scores: always the lowest id candidate
    cold = np.mean([r.candidates.index(min(r.candidates)) == r.target for r in recs])
    assert agreement(head, recs) == pytest.approx(cold)


def test_cold_start_near_random_when_targets_are_random():
    rng = np.random.default_rng(3)
    recs = []
    for _ in range(2000):
        cands = tuple(int(t) for t in rng.choice(10, size=8, replace=False))
        tp = tuple(float(x) for x in rng.dirichlet(np.ones(8)))
        recs.append(PreferenceRecord((0,), cands, (0.0,) * 8, tp, target_index(cands, tp), 0.0, 0.0))
    assert abs(agreement(ReadoutHead.zeros(10, 4), recs) - 1 / 8) < 0.02


def test_train_selector_rejects_bad_data():
    with pytest.raises(ValueError):
        train_selector([], ReadoutHead.zeros(10, 4))
    one = PreferenceRecord((0,), (1,), (0.0,), (1.0,), 0, 0.0, 1.0)
    with pytest.raises(ValueError, match="degenerate"):
        train_selector([one, one], ReadoutHead.zeros(10, 4))
