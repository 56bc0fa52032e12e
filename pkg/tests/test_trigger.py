import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from seldecode.lm import corpus_prompts, features
from seldecode.trigger import (
    TriggerConfig,
    TriggerHead,
    TriggerSample,
    calibrate_threshold,
    collect_trigger_dataset,
    kl_divergence,
    load_trigger_dataset,
    save_trigger_dataset,
    split_indices,
    train_trigger_head,
    trigger_decision,
    weighted_bce,
)


def test_kl_examples():
    p = [0.7, 0.1, 0.1, 0.1]
    assert kl_divergence(p, p) <= 1e-12
    assert kl_divergence(p, [0.25] * 4) == pytest.approx(oracles.kl(p, [0.25] * 4), abs=1e-12)
    assert kl_divergence(p, [0.25] * 4) == pytest.approx(0.4459, abs=1e-3)
    assert kl_divergence([0.5, 0.5], [1.0, 0.0]) > 10


def test_kl_length_mismatch():
    with pytest.raises(ValueError):
        kl_divergence([0.5, 0.5], [1.0])


def test_calibrate_nearest_rank():
    xs = [round(0.1 * i, 1) for i in range(1, 11)]
    thr = calibrate_threshold(xs, 0.10)
    assert thr == 0.9
    assert [x for x in xs if x > thr] == [1.0]
    assert calibrate_threshold(xs, 1.0) == 0.1


def test_calibrate_constant_stream_never_fires():
    thr = calibrate_threshold([0.3] * 50, 0.1)
    assert not any(trigger_decision(TriggerConfig(calibrated_kl_threshold=thr, tau=0.1), kl_value=0.3) for _ in range(3))


def test_calibrate_empty():
    with pytest.raises(ValueError, match="empty samples"):
        calibrate_threshold([], 0.1)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(0, 50, allow_nan=False), min_size=10, max_size=300),
    st.sampled_from([0.01, 0.05, 0.1, 0.2, 0.25, 0.5, 0.9, 1.0]),
)
def test_calibrate_matches_exact_rational_oracle(xs, tau):
    assert calibrate_threshold(xs, tau) == oracles.nearest_rank_threshold(xs, tau)


def test_trigger_decision_examples():
    cfg = TriggerConfig("oracle_kl", 0.1, calibrated_kl_threshold=0.9)
    assert trigger_decision(cfg, kl_value=0.95) == 1
    assert trigger_decision(cfg, kl_value=0.9) == 0
    assert trigger_decision(TriggerConfig("learned"), head_prob=0.69) == 0
    assert trigger_decision(TriggerConfig("learned"), head_prob=0.71) == 1
    assert trigger_decision(TriggerConfig("never"), kl_value=99) == 0
    assert trigger_decision(TriggerConfig("always")) == 1
    with pytest.raises(ValueError):
        trigger_decision(cfg)
    with pytest.raises(ValueError):
        trigger_decision(TriggerConfig("learned"))
    with pytest.raises(ValueError):
        trigger_decision(TriggerConfig("oracle_kl"), kl_value=1.0)


def test_random_trigger_rate():
    rng = np.random.default_rng(0)
    cfg = TriggerConfig("random", 0.2)
    rate = np.mean([trigger_decision(cfg, rng=rng) for _ in range(20000)])
    assert abs(rate - 0.2) < 0.01


def test_entropy_trigger():
    cfg = TriggerConfig("entropy", 0.1, entropy_threshold=1.0)
    assert trigger_decision(cfg, student_entropy=1.5) == 1
    assert trigger_decision(cfg, student_entropy=0.5) == 0


def test_weighted_bce_matches_direct_formula():
    rng = np.random.default_rng(0)
    z = rng.normal(size=20)
    y = rng.integers(0, 2, size=20)
    direct = np.mean([-(3.0 * yi * math.log(1 / (1 + math.exp(-zi))) + (1 - yi) * math.log(1 - 1 / (1 + math.exp(-zi)))) for zi, yi in zip(z, y)])
    assert weighted_bce(z, y, 3.0) == pytest.approx(direct, rel=1e-12)
    # extreme logits stay finite
    assert np.isfinite(weighted_bce(np.array([800.0, -800.0]), np.array([0, 1]), 4.0))


def test_collect_dataset_counts_and_determinism(student, teacher, tokens):
    prompts = corpus_prompts(tokens, 200, 16, np.random.default_rng(7))
    ds = collect_trigger_dataset(student, teacher, prompts, 0.2, seed=1)
    assert len(ds.samples) == 10_000
    assert ds.n_pos + ds.n_neg == 10_000
    assert abs(ds.n_pos - 2000) <= 20
    again = collect_trigger_dataset(student, teacher, prompts, 0.2, seed=1)
    assert [(s.label, s.kl) for s in again.samples] == [(s.label, s.kl) for s in ds.samples]


def test_collect_degenerate(student, teacher, tokens):
    prompts = corpus_prompts(tokens, 4, 16, np.random.default_rng(0))
    with pytest.raises(ValueError, match="degenerate"):
        collect_trigger_dataset(student, teacher, prompts, 1.0)
    with pytest.raises(ValueError):
        collect_trigger_dataset(student, teacher, prompts[:1], 0.001, horizon=10)


def test_dataset_jsonl_roundtrip(tmp_path, student, teacher, tokens):
    prompts = corpus_prompts(tokens, 10, 16, np.random.default_rng(0))
    ds = collect_trigger_dataset(student, teacher, prompts, 0.2, seed=0)
    p = tmp_path / "d.jsonl"
    save_trigger_dataset(p, ds, {"n": 1})
    header, back = load_trigger_dataset(p, 3 * student.vocab.n_text)
    assert header == {"n": 1}
    for a, b in zip(ds.samples, back):
        assert np.array_equal(a.feature, b.feature) and a.label == b.label and a.kl == b.kl


def test_split_is_seeded_partition():
    tr, va = split_indices(100, 0.9, 42)
    assert len(tr) == 90 and len(va) == 10
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(100))
    tr2, _ = split_indices(100, 0.9, 42)
    assert np.array_equal(tr, tr2)


def _separable(n=600, d=12, seed=0):
    rng = np.random.default_rng(seed)
    X = (rng.random((n, d)) < 0.3).astype(float)
    y = (X[:, 0] > 0).astype(int)
    return [TriggerSample(x, int(t), 0.0) for x, t in zip(X, y)]


def test_head_learns_separable_data():
    head, rep = train_trigger_head(_separable(), epochs=50, lr=0.5, hidden=32)
    assert rep.best_val_accuracy >= 0.95


def test_head_pos_weight_auto():
    samples = [TriggerSample(np.eye(2)[i % 2], int(i < 20), 0.0) for i in range(100)]
    _, rep = train_trigger_head(samples, epochs=0, hidden=4)
    assert rep.pos_weight == pytest.approx(4.0)


def test_head_zero_epochs_returns_init():
    samples = _separable()
    head, rep = train_trigger_head(samples, epochs=0, hidden=16, seed=3)
    init = TriggerHead.init(12, 16, seed=int(np.random.default_rng(3).integers(2**32)))
    assert np.array_equal(head.w1, init.w1)
    # near-zero output layer: probabilities ~0.5 < 0.7, so every sample is called negative
    tr, va = split_indices(len(samples), 0.9, 42)
    neg_rate = 1 - np.mean([samples[i].label for i in va])
    assert rep.best_val_accuracy == pytest.approx(neg_rate)


def test_head_single_class():
    with pytest.raises(ValueError):
        train_trigger_head([TriggerSample(np.ones(3), 1, 0.0)] * 10, epochs=1, hidden=4)


def test_head_roundtrip():
    h = TriggerHead.init(9, 5, seed=1)
    back = TriggerHead.from_dict(h.to_dict())
    X = np.random.default_rng(0).random((4, 9))
    assert np.array_equal(back.logits(X), h.logits(X))


def test_inference_has_no_dropout():
    h = TriggerHead.init(6, 8, seed=0, dropout=0.5)
    x = features([1, 0], 2)
    assert np.array_equal(h.predict_proba(x), h.predict_proba(x))
