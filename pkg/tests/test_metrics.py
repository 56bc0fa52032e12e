import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from seldecode.metrics import MetricsReport, agree_at_1, entropy, hit_at_k, rank_cdf, rank_correlations, reference_rank


def test_hit_at_k_examples():
    assert hit_at_k([1, 3, 9, 2], 8) == 0.75
    assert hit_at_k([5, 64, 1], 64) == 1.0
    assert hit_at_k([1, 1, 1], 1) == 1.0
    with pytest.raises(ValueError):
        hit_at_k([], 3)
    with pytest.raises(ValueError):
        hit_at_k([1], 0)


def test_reference_rank_ties_by_id():
    p = [0.3, 0.3, 0.4]
    assert reference_rank(p, 2) == 1 and reference_rank(p, 0) == 2 and reference_rank(p, 1) == 3


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=2, max_size=12), st.data())
def test_reference_rank_matches_sort_oracle(raw, data):
    p = np.array(raw, dtype=float) + 1
    p /= p.sum()
    ref = data.draw(st.integers(0, len(p) - 1))
    assert reference_rank(p, ref) == oracles.rank_of(list(p), ref)


def test_rank_cdf_examples():
    cdf = rank_cdf([1, 1, 2], 4)
    assert cdf[0] == (1, pytest.approx(2 / 3)) and cdf[1] == (2, 1.0) and cdf[-1] == (4, 1.0)
    single = rank_cdf([3], 5)
    assert [v for _, v in single] == [0, 0, 1, 1, 1]


def test_agree_at_1():
    assert agree_at_1([0, 1, 2], [0, 1, 2]) == 1.0
    assert agree_at_1([0, 0], [0, 1]) == 0.5
    rng = np.random.default_rng(0)
    t = rng.integers(0, 8, size=40000)
    assert abs(agree_at_1(rng.integers(0, 8, size=40000), t) - 0.125) < 0.01


def test_entropy_examples():
    assert entropy([0.25] * 4) == pytest.approx(math.log(4))
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert entropy([0.7, 0.1, 0.1, 0.1]) == pytest.approx(oracles.entropy([0.7, 0.1, 0.1, 0.1]), abs=1e-12)
    assert entropy([0.7, 0.1, 0.1, 0.1]) == pytest.approx(0.9404, abs=1e-3)
    with pytest.raises(ValueError):
        entropy([0.5, 0.6])


def test_rank_correlation_examples():
    a = [0.1, 0.2, 0.3, 0.4]
    rc = rank_correlations([a], [a])
    assert rc.kendall_tau == 1 and rc.spearman_rho == pytest.approx(1)
    rc = rank_correlations([a], [a[::-1]])
    assert rc.kendall_tau == -1 and rc.spearman_rho == pytest.approx(-1)
    rc = rank_correlations([[1, 2, 3, 4]], [[1, 3, 2, 4]])
    assert abs(rc.kendall_tau - 2 / 3) <= 1e-9


def test_constant_records_skipped():
    rc = rank_correlations([[1, 1, 1], [1, 2, 3]], [[0.1, 0.2, 0.3], [0.3, 0.2, 0.1]])
    assert rc.n_skipped == 1 and rc.n_used == 1 and rc.kendall_tau == -1
    assert math.isnan(rank_correlations([[1, 1]], [[1, 2]]).kendall_tau)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=3, max_size=10))
def test_correlations_match_bruteforce_with_ties(pairs):
    x = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    rc = rank_correlations([x], [y])
    if len(set(x)) == 1 or len(set(y)) == 1:
        assert rc.n_skipped == 1
        return
    assert rc.kendall_tau == pytest.approx(oracles.kendall_tau_b(x, y), abs=1e-12)
    assert rc.spearman_rho == pytest.approx(oracles.spearman(x, y), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=3, max_size=10, unique=True), st.permutations(range(10)))
def test_correlations_invariant_to_monotone_maps(raw, perm):
    x = [v / 4 for v in raw]
    y = [float(perm[i]) for i in range(len(x))]
    rc = rank_correlations([x], [y])
    rc2 = rank_correlations([np.exp(x).tolist()], [[3 * v + 1 for v in y]])
    assert rc.kendall_tau == pytest.approx(rc2.kendall_tau) and rc.spearman_rho == pytest.approx(rc2.spearman_rho)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=50))
def test_hit_monotone_and_cdf_valid(ranks):
    hits = [hit_at_k(ranks, k) for k in range(1, 21)]
    assert all(a <= b for a, b in zip(hits, hits[1:])) and hits[-1] == 1.0
    cdf = [v for _, v in rank_cdf(ranks, 20)]
    assert cdf == hits


def test_report_outputs(tmp_path):
    rep = MetricsReport(hit_at_k={1: 0.5, 8: 0.9}, agree_at_1=None)
    rep.write_json(tmp_path / "r.json")
    rep.write_hit_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text() == "K,hit_rate\n1,0.500000\n8,0.900000\n"
    assert '"agree_at_1": null' in (tmp_path / "r.json").read_text()
