import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dagproj.errors import DegenerateTruth, DimensionMismatch, EmptySampleBag
from dagproj.metrics import (PosteriorSummary, aggregate, auroc, auroc_from_scores, brier,
                             evaluate, expected_f1, expected_shd, f1, mean_stderr, midranks, shd,
                             write_rows_csv)

CHAIN = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])


def point(W):
    return PosteriorSummary.from_samples(np.asarray(W)[None])


def test_brier_examples():
    assert brier(point(CHAIN), CHAIN) == 0.0
    assert brier(PosteriorSummary(np.zeros((3, 3))), CHAIN) == 2.0
    s = PosteriorSummary(np.array([[0, 0.25], [0, 0]]))
    assert brier(s, np.array([[0, 1], [0, 0]])) == 0.5625


def test_brier_shape_mismatch():
    with pytest.raises(DimensionMismatch):
        brier(PosteriorSummary(np.zeros((2, 2))), CHAIN)


def test_shd_examples():
    assert shd(CHAIN, CHAIN) == 0
    rev = CHAIN.copy()
    rev[0, 1], rev[1, 0] = 0, 1
    assert shd(rev, CHAIN) == 1
    T = np.triu(np.ones((3, 3)), 1)
    bag = PosteriorSummary.from_samples(np.stack([T, np.zeros((3, 3))]))
    assert expected_shd(bag, T) == 1.5


def test_f1_examples():
    assert f1(CHAIN, CHAIN) == 1.0
    assert f1(np.zeros((3, 3)), CHAIN) == 0.0
    T = np.zeros((4, 4))
    T[0, 1] = T[2, 3] = 1
    S = T.copy()
    S[1, 2] = S[0, 3] = 1
    assert f1(S, T) == pytest.approx(2 / 3, abs=0)
    assert expected_f1(point(S), T) == pytest.approx(2 / 3, abs=0)


def test_auroc_examples():
    T = CHAIN
    assert auroc(PosteriorSummary(T.astype(float)), T) == 1.0
    assert auroc(PosteriorSummary(np.full((3, 3), 0.3) * (1 - np.eye(3))), T) == 0.5
    assert auroc_from_scores([1, 0, 1, 0], [0.9, 0.8, 0.3, 0.1]) == 0.75


def test_auroc_degenerate():
    with pytest.raises(DegenerateTruth):
        auroc(PosteriorSummary(np.zeros((3, 3))), np.zeros((3, 3)))
    assert math.isnan(evaluate(point(np.zeros((3, 3))), np.zeros((3, 3)))["auroc"])


def test_midranks():
    assert list(midranks([3, 1, 3, 2])) == [3.5, 1, 3.5, 2]


def test_empty_sample_bag():
    with pytest.raises(EmptySampleBag):
        PosteriorSummary.from_samples(np.zeros((0, 3, 3)))
    with pytest.raises(EmptySampleBag):
        expected_shd(PosteriorSummary(np.zeros((3, 3))), CHAIN)


def test_dirac_posterior_matches_point_estimate():
    rng = np.random.default_rng(0)
    S = np.triu(rng.random((5, 5)) < 0.5, 1)
    T = np.triu(rng.random((5, 5)) < 0.5, 1)
    bag = PosteriorSummary.from_samples(np.stack([S] * 7))
    assert expected_shd(bag, T) == shd(S, T)
    assert expected_f1(bag, T) == f1(S, T)


def test_summary_diagonal_is_ignored():
    s = PosteriorSummary.from_samples(np.ones((2, 3, 3)))
    assert np.all(np.diag(s.edge_probs) == 0)


adjacency = st.integers(2, 6).flatmap(lambda p: st.tuples(
    st.lists(st.lists(st.booleans(), min_size=p, max_size=p), min_size=p * 3, max_size=p * 3),
    st.lists(st.lists(st.booleans(), min_size=p, max_size=p), min_size=p, max_size=p),
    st.permutations(range(p))))


@settings(max_examples=100, deadline=None)
@given(adjacency)
def test_metric_ranges_and_relabeling(data):
    rows, trows, perm = data
    p = len(trows)
    S = np.array(rows, dtype=float).reshape(3, p, p)
    T = np.array(trows, dtype=float)
    np.fill_diagonal(T, 0)
    bag = PosteriorSummary.from_samples(S)
    pi = list(perm)
    relabeled = PosteriorSummary.from_samples(S[:, pi][:, :, pi])
    assert brier(bag, T) == pytest.approx(brier(relabeled, T[np.ix_(pi, pi)]))
    assert 0 <= expected_shd(bag, T) <= p * p - p
    assert 0 <= expected_f1(bag, T) <= 1
    off = ~np.eye(p, dtype=bool)
    if 0 < T[off].sum() < off.sum():
        assert 0 <= auroc(bag, T) <= 1


def test_auroc_matches_pair_enumeration():
    rng = np.random.default_rng(1)
    y = rng.random(40) < 0.3
    s = rng.integers(0, 5, 40) / 4
    pos, neg = s[y], s[~y]
    expect = np.mean([(a > b) + 0.5 * (a == b) for a in pos for b in neg])
    assert auroc_from_scores(y, s) == pytest.approx(expect, abs=1e-12)


def test_aggregate_order_independent():
    rows = [{"n": n, "v": v} for n, v in [(50, 1.0), (200, 2.0), (50, 3.0)]]
    a = aggregate(rows, ["n"], ["v"])
    b = aggregate(rows[::-1], ["n"], ["v"])
    assert a == b
    assert a[0]["v_mean"] == 2.0 and a[0]["v_stderr"] == pytest.approx(1.0)
    assert mean_stderr([4.0]) == (4.0, 0.0)


def test_write_rows_csv_comment(tmp_path):
    path = tmp_path / "r.csv"
    write_rows_csv(path, [{"a": 1, "b": 2}], "version=x")
    assert path.read_text().splitlines() == ["# version=x", "a,b", "1,2"]
