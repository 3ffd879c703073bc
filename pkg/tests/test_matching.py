import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmmw_detr.matching import hungarian_match
from pmmw_detr.rng import SeededRng
from pmmw_detr.tensor import NumericError

from oracles import brute_force


def test_small_example():
    a = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert a.pairs == [(0, 0), (1, 1)]
    assert a.total(np.array([[1.0, 2.0], [2.0, 1.0]])) == 2.0


def test_all_ties_pick_identity():
    assert hungarian_match(np.ones((3, 3))).pairs == [(0, 0), (1, 1), (2, 2)]


@pytest.mark.parametrize("seed", range(100))
def test_random_matches_brute_force(seed):
    rng = SeededRng(seed)
    k = 1 + seed % 6
    g = 1 + (seed // 6) % 6
    # small integer costs force many co-optimal assignments
    cost = rng.integers(0, 4, (k, g)).astype(float) if seed % 2 else rng.random((k, g))
    best, pairs = brute_force(cost)
    got = hungarian_match(cost)
    assert got.total(cost) == pytest.approx(best, abs=1e-9)
    assert got.pairs == pairs
    assert len(got.pairs) == min(k, g)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32))
def test_assignment_is_a_partial_permutation(k, g, seed):
    cost = SeededRng(seed).random((k, g))
    a = hungarian_match(cost)
    preds, gts = a.pred_indices, a.gt_indices
    assert len(set(preds)) == len(preds) == min(k, g)
    assert len(set(gts)) == len(gts)
    assert sorted(a.unmatched) == sorted(set(range(k)) - set(preds))


def test_empty_and_invalid():
    assert hungarian_match(np.zeros((3, 0))).unmatched == [0, 1, 2]
    with pytest.raises(NumericError):
        hungarian_match(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        hungarian_match(np.zeros(3))
