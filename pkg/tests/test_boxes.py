import numpy as np
import pytest
from hypothesis import given, strategies as st

from pmmw_detr.boxes import (AnchorBox, clamp_anchors, cxcywh_to_xyxy, giou, giou_tensor, iou, pairwise_iou,
                             xyxy_to_cxcywh)
from pmmw_detr.gradcheck import grad_check
from pmmw_detr.rng import SeededRng
from pmmw_detr.tensor import Parameter


def test_iou_examples():
    assert iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7)
    assert iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert giou([0, 0, 1, 1], [2, 0, 3, 1]) == pytest.approx(-1 / 3)


def test_anchor_box_validation():
    with pytest.raises(ValueError):
        AnchorBox(0.5, 0.5, 1.0, 0.2)
    with pytest.raises(ValueError):
        AnchorBox(0.5, 0.5, 1e-5, 0.2)
    assert np.allclose(AnchorBox(0.5, 0.5, 0.2, 0.4).corners(), [0.4, 0.3, 0.6, 0.7])


corner = st.tuples(st.floats(0, 0.9), st.floats(0, 0.9), st.floats(0.01, 0.5), st.floats(0.01, 0.5))


@given(corner, corner)
def test_iou_symmetric_bounded(a, b):
    ba = [a[0], a[1], a[0] + a[2], a[1] + a[3]]
    bb = [b[0], b[1], b[0] + b[2], b[1] + b[3]]
    v = iou(ba, bb)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(bb, ba), abs=1e-15)
    assert -1.0 <= giou(ba, bb) <= v + 1e-15


@given(corner)
def test_conversion_round_trip(b):
    box = np.array([b[0] + b[2] / 2, b[1] + b[3] / 2, b[2], b[3]])
    assert np.allclose(xyxy_to_cxcywh(cxcywh_to_xyxy(box)), box, atol=1e-15)


def test_clamp_anchors_range():
    out = clamp_anchors(np.array([[-0.2, 1.3, 0.0, 2.0]]))
    assert np.all((out > 0) & (out < 1))


def test_giou_tensor_matches_numpy_and_gradients():
    rng = SeededRng(3)
    pred_np = np.concatenate([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.1, 0.4, (5, 2))], 1)
    target = np.concatenate([rng.uniform(0.3, 0.7, (5, 2)), rng.uniform(0.1, 0.4, (5, 2))], 1)
    pred = Parameter(pred_np)
    got = giou_tensor(pred, target).data
    expect = [giou(cxcywh_to_xyxy(p), cxcywh_to_xyxy(t)) for p, t in zip(pred_np, target)]
    assert np.allclose(got, expect, atol=1e-14)
    assert grad_check(lambda: giou_tensor(pred, target).sum(), [pred]) < 1e-4


def test_pairwise_iou_shape():
    assert pairwise_iou(np.zeros((3, 4)), np.zeros((0, 4))).shape == (3, 0)
