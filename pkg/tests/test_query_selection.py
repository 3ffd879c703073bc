import numpy as np
import pytest

from pmmw_detr import tensor as T
from pmmw_detr.backbone import ConfigError, FeatureMapSet
from pmmw_detr.query_selection import (ProposalHead, base_anchors, init_queries, select_topk, token_scores)
from pmmw_detr.rng import SeededRng
from pmmw_detr.tensor import Parameter


def test_topk_example():
    sel = select_topk(np.array([0.1, 0.9, 0.5]), np.eye(3, 4), 2)
    assert sel.indices.tolist() == [1, 2]
    assert sel.scores.tolist() == [0.9, 0.5]
    assert np.array_equal(sel.anchors, np.eye(3, 4)[[1, 2]])


def test_topk_ties_prefer_lower_index():
    assert select_topk(np.array([0.5, 0.7, 0.5, 0.7]), np.zeros((4, 4)), 3).indices.tolist() == [1, 3, 0]


def test_topk_too_many():
    with pytest.raises(ConfigError):
        select_topk(np.zeros(3), np.zeros((3, 4)), 4)


def test_token_scores_use_max_class():
    logits = np.array([[0.0, 2.0, -1.0, 1.0]])
    assert token_scores(logits)[0] == pytest.approx(1 / (1 + np.exp(-2.0)))


def test_base_anchors_per_level():
    a = base_anchors([(2, 2), (1, 1)])
    assert a.shape == (5, 4)
    assert np.allclose(a[0], [0.25, 0.25, 0.05, 0.05])
    assert np.allclose(a[4], [0.5, 0.5, 0.1, 0.1])


def test_proposals_start_at_base_anchors_and_stay_valid():
    rng = SeededRng(0)
    head = ProposalHead(rng, 8)
    maps = FeatureMapSet([T.Tensor(rng.normal(size=(4, 4, 8))), T.Tensor(rng.normal(size=(2, 2, 8)))], (8, 16))
    logits, anchors = head(maps)
    assert logits.shape == (20, 4)
    assert np.allclose(anchors.data, base_anchors([(4, 4), (2, 2)]), atol=1e-12)
    for i, p in enumerate(head.parameters()):
        p.data = p.data + 0.5 * rng.child(i).normal(size=p.shape)
    _, anchors = head(maps)
    assert np.all((anchors.data > 0) & (anchors.data < 1))


def test_dynamic_anchors_are_detached():
    rng = SeededRng(1)
    sel = select_topk(rng.random(6), rng.random((6, 4)), 3)
    content = Parameter(rng.normal(size=(3, 8)))
    q = init_queries(sel, content)
    assert not q.anchors.requires_grad
    assert q.content.requires_grad
    assert np.array_equal(q.anchors.data, sel.anchors)


def test_static_anchors_are_learnable():
    logits = Parameter(np.zeros((3, 4)))
    q = init_queries(None, Parameter(np.ones((3, 8))), logits)
    assert np.allclose(q.anchors.data, 0.5)
    q.anchors.sum().backward()
    assert np.allclose(logits.grad, 0.25)
