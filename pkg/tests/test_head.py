import math

import numpy as np
import pytest

from pmmw_detr import tensor as T
from pmmw_detr.gradcheck import grad_check
from pmmw_detr.head import (DenoiseEmbedding, DualHead, HeadConfig, ModulatedCrossAttention, attach_denoising,
                            denoise_mask, make_denoising_queries, positional_encode, refine_anchors)
from pmmw_detr.query_selection import QuerySet
from pmmw_detr.rng import SeededRng
from pmmw_detr.tensor import Parameter

from oracles import naive_mod_scores, naive_pe


def jitter(module, rng, scale):
    for i, p in enumerate(module.parameters()):
        p.data = p.data + scale * rng.child(i).normal(size=p.shape)


def random_anchors(rng, n):
    return np.concatenate([rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.05, 0.5, (n, 2))], axis=1)


def test_positional_encoding_examples():
    pe = positional_encode(T.Tensor(np.array([0.0])), 8).data[0]
    assert pe.tolist() == [0.0, 1.0, 0.0, 1.0]
    x = 0.3
    got = positional_encode(T.Tensor(np.array([x])), 16, 10000.0, 2 * math.pi).data[0]
    assert np.allclose(got, naive_pe(x, 16, 10000.0, 2 * math.pi), atol=1e-15)
    assert got[0] == pytest.approx(math.sin(2 * math.pi * 0.3))


@pytest.mark.parametrize("seed", range(20))
def test_modulated_scores_match_naive(seed):
    rng = SeededRng(seed).child(3)
    cfg = HeadConfig(dim=8)
    mod = ModulatedCrossAttention(rng, cfg)
    jitter(mod, rng.child(1), 0.3)
    content = rng.normal(size=(4, 8))
    anchors = random_anchors(rng, 4)
    memory = rng.normal(size=(6, 8))
    mem_xy = rng.random((6, 2))
    scale_dim = [8, 4][seed % 2]
    got = mod.scores(T.Tensor(content), T.Tensor(anchors), T.Tensor(memory), mem_xy, scale_dim).data
    assert np.max(np.abs(got - naive_mod_scores(mod, content, anchors, memory, mem_xy, scale_dim))) <= 1e-10


def test_unit_ratio_reduces_to_plain_positional_product():
    rng = SeededRng(5)
    cfg = HeadConfig(dim=8)
    mod = ModulatedCrossAttention(rng, cfg)
    anchors = np.array([[0.4, 0.6, 0.25, 0.5]])
    last = mod.ref_size.layers[-1]
    last.weight.data[:] = 0.0
    last.bias.data[:] = np.log(anchors[0, 2:] / (1 - anchors[0, 2:]))
    for layer in (mod.wq, mod.wk):
        layer.weight.data[:] = 0.0
        layer.bias.data[:] = 0.0
    gate = mod.pos_scale.layers[-1]
    gate.weight.data[:] = 0.0
    gate.bias.data[:] = 1.0
    mem_xy = rng.random((5, 2))
    got = mod.scores(T.Tensor(rng.normal(size=(1, 8))), T.Tensor(anchors), T.Tensor(rng.normal(size=(5, 8))),
                     mem_xy, 8).data
    pe = lambda v: naive_pe(v, 8, cfg.pe_temperature, cfg.pe_scale)
    expect = [(pe(0.4) @ pe(x) + pe(0.6) @ pe(y)) / math.sqrt(8) / math.sqrt(8) for x, y in mem_xy]
    assert np.allclose(got[0], expect, atol=1e-12)


def test_refine_with_zero_delta_keeps_anchor():
    a = np.array([[0.3, 0.7, 0.2, 0.05]])
    assert np.allclose(refine_anchors(T.Tensor(a), T.Tensor(np.zeros((1, 4)))).data, a, atol=1e-12)


def make_queries(rng, n, dim, dn=None, embed=None):
    q = QuerySet(Parameter(rng.normal(size=(n, dim))), T.Tensor(random_anchors(rng, n)))
    if dn is not None:
        q = attach_denoising(q, dn, embed)
    return q


def test_zero_initialised_head_returns_input_anchors():
    rng = SeededRng(6)
    head = DualHead(rng, HeadConfig(dim=8, num_queries=5))
    q = make_queries(rng, 5, 8)
    out = head(q, T.Tensor(rng.normal(size=(9, 8))), rng.random((9, 2)))
    assert len(out.anchors) == len(out.logits) == 3
    for a in out.anchors:
        assert np.allclose(a.data, q.anchors.data, atol=1e-12)
    assert out.class_logits.shape == (5, 4)


def test_denoise_mask_layout():
    m = denoise_mask(4, 2, 3)
    assert m.shape == (7, 7)
    assert not m[0, 1] and m[0, 2] and m[0, 4] and m[4, 0] and not m[5, 6]
    assert denoise_mask(0, 0, 3) is None


def test_denoising_queries_cannot_influence_matching_queries():
    rng = SeededRng(7)
    cfg = HeadConfig(dim=8, num_queries=4)
    head = DualHead(rng, cfg)
    jitter(head, rng.child(1), 0.2)
    gt = random_anchors(rng.child(2), 2)
    dn = make_denoising_queries(gt, np.array([1, 3]), 2, 0.4, 0.4, 0.5, rng.child(3))
    embed = DenoiseEmbedding(rng.child(4), 8)
    q = make_queries(rng.child(5), 4, 8, dn, embed)
    out = head(q, T.Tensor(rng.normal(size=(9, 8))), rng.random((9, 2)))
    objective = out.class_logits[4:].sum() + out.boxes[4:].sum()
    objective.backward()
    assert np.all(embed.label_embed.grad == 0.0)
    # the matching queries do receive gradient through their own content
    assert np.any(q.content.grad != 0)


def test_denoise_noise_bounds():
    rng = SeededRng(8)
    gt = np.array([[0.5, 0.5, 0.2, 0.3], [0.4, 0.6, 0.1, 0.1]])
    labels = np.array([0, 2])
    dn = make_denoising_queries(gt, labels, 50, 0.4, 0.4, 0.5, rng)
    base = np.tile(gt, (50, 1))
    assert np.all(np.abs(dn.boxes[:, :2] - base[:, :2]) <= 0.4 * base[:, 2:] / 2 + 1e-12)
    ratio = dn.boxes[:, 2:] / base[:, 2:]
    assert np.all((ratio >= 0.6 - 1e-12) & (ratio <= 1.4 + 1e-12))
    flipped = dn.labels != dn.true_labels
    assert 0 < flipped.mean() < 1
    assert np.all((dn.labels >= 0) & (dn.labels < 4))
    exact = make_denoising_queries(gt, labels, 2, 0.0, 0.0, 0.0, rng)
    assert np.array_equal(exact.boxes, np.tile(gt, (2, 1)))
    assert np.array_equal(exact.labels, np.tile(labels, 2))


def class_grad_on_anchor_layers(use_qsh):
    rng = SeededRng(9)
    head = DualHead(rng, HeadConfig(dim=8, num_queries=3, use_qsh=use_qsh))
    jitter(head, rng.child(1), 0.2)
    q = make_queries(rng.child(2), 3, 8)
    out = head(q, T.Tensor(rng.normal(size=(6, 8))), rng.random((6, 2)))
    out.class_logits.sum().backward()
    delta = head.anchor_layers[0].delta.layers[-1].weight
    return delta.grad


def test_query_sharing_routes_class_gradient_into_regression_branch():
    with_sharing = class_grad_on_anchor_layers(True)
    assert with_sharing is not None and np.abs(with_sharing).max() > 0
    without = class_grad_on_anchor_layers(False)
    assert without is None or np.all(without == 0)


@pytest.mark.parametrize("use_qsh", [True, False])
def test_dual_head_gradients(use_qsh):
    rng = SeededRng(10)
    head = DualHead(rng, HeadConfig(dim=4, num_queries=2, layers=2, ffn_ratio=1, use_qsh=use_qsh))
    jitter(head, rng.child(1), 0.3)
    q = make_queries(rng.child(2), 2, 4)
    memory = Parameter(rng.normal(size=(3, 4)))
    xy = rng.random((3, 2))
    wl = T.Tensor(rng.normal(size=(2, 4)))
    wb = T.Tensor(rng.normal(size=(2, 4)))

    def f():
        out = head(q, memory, xy)
        return (out.class_logits * wl).sum() + (out.boxes * wb).sum()

    params = head.parameters() + [memory, q.content]
    assert grad_check(f, params, max_entries=2, rng=rng.child(3)) < 1e-4
