import numpy as np
import pytest

from pmmw_detr import tensor as T
from pmmw_detr.backbone import FeatureMapSet
from pmmw_detr.deformable import (DeformConfig, Encoder, MSDeformAttn, bilinear_sample, reference_points,
                                  to_level_coords)
from pmmw_detr.gradcheck import grad_check
from pmmw_detr.rng import SeededRng
from pmmw_detr.tensor import Parameter

from oracles import naive_deform


def jitter(module, rng, scale):
    for i, p in enumerate(module.parameters()):
        p.data = p.data + scale * rng.child(i).normal(size=p.shape)


@pytest.mark.parametrize("seed", range(20))
def test_matches_naive_loop(seed):
    rng = SeededRng(seed)
    cfg = DeformConfig(dim=8, heads=2, points=3, levels=3)
    mod = MSDeformAttn(rng, cfg)
    jitter(mod, rng.child(50), 0.5)
    maps = [rng.child(60, s).normal(size=(h, h, 8)) for s, h in enumerate((5, 3, 2))]
    query = rng.normal(size=(6, 8))
    ref = rng.random((6, 2)) * 1.2 - 0.1
    out = mod(T.Tensor(query), ref, [T.Tensor(m) for m in maps]).data
    assert np.max(np.abs(out - naive_deform(mod, query, ref, maps))) <= 1e-10


def test_attention_weights_sum_to_one_per_head():
    rng = SeededRng(3)
    mod = MSDeformAttn(rng, DeformConfig(dim=8, heads=4, points=2, levels=3))
    jitter(mod, rng.child(1), 1.0)
    a = mod.attention_weights(T.Tensor(rng.normal(size=(7, 8)))).data
    assert a.shape == (7, 4, 3, 2)
    assert np.max(np.abs(a.sum(axis=(2, 3)) - 1)) <= 1e-12
    assert np.all(a >= 0)


def test_bilinear_examples():
    fmap = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
    assert bilinear_sample(fmap, (0.5, 0.5)).item() == 2.5
    assert bilinear_sample(fmap, (1.0, 0.0)).item() == 2.0
    assert bilinear_sample(fmap, (5.0, 5.0)).item() == 0.0
    # half a cell outside the map blends with zero padding
    assert bilinear_sample(fmap, (-0.5, 0.0)).item() == 0.5


def test_normalised_centre_maps_to_centre_cell():
    x, y = to_level_coords(np.array([0.5, 0.5]), 3, 3)
    assert (x, y) == (1.0, 1.0)
    fmap = T.Tensor(np.arange(9.0).reshape(3, 3, 1))
    assert bilinear_sample(fmap, (x, y)).item() == 4.0


def test_reference_points_cover_every_token():
    ref = reference_points([(2, 2), (1, 3)])
    assert ref.shape == (7, 2)
    assert np.allclose(ref[:4], [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
    assert np.allclose(ref[4:, 0], [1 / 6, 0.5, 5 / 6])


def test_zero_initialised_encoder_is_identity():
    rng = SeededRng(4)
    cfg = DeformConfig(dim=8, heads=2, points=2, levels=2, encoder_layers=2)
    enc = Encoder(rng, cfg, zero_out=True)
    maps = FeatureMapSet([T.Tensor(rng.normal(size=(4, 4, 8))), T.Tensor(rng.normal(size=(2, 2, 8)))], (8, 16))
    out = enc(maps)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(out.maps, maps.maps))


@pytest.mark.parametrize("seed", range(3))
def test_encoder_gradients(seed):
    rng = SeededRng(seed).child(77)
    cfg = DeformConfig(dim=4, heads=2, points=2, levels=3, encoder_layers=1, mlp_ratio=2)
    enc = Encoder(rng, cfg)
    jitter(enc, rng.child(1), 0.3)
    maps = [Parameter(rng.child(2, h).normal(size=(h, h, 4))) for h in (4, 2, 1)]
    weights = [T.Tensor(rng.child(3, h).normal(size=(h, h, 4))) for h in (4, 2, 1)]

    def f():
        out = enc(FeatureMapSet(maps, (8, 16, 32))).maps
        return sum(((o * w).sum() for o, w in zip(out, weights)), T.Tensor(0.0))

    assert grad_check(f, enc.parameters() + maps) < 1e-4
