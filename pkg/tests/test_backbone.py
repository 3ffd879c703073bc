import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmmw_detr import tensor as T
from pmmw_detr.backbone import (Backbone, ConfigError, DcftAttention, DcftConfig, DcftLayer, MacCounter,
                                complexity_count, dcft_attention, gather_keys_values, instrumented_macs,
                                key_layout, patch_embed, plain_config, pool_subwindows, swin_complexity,
                                vit_complexity)
from pmmw_detr.gradcheck import grad_check
from pmmw_detr.rng import SeededRng
from pmmw_detr.tensor import DegenerateSliceError, DimensionError, Parameter


def test_patch_embed_shapes_and_identity():
    img = np.arange(64, dtype=np.float64).reshape(8, 8)
    out = patch_embed(img, T.Tensor(np.eye(16)))
    assert out.shape == (2, 2, 16)
    assert np.array_equal(out.data[0, 1], img[0:4, 4:8].reshape(-1))
    assert patch_embed(np.zeros((94, 94)), T.Tensor(np.ones((16, 5)))).shape == (24, 24, 5)
    with pytest.raises(DimensionError):
        patch_embed(np.zeros((0, 4)), T.Tensor(np.ones((16, 5))))


def test_pool_subwindows_examples():
    z = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
    pooled, valid = pool_subwindows(z, 2)
    assert pooled.data.reshape(-1).tolist() == [2.5]
    assert valid.all()
    ident, _ = pool_subwindows(z, 1)
    assert ident is z
    with pytest.raises(ConfigError):
        pool_subwindows(z, 3)


def test_pool_subwindows_padding_mask():
    z = T.Tensor(np.ones((5, 5, 2)))
    pooled, valid = pool_subwindows(z, 2)
    assert pooled.shape == (3, 3, 2)
    assert valid.all()      # every padded sub-window still holds one real pixel
    # the corner cell only averages one real pixel with three zero pads
    assert pooled.data[2, 2, 0] == pytest.approx(0.25)


def test_key_layout_counts():
    assert key_layout(8, 8, 2, (1, 2), (1, 3)).index.shape[1] == 10
    inner = key_layout(9, 9, 3, (1,), (3,))
    assert not inner.mask[4].any()     # centre window of a 3x3 window grid: grid fully inside
    edge = key_layout(1, 3, 3, (1,), (3,))
    assert int((~edge.mask[0]).sum()) == 3


def test_key_layout_matches_enumeration():
    """Each gathered key cell is the expected grid cell around the window centre."""
    h, w, win, pools, regions = 7, 6, 3, (1, 2), (3, 3)
    lay = key_layout(h, w, win, pools, regions)
    for iy, ix in itertools.product(range(lay.windows_y), range(lay.windows_x)):
        col = 0
        for lvl, (n, r) in enumerate(zip(pools, regions)):
            hl, wl = -(-h // n), -(-w // n)
            cy = math.floor((iy * win + win / 2) / n)
            cx = math.floor((ix * win + win / 2) / n)
            for ky in range(cy - r // 2, cy - r // 2 + r):
                for kx in range(cx - r // 2, cx - r // 2 + r):
                    inside = 0 <= ky < hl and 0 <= kx < wl
                    row = iy * lay.windows_x + ix
                    assert lay.mask[row, col] == (not inside)
                    if inside:
                        assert lay.index[row, col] == lay.level_offsets[lvl] + ky * wl + kx
                    col += 1


def test_bias_table_extent_and_translation_consistency():
    cfg = DcftConfig(window=7, pool_sizes=(1, 3), region_sizes=(7, 3))
    attn = DcftAttention(SeededRng(0), 8, cfg)
    assert attn.bias_fine.shape == (13, 13)
    lay = key_layout(14, 14, 7, (1,), (7,))
    seen = {}
    for qi in range(49):
        for kj in range(49):
            q = divmod(qi, 7)
            k = divmod(kj, 7)
            # key cell k is at offset (k - 3) relative to the window origin
            off = (k[0] - 3 - q[0], k[1] - 3 - q[1])
            idx = lay.bias_index[qi, kj]
            assert seen.setdefault(off, idx) == idx
    assert len(seen) == 13 * 13


def test_gather_keys_values_returns_window_region():
    rng = SeededRng(1)
    z = T.Tensor(rng.normal(size=(6, 6, 2)))
    lay = key_layout(6, 6, 3, (1,), (3,))
    k, v, mask = gather_keys_values([z], [z], lay, 0)
    assert k.shape == (9, 2) and not mask.any()
    assert np.array_equal(k.data, z.data[0:3, 0:3].reshape(9, 2))


def test_dcft_attention_examples():
    v = T.Tensor([[3.0, -1.0]])
    out = dcft_attention(T.Tensor(np.ones((4, 2))), T.Tensor([[0.5, 0.2]]), v, T.Tensor(np.full((4, 1), 7.0)), None)
    assert np.array_equal(out.data, np.repeat(v.data, 4, 0))
    rng = SeededRng(2)
    vals = rng.normal(size=(5, 3))
    mask = np.array([False, True, False, False, True])
    out = dcft_attention(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((5, 3))), T.Tensor(vals), None, mask)
    assert np.allclose(out.data, vals[~mask].mean(0), atol=1e-15)
    with pytest.raises(DegenerateSliceError):
        dcft_attention(T.Tensor(np.ones((1, 3))), T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))), None,
                       np.array([True, True]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32))
def test_dcft_attention_convex_and_normalised(seed):
    rng = SeededRng(seed)
    q = rng.normal(size=(3, 4, 5))
    k = rng.normal(size=(3, 6, 5))
    v = rng.normal(size=(3, 6, 5))
    mask = rng.random((3, 6)) < 0.4
    mask[:, 0] = False
    bias = rng.normal(size=(4, 6))
    scores = np.einsum("wqc,wkc->wqk", q, k) / math.sqrt(5) + bias
    scores = np.where(mask[:, None, :], -np.inf, scores)
    attn = T.softmax(T.Tensor(scores), axis=-1).data
    assert np.max(np.abs(attn.sum(-1) - 1)) <= 1e-12
    assert np.all(attn[np.broadcast_to(mask[:, None, :], attn.shape)] == 0)
    out = dcft_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), T.Tensor(bias), mask).data
    for wi in range(3):
        live = v[wi][~mask[wi]]
        assert np.all(out[wi] >= live.min(0) - 1e-12)
        assert np.all(out[wi] <= live.max(0) + 1e-12)


def test_zero_initialised_layer_is_identity():
    cfg = DcftConfig(base_channels=8)
    layer = DcftLayer(SeededRng(3), 8, cfg, zero_out=True)
    z = T.Tensor(SeededRng(4).normal(size=(6, 6, 8)))
    out = layer(z)
    assert out.shape == z.shape
    assert np.array_equal(out.data, z.data)


def test_backbone_shapes_and_determinism():
    cfg = DcftConfig()
    img = SeededRng(5).random((128, 128))
    a = Backbone(SeededRng(0), cfg)(img)
    b = Backbone(SeededRng(0), cfg)(img)
    assert [m.shape for m in a.maps] == [(16, 16, 64), (8, 8, 128), (4, 4, 256)]
    assert a.strides == (8, 16, 32)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.maps, b.maps))


@pytest.mark.parametrize("size", [32, 64, 96])
def test_stage_extents(size):
    cfg = DcftConfig(base_channels=8, depths=(1, 1, 1, 1))
    maps = Backbone(SeededRng(0), cfg)(np.zeros((size, size))).maps
    for s, m in zip((2, 3, 4), maps):
        assert m.shape == (size // (4 * 2 ** (s - 1)), size // (4 * 2 ** (s - 1)), 8 * 2 ** (s - 1))


def test_parameter_names_unique():
    names = [n for n, _ in Backbone(SeededRng(0), DcftConfig()).named_parameters()]
    assert len(names) == len(set(names))
    assert "stage2.layer0.attn.f_q.weight" in names


def test_dcft_layer_gradients():
    cfg = DcftConfig(base_channels=6, window=2, pool_sizes=(1, 2), region_sizes=(2, 3))
    rng = SeededRng(6)
    layer = DcftLayer(rng, 6, cfg)
    for i, p in enumerate(layer.parameters()):
        p.data = p.data + 0.2 * rng.child(i).normal(size=p.shape)
    z = Parameter(rng.normal(size=(5, 4, 6)))
    w = T.Tensor(rng.normal(size=(5, 4, 6)))
    assert grad_check(lambda: (layer(z) * w).sum(), layer.parameters() + [z]) < 1e-4


@pytest.mark.slow
def test_full_backbone_gradients_32px():
    cfg = DcftConfig(base_channels=4, depths=(1, 1, 1, 1))
    rng = SeededRng(7)
    net = Backbone(rng, cfg)
    img = rng.random((32, 32))
    weights = [T.Tensor(rng.child(9, i).normal(size=s)) for i, s in enumerate([(4, 4, 8), (2, 2, 16), (1, 1, 32)])]

    def f():
        return sum(((m * w).sum() for m, w in zip(net(img).maps, weights)), T.Tensor(0.0))

    assert grad_check(f, net.parameters(), max_entries=3, rng=rng.child(1)) < 1e-4


def test_complexity_formulas():
    assert complexity_count((1, 3, 5, 7), 56, 56, 96) == (4 + 84) * 3136 * 96 == 26_492_928
    assert complexity_count((1,), 10, 12, 3) == 2 * 10 * 12 * 3
    assert swin_complexity(7, 56, 56, 96) == (4 * 96 + 2 * 49) * 3136 * 96
    assert vit_complexity(56, 56, 96) == (4 * 96 + 2 * 3136) * 3136 * 96
    assert complexity_count((1, 3, 5, 7), 56, 56, 96) < swin_complexity(7, 56, 56, 96)


def test_instrumented_count_within_factor_two():
    cfg = DcftConfig(window=7, pool_sizes=(1, 3, 5, 7), region_sizes=(7, 3, 3, 3))
    macs = instrumented_macs(cfg, 56, 56, 96, SeededRng(0))
    formula = complexity_count(cfg.pool_sizes, 56, 56, 96)
    assert formula <= macs <= 2 * formula


def test_mac_counter_breakdown():
    cfg = DcftConfig(window=2, pool_sizes=(1,), region_sizes=(2,))
    counter = MacCounter()
    DcftAttention(SeededRng(0), 3, cfg)(T.Tensor(np.ones((4, 4, 3))), counter)
    # 16 queries x 4 keys x 3 channels for scores and again for values
    assert counter.score == counter.value == 16 * 4 * 3
    assert counter.pool == 16 * 3


def test_plain_config_single_level():
    plain = plain_config(DcftConfig())
    assert plain.pool_sizes == (1,) and plain.region_sizes == (3,)


def test_config_validation():
    with pytest.raises(ConfigError):
        DcftConfig(pool_sizes=(2, 3), region_sizes=(3, 3))
    with pytest.raises(ConfigError):
        DcftConfig(depths=(1, 1, 1))
    with pytest.raises(ConfigError):
        DcftConfig(pool_sizes=(1, 3), region_sizes=(3,))
