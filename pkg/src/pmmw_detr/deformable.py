"""Multi-scale deformable attention encoder.

Each query samples ``K`` points per level and head around its reference point,
bilinearly interpolating projected values, and mixes them with softmax
weights normalised jointly over the ``S * K`` samples of a head.

Coordinate convention: a normalised point ``(x, y)`` in [0, 1]^2 maps to
level pixel coordinates ``(x * W_s - 0.5, y * H_s - 0.5)`` (cell centres at
integers, align-corners off).  Samples outside the map read zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeatureMapSet
from .nn import FeedForward, LayerNorm, Linear, Module
from .rng import SeededRng
from .tensor import DimensionError, NumericError, Parameter, Tensor


@dataclass
class DeformConfig:
    dim: int = 64
    heads: int = 2
    points: int = 2
    levels: int = 3
    encoder_layers: int = 3
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise DimensionError("model dim must be divisible by the head count")
        if self.points < 1:
            raise ValueError("need at least one sampling point")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def _corners(px: np.ndarray, py: np.ndarray, h: int, w: int, heads: int):
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx, fy = px - x0, py - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    m = np.arange(heads).reshape((1, heads) + (1,) * (px.ndim - 2))
    out = []
    for dx, dy, wgt, dwx, dwy in (
        (0, 0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)),
        (1, 0, fx * (1 - fy), (1 - fy), -fx),
        (0, 1, (1 - fx) * fy, -fy, (1 - fx)),
        (1, 1, fx * fy, fy, fx),
    ):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = np.where(valid, (yi * w + xi) * heads + m, 0)
        out.append((idx, wgt * valid, dwx * valid, dwy * valid))
    return out


def sample_heads(value: Tensor, px: Tensor, py: Tensor) -> Tensor:
    """Bilinear sampling of ``value`` (H, W, M, Cv) at (Q, M, P) coordinates -> (Q, M, P, Cv)."""
    h, w, heads, cv = value.shape
    if not (np.all(np.isfinite(px.data)) and np.all(np.isfinite(py.data))):
        raise NumericError("non-finite sampling location")
    flat = value.data.reshape(h * w * heads, cv)
    corners = _corners(px.data, py.data, h, w, heads)
    out = sum(wgt[..., None] * flat[idx] for idx, wgt, _, _ in corners)

    def back(g):
        gv = gx = gy = None
        if value.requires_grad:
            index = np.concatenate([c[0].ravel() for c in corners])
            weights = np.concatenate([c[1].ravel() for c in corners])
            gflat = T.scatter_rows(flat.shape[0], index, g.reshape(-1, cv), weights)
            gv = gflat.reshape(value.shape)
        if px.requires_grad or py.requires_grad:
            gx = np.zeros(px.shape, dtype=g.dtype)
            gy = np.zeros(py.shape, dtype=g.dtype)
            for idx, _, dwx, dwy in corners:
                dot = np.einsum("...c,...c->...", flat[idx], g)
                gx += dwx * dot
                gy += dwy * dot
        return gv, gx, gy

    return Tensor._op(out, (value, px, py), back)


def bilinear_sample(feature_map: Tensor, point) -> Tensor:
    """Feature at level pixel coordinates ``point = (x, y)``; zeros outside the map."""
    h, w, c = feature_map.shape
    px = T.Tensor(np.full((1, 1, 1), point[0]))
    py = T.Tensor(np.full((1, 1, 1), point[1]))
    return sample_heads(feature_map.reshape(h, w, 1, c), px, py).reshape(c)


def to_level_coords(ref: np.ndarray, height: int, width: int):
    """Normalised (x, y) -> level pixel coordinates."""
    return ref[..., 0] * width - 0.5, ref[..., 1] * height - 0.5


def default_offset_bias(heads: int, levels: int, points: int) -> np.ndarray:
    """Per-head direction fan, radius growing with point index; breaks point symmetry."""
    theta = np.arange(heads) * (2.0 * np.pi / heads)
    grid = np.stack([np.cos(theta), np.sin(theta)], -1)
    grid = grid / np.abs(grid).max(-1, keepdims=True)
    bias = np.tile(grid[:, None, None, :], (1, levels, points, 1))
    bias *= np.arange(1, points + 1).reshape(1, 1, points, 1)
    return bias.reshape(-1)


class MSDeformAttn(Module):
    def __init__(self, rng: SeededRng, cfg: DeformConfig, zero_out: bool = False):
        self.cfg = cfg
        M, S, K, C = cfg.heads, cfg.levels, cfg.points, cfg.dim
        self.offsets = Linear(rng, C, M * S * K * 2, init="zeros")
        self.offsets.bias.data[:] = default_offset_bias(M, S, K)
        self.weights = Linear(rng, C, M * S * K, init="zeros")
        self.value_proj = Linear(rng, C, C, bias=False)
        self.out_proj = Linear(rng, C, C, bias=False, init="zeros" if zero_out else "xavier")

    def attention_weights(self, query: Tensor) -> Tensor:
        """(Q, M, S, K) weights, each head normalised over its S * K samples."""
        c = self.cfg
        logits = self.weights(query).reshape(-1, c.heads, c.levels * c.points)
        return T.softmax(logits, axis=-1).reshape(-1, c.heads, c.levels, c.points)

    def __call__(self, query: Tensor, ref: np.ndarray, value_maps: list) -> Tensor:
        c = self.cfg
        if len(value_maps) != c.levels:
            raise DimensionError(f"expected {c.levels} value maps")
        q = query.shape[0]
        off = self.offsets(query).reshape(q, c.heads, c.levels, c.points, 2)
        attn = self.attention_weights(query)
        heads_out = None
        for s, vmap in enumerate(value_maps):
            h, w, _ = vmap.shape
            v = self.value_proj(vmap).reshape(h, w, c.heads, c.head_dim)
            bx, by = to_level_coords(ref, h, w)
            px = off[:, :, s, :, 0] + T.Tensor(np.broadcast_to(bx[:, None, None], (q, c.heads, c.points)))
            py = off[:, :, s, :, 1] + T.Tensor(np.broadcast_to(by[:, None, None], (q, c.heads, c.points)))
            sampled = sample_heads(v, px, py)                             # (Q, M, K, Cv)
            a = attn[:, :, s, :].reshape(q, c.heads, c.points, 1)
            part = (a * sampled).sum(axis=2)                              # (Q, M, Cv)
            heads_out = part if heads_out is None else heads_out + part
        return self.out_proj(heads_out.reshape(q, c.dim))


def ms_deform_attn(query: Tensor, ref: np.ndarray, maps: FeatureMapSet, attn: MSDeformAttn) -> Tensor:
    return attn(query, ref, maps.maps)


def reference_points(shapes: list) -> np.ndarray:
    """Normalised centre of every token of every level, flattened row-major."""
    refs = []
    for h, w in shapes:
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        refs.append(np.stack([xs.ravel(), ys.ravel()], -1))
    return np.concatenate(refs, 0)


class EncoderLayer(Module):
    def __init__(self, rng: SeededRng, cfg: DeformConfig, zero_out: bool = False):
        self.norm = LayerNorm(cfg.dim)
        self.attn = MSDeformAttn(rng, cfg, zero_out)
        self.ffn = FeedForward(rng, cfg.dim, cfg.mlp_ratio, zero_out)

    def __call__(self, tokens: Tensor, level_pos: Tensor, ref: np.ndarray, shapes: list) -> Tensor:
        u = self.norm(tokens)
        maps, start = [], 0
        for h, w in shapes:
            maps.append(u[start:start + h * w].reshape(h, w, -1))
            start += h * w
        tokens = tokens + self.attn(u + level_pos, ref, maps)
        return self.ffn(tokens)


class Encoder(Module):
    """Stack of deformable self-attention layers over the flattened multi-scale tokens."""

    def __init__(self, rng: SeededRng, cfg: DeformConfig, zero_out: bool = False):
        self.cfg = cfg
        self.level_embed = Parameter(rng.normal(0.0, 0.02, (cfg.levels, cfg.dim)))
        self.layers = [EncoderLayer(rng, cfg, zero_out) for _ in range(cfg.encoder_layers)]

    def __call__(self, maps: FeatureMapSet) -> FeatureMapSet:
        shapes = [m.shape[:2] for m in maps.maps]
        tokens = T.concat([m.reshape(-1, self.cfg.dim) for m in maps.maps], axis=0)
        level_ids = np.concatenate([np.full(h * w, s) for s, (h, w) in enumerate(shapes)])
        level_pos = T.take_rows(self.level_embed, level_ids)
        ref = reference_points(shapes)
        for layer in self.layers:
            tokens = layer(tokens, level_pos, ref, shapes)
        out, start = [], 0
        for h, w in shapes:
            out.append(tokens[start:start + h * w].reshape(h, w, -1))
            start += h * w
        return FeatureMapSet(out, maps.strides)


class Neck(Module):
    """Per-level input projection to the model dim followed by the encoder."""

    def __init__(self, rng: SeededRng, in_channels: tuple, cfg: DeformConfig):
        self.proj = [Linear(rng, c, cfg.dim) for c in in_channels]
        self.proj_norm = [LayerNorm(cfg.dim) for _ in in_channels]
        self.encoder = Encoder(rng, cfg)

    def __call__(self, maps: FeatureMapSet) -> FeatureMapSet:
        projected = [n(p(m)) for p, n, m in zip(self.proj, self.proj_norm, maps.maps)]
        return self.encoder(FeatureMapSet(projected, maps.strides))


def encoder_forward(maps: FeatureMapSet, encoder: Encoder) -> FeatureMapSet:
    return encoder(maps)
