"""Task-aligned dual-branch decoder.

Three anchor-refine layers (regression branch) interleave with three
class-refine layers (classification branch).  With query sharing on, each
class-refine layer embeds the anchors just produced by its paired
anchor-refine layer and attends from class content to regression content
before probing the encoder map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import MIN_SIZE, clamp_anchors
from .nn import FeedForward, LayerNorm, Linear, MLP, Module
from .query_selection import QuerySet
from .rng import SeededRng
from .tensor import Parameter, Tensor


@dataclass
class HeadConfig:
    dim: int = 64
    num_queries: int = 20
    num_classes: int = 4
    layers: int = 3
    ffn_ratio: int = 4
    pe_temperature: float = 10000.0
    pe_scale: float = 2 * math.pi
    attn_scale: str = "dim"        # "dim": sqrt(D); "queries": sqrt(number of queries)
    use_qsh: bool = True

    def __post_init__(self):
        if self.dim % 4:
            raise ValueError("head dim must be divisible by 4")
        if self.attn_scale not in ("dim", "queries"):
            raise ValueError("attn_scale must be 'dim' or 'queries'")


@dataclass
class HeadOutput:
    anchors: list            # per anchor-refine layer, (Q, 4) tensors
    logits: list             # per class-refine layer, (Q, classes) tensors
    num_dn: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def boxes(self) -> Tensor:
        return self.anchors[-1]

    @property
    def class_logits(self) -> Tensor:
        return self.logits[-1]


def positional_encode(x, dim: int, temperature: float = 10000.0, scale: float = 1.0) -> Tensor:
    """Sinusoidal code of a scalar field: (...,) -> (..., dim / 2).

    Slot 2i holds sin(scale * x * f_i) and slot 2i+1 cos(scale * x * f_i), with
    f_i = temperature^(-2i / (dim / 2)).
    """
    x = T.as_tensor(x)
    half = dim // 2
    freqs = temperature ** (-2.0 * np.arange(half // 2) / half)
    arg = T.reshape(x, x.shape + (1,)) * T.Tensor(freqs * scale)
    s, c = T.sin(arg), T.cos(arg)
    return T.stack([s, c], axis=-1).reshape(x.shape + (half,))


def anchor_encoding(anchors: Tensor, dim: int, temperature: float, scale: float) -> Tensor:
    """Cat[PE(cx), PE(cy), PE(w), PE(h)] -> (Q, 2 * dim)."""
    parts = [positional_encode(anchors[:, i], dim, temperature, scale) for i in range(4)]
    return T.concat(parts, axis=-1)


def denoise_mask(num_dn: int, groups: int, num_match: int) -> np.ndarray | None:
    """Block-diagonal attention mask: each denoise group and the matching part see only themselves."""
    if num_dn == 0:
        return None
    total = num_dn + num_match
    block = np.empty(total, dtype=np.intp)
    per = num_dn // groups
    block[:num_dn] = np.repeat(np.arange(groups), per)
    block[num_dn:] = groups
    return block[:, None] != block[None, :]


class SpatialQuery(Module):
    """Anchor -> spatial query: two-layer MLP over the four sinusoidal codes."""

    def __init__(self, rng: SeededRng, cfg: HeadConfig):
        self.cfg = cfg
        self.mlp = MLP(rng, [2 * cfg.dim, cfg.dim, cfg.dim])

    def __call__(self, anchors: Tensor) -> Tensor:
        c = self.cfg
        return self.mlp(anchor_encoding(anchors, c.dim, c.pe_temperature, c.pe_scale))


def spatial_query(anchors: Tensor, module: SpatialQuery) -> Tensor:
    return module(anchors)


class Attention(Module):
    """Single-head softmax(q k^T / sqrt(d)) v with input/output projections."""

    def __init__(self, rng: SeededRng, dim: int):
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor, mask, scale_dim: int) -> Tensor:
        q, k, v = self.wq(q_in), self.wk(k_in), self.wv(v_in)
        scores = T.matmul(q, k.T) * (1.0 / math.sqrt(scale_dim))
        return self.wo(T.matmul(T.softmax(scores, axis=-1, mask=mask), v))


def self_attention(content: Tensor, pos: Tensor, attn: Attention, mask, scale_dim: int) -> Tensor:
    """Queries and keys C + P, values C."""
    qk = content + pos
    return attn(qk, qk, content, mask, scale_dim)


class ModulatedCrossAttention(Module):
    """Cross-attention with content and width/height-modulated positional scores.

    score = (q_c k_c^T + ModAttn) / sqrt(d), where
    ModAttn = (Px_q Px^T * w_ref / w_q + Py_q Py^T * h_ref / h_q) / sqrt(D),
    Px_q, Py_q are the halves of PE(x_q, y_q) * MLP(C_q) and (w_ref, h_ref) =
    sigmoid(MLP(C_q)).
    """

    def __init__(self, rng: SeededRng, cfg: HeadConfig):
        self.cfg = cfg
        d = cfg.dim
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)
        self.pos_scale = MLP(rng, [d, d, d])
        self.ref_size = MLP(rng, [d, d, 2])

    def scores(self, content: Tensor, anchors: Tensor, memory: Tensor, mem_xy: np.ndarray,
               scale_dim: int) -> Tensor:
        c = self.cfg
        d = c.dim
        content_scores = T.matmul(self.wq(content), self.wk(memory).T)
        pq = T.concat([positional_encode(anchors[:, 0], d, c.pe_temperature, c.pe_scale),
                       positional_encode(anchors[:, 1], d, c.pe_temperature, c.pe_scale)], axis=-1)
        pq = pq * self.pos_scale(content)
        px = positional_encode(T.Tensor(mem_xy[:, 0]), d, c.pe_temperature, c.pe_scale)
        py = positional_encode(T.Tensor(mem_xy[:, 1]), d, c.pe_temperature, c.pe_scale)
        ref = T.sigmoid(self.ref_size(content))
        wq = T.clip(anchors[:, 2], MIN_SIZE, None)
        hq = T.clip(anchors[:, 3], MIN_SIZE, None)
        ratio_w = (ref[:, 0] / wq).reshape(-1, 1)
        ratio_h = (ref[:, 1] / hq).reshape(-1, 1)
        half = d // 2
        mod = (T.matmul(pq[:, :half], px.T) * ratio_w + T.matmul(pq[:, half:], py.T) * ratio_h)
        mod = mod * (1.0 / math.sqrt(d))
        return (content_scores + mod) * (1.0 / math.sqrt(scale_dim))

    def __call__(self, content: Tensor, anchors: Tensor, memory: Tensor, mem_xy: np.ndarray,
                 scale_dim: int) -> Tensor:
        attn = T.softmax(self.scores(content, anchors, memory, mem_xy, scale_dim), axis=-1)
        return self.wo(T.matmul(attn, self.wv(memory)))


def modulated_cross_attention(content, anchors, memory, mem_xy, module, scale_dim=None):
    return module(content, anchors, memory, mem_xy, scale_dim or module.cfg.dim)


def refine_anchors(anchors: Tensor, delta: Tensor) -> Tensor:
    """sigmoid(inverse_sigmoid(anchor) + delta)."""
    return T.sigmoid(T.inverse_sigmoid(anchors) + delta)


class AnchorRefineLayer(Module):
    def __init__(self, rng: SeededRng, cfg: HeadConfig):
        d = cfg.dim
        self.spatial = SpatialQuery(rng, cfg)
        self.norm_sa = LayerNorm(d)
        self.self_attn = Attention(rng, d)
        self.norm_ca = LayerNorm(d)
        self.cross_attn = ModulatedCrossAttention(rng, cfg)
        self.ffn = FeedForward(rng, d, cfg.ffn_ratio)
        self.norm_out = LayerNorm(d)
        self.delta = MLP(rng, [d, d, 4], last_init="zeros")

    def __call__(self, content, anchors, memory, mem_xy, mask, scale_dim):
        pos = self.spatial(anchors)
        content = content + self_attention(self.norm_sa(content), pos, self.self_attn, mask, scale_dim)
        content = content + self.cross_attn(self.norm_ca(content), anchors, memory, mem_xy, scale_dim)
        content = self.ffn(content)
        return content, refine_anchors(anchors, self.delta(self.norm_out(content)))


def anchor_refine_layer(content, anchors, memory, mem_xy, layer, mask=None, scale_dim=None):
    return layer(content, anchors, memory, mem_xy, mask, scale_dim or layer.norm_sa.weight.shape[0])


class ClassRefineLayer(Module):
    def __init__(self, rng: SeededRng, cfg: HeadConfig):
        d = cfg.dim
        self.use_qsh = cfg.use_qsh
        self.spatial = SpatialQuery(rng, cfg)
        self.norm_sa = LayerNorm(d)
        self.self_attn = Attention(rng, d)
        self.norm_share = LayerNorm(d)
        self.share_attn = Attention(rng, d)
        self.norm_ca = LayerNorm(d)
        self.cross_attn = ModulatedCrossAttention(rng, cfg)
        self.ffn = FeedForward(rng, d, cfg.ffn_ratio)
        self.norm_out = LayerNorm(d)
        self.classifier = Linear(rng, d, cfg.num_classes)
        self.classifier.bias.data[:] = -np.log((1 - 0.01) / 0.01)

    def __call__(self, content, reg_content, anchors, memory, mem_xy, mask, scale_dim):
        pos = self.spatial(anchors)
        content = content + self_attention(self.norm_sa(content), pos, self.self_attn, mask, scale_dim)
        if self.use_qsh:
            # sharing query cross attention: class content reads the regression branch
            q = self.norm_share(content) + pos
            content = content + self.share_attn(q, reg_content + pos, reg_content, mask, scale_dim)
        content = content + self.cross_attn(self.norm_ca(content), anchors, memory, mem_xy, scale_dim)
        content = self.ffn(content)
        return content, self.classifier(self.norm_out(content))


def class_refine_layer(content, reg_content, anchors, memory, mem_xy, layer, mask=None, scale_dim=None):
    return layer(content, reg_content, anchors, memory, mem_xy, mask,
                 scale_dim or layer.norm_sa.weight.shape[0])


class DualHead(Module):
    def __init__(self, rng: SeededRng, cfg: HeadConfig):
        self.cfg = cfg
        self.anchor_layers = [AnchorRefineLayer(rng, cfg) for _ in range(cfg.layers)]
        self.class_layers = [ClassRefineLayer(rng, cfg) for _ in range(cfg.layers)]

    def __call__(self, queries: QuerySet, memory: Tensor, mem_xy: np.ndarray) -> HeadOutput:
        cfg = self.cfg
        scale_dim = cfg.dim if cfg.attn_scale == "dim" else queries.num_queries
        mask = queries.attn_mask
        reg, cls = queries.content, queries.content
        anchors = queries.anchors
        all_anchors, all_logits = [], []
        for a_layer, c_layer in zip(self.anchor_layers, self.class_layers):
            reg, anchors = a_layer(reg, anchors, memory, mem_xy, mask, scale_dim)
            shared = anchors if cfg.use_qsh else queries.anchors
            cls, logits = c_layer(cls, reg, shared, memory, mem_xy, mask, scale_dim)
            all_anchors.append(anchors)
            all_logits.append(logits)
        return HeadOutput(all_anchors, all_logits, queries.num_dn)


def dual_head_forward(queries: QuerySet, memory: Tensor, mem_xy: np.ndarray, head: DualHead) -> HeadOutput:
    return head(queries, memory, mem_xy)


# ---------------------------------------------------------------------------
# denoising queries

@dataclass
class DenoiseGroups:
    boxes: np.ndarray         # (groups * G, 4) noised cxcywh
    labels: np.ndarray        # (groups * G,) possibly flipped labels
    true_labels: np.ndarray   # (groups * G,)
    gt_index: np.ndarray      # (groups * G,) index into the ground truth
    groups: int

    def __len__(self) -> int:
        return len(self.labels)


def make_denoising_queries(gt_boxes: np.ndarray, gt_labels: np.ndarray, groups: int,
                           box_shift: float, box_scale: float, label_flip: float,
                           rng: SeededRng, num_classes: int = 4) -> DenoiseGroups:
    """Noised copies of the ground truth, ``groups`` times over.

    Centre jitter is uniform in +-box_shift * size / 2, width/height are scaled
    by a uniform factor in [1 - box_scale, 1 + box_scale], and each label is
    replaced by a uniformly chosen other class with probability label_flip.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    g = len(gt_labels)
    if g == 0 or groups == 0:
        empty = np.zeros(0, dtype=np.int64)
        return DenoiseGroups(np.zeros((0, 4)), empty, empty, empty, 0)
    boxes = np.tile(gt_boxes, (groups, 1))
    labels = np.tile(gt_labels, groups)
    n = len(labels)
    shift = rng.uniform(-1.0, 1.0, (n, 2)) * box_shift * boxes[:, 2:] / 2
    scale = 1.0 + rng.uniform(-1.0, 1.0, (n, 2)) * box_scale
    noised = np.concatenate([boxes[:, :2] + shift, boxes[:, 2:] * scale], axis=1)
    flip = rng.random(n) < label_flip
    other = rng.integers(1, num_classes, n)
    noisy_labels = np.where(flip, (labels + other) % num_classes, labels)
    if box_shift or box_scale:
        noised = clamp_anchors(noised)
    return DenoiseGroups(noised, noisy_labels, labels.copy(), np.tile(np.arange(g), groups), groups)


class DenoiseEmbedding(Module):
    """Content for denoising queries: label embedding plus a learned indicator."""

    def __init__(self, rng: SeededRng, dim: int, num_classes: int = 4):
        self.label_embed = Parameter(rng.normal(0.0, 1.0, (num_classes, dim)))
        self.indicator = Parameter(rng.normal(0.0, 1.0, (1, dim)))

    def __call__(self, dn: DenoiseGroups) -> Tensor:
        return T.take_rows(self.label_embed, dn.labels) + self.indicator


def attach_denoising(queries: QuerySet, dn: DenoiseGroups, embed: DenoiseEmbedding) -> QuerySet:
    """Prepend denoising queries and build the isolation mask."""
    if len(dn) == 0:
        return queries
    content = T.concat([embed(dn), queries.content], axis=0)
    anchors = T.concat([T.Tensor(dn.boxes), queries.anchors], axis=0)
    mask = denoise_mask(len(dn), dn.groups, queries.num_queries)
    return QuerySet(content, anchors, len(dn), dn.groups, mask)
