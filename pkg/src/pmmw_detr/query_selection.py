"""Decoder query initialisation: top-K encoder anchors plus static content queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ConfigError, FeatureMapSet
from .nn import Linear, MLP, Module
from .rng import SeededRng
from .tensor import Parameter, Tensor


@dataclass
class ProposalSet:
    anchors: np.ndarray   # (K, 4) cxcywh
    scores: np.ndarray    # (K,) non-increasing
    indices: np.ndarray   # (K,) flattened token index


@dataclass
class QuerySet:
    """Decoder queries; denoising queries (if any) occupy the first ``num_dn`` rows."""

    content: Tensor
    anchors: Tensor
    num_dn: int = 0
    dn_groups: int = 0
    attn_mask: np.ndarray | None = None   # (Q, Q) True where attention is blocked

    def __post_init__(self):
        if self.content.shape[0] != self.anchors.shape[0]:
            raise ValueError("content and anchors differ in length")

    @property
    def num_queries(self) -> int:
        return self.content.shape[0]

    @property
    def is_denoise(self) -> np.ndarray:
        flags = np.zeros(self.num_queries, dtype=bool)
        flags[:self.num_dn] = True
        return flags


def base_anchors(shapes: list) -> np.ndarray:
    """Cell-centre anchors per token, side 0.05 * 2^(level-1)."""
    out = []
    for level, (h, w) in enumerate(shapes):
        ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
        side = np.full(h * w, 0.05 * 2 ** level)
        out.append(np.stack([xs.ravel(), ys.ravel(), side, side], -1))
    return np.concatenate(out, 0)


class ProposalHead(Module):
    """Class embedding and anchor embedding applied to every encoder token."""

    def __init__(self, rng: SeededRng, dim: int, num_classes: int = 4):
        self.class_embed = Linear(rng, dim, num_classes)
        self.class_embed.bias.data[:] = -np.log((1 - 0.01) / 0.01)
        self.anchor_embed = MLP(rng, [dim, dim, 4], last_init="zeros")

    def __call__(self, maps: FeatureMapSet):
        return embed_scores_and_anchors(maps, self)


def embed_scores_and_anchors(maps: FeatureMapSet, head: ProposalHead):
    """(class logits (T, classes), anchors (T, 4)) for all flattened tokens."""
    dim = maps.maps[0].shape[-1]
    tokens = T.concat([m.reshape(-1, dim) for m in maps.maps], axis=0)
    base = base_anchors([m.shape[:2] for m in maps.maps])
    logits = head.class_embed(tokens)
    anchors = T.sigmoid(T.inverse_sigmoid(T.Tensor(base)) + head.anchor_embed(tokens))
    return logits, anchors


def token_scores(logits: np.ndarray) -> np.ndarray:
    """Max over classes of the sigmoid class probability."""
    return 1.0 / (1.0 + np.exp(-np.max(logits, axis=-1)))


def select_topk(scores: np.ndarray, anchors: np.ndarray, k: int) -> ProposalSet:
    """Highest-scoring ``k`` tokens; ties go to the lower token index."""
    scores = np.asarray(scores)
    if k > len(scores):
        raise ConfigError(f"K={k} exceeds the {len(scores)} available tokens")
    order = np.argsort(-scores, kind="stable")[:k]
    return ProposalSet(np.asarray(anchors)[order].copy(), scores[order].copy(), order)


def init_queries(proposals: ProposalSet | None, content: Parameter,
                 static_anchor_logits: Parameter | None = None) -> QuerySet:
    """Static learnable content queries with dynamic (detached) or static anchors."""
    if proposals is not None:
        anchors = T.Tensor(proposals.anchors)
    else:
        anchors = T.sigmoid(static_anchor_logits)
    return QuerySet(content * 1.0, anchors)
