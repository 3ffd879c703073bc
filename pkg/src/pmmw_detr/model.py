"""Full detector: backbone -> deformable neck -> query selection -> dual head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import Backbone, DcftConfig, plain_config
from .deformable import DeformConfig, Neck
from .head import (DenoiseEmbedding, DenoiseGroups, DualHead, HeadConfig, HeadOutput,
                   attach_denoising, make_denoising_queries)
from .losses import GroundTruth, LossBreakdown, denoising_loss, proposal_loss, set_loss
from .nn import Module
from .query_selection import ProposalHead, ProposalSet, init_queries, select_topk, token_scores
from .rng import SeededRng
from .tensor import Parameter


@dataclass
class ModelConfig:
    backbone: DcftConfig = field(default_factory=DcftConfig)
    deform: DeformConfig = field(default_factory=DeformConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    backbone_kind: str = "dcft"      # "dcft" or "plain"
    use_qse: bool = True
    dn_groups: int = 3
    dn_box_shift: float = 0.4
    dn_box_scale: float = 0.4
    dn_label_flip: float = 0.4

    def __post_init__(self):
        if self.backbone_kind not in ("dcft", "plain"):
            raise ValueError("backbone must be 'dcft' or 'plain'")
        if self.head.dim != self.deform.dim:
            raise ValueError("head and neck dims must match")


@dataclass
class ForwardResult:
    head: HeadOutput
    enc_logits: T.Tensor
    enc_anchors: T.Tensor
    proposals: ProposalSet | None
    dn: DenoiseGroups | None


def memory_positions(h: int, w: int) -> np.ndarray:
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], -1)


class PMMWDetr(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = SeededRng(seed)
        bcfg = cfg.backbone if cfg.backbone_kind == "dcft" else plain_config(cfg.backbone)
        d = cfg.head.dim
        self.backbone = Backbone(rng.child(1), bcfg)
        self.neck = Neck(rng.child(2), bcfg.channels[1:], cfg.deform)
        self.proposals = ProposalHead(rng.child(3), d, cfg.head.num_classes)
        qrng = rng.child(4)
        self.content_queries = Parameter(qrng.normal(0.0, 1.0, (cfg.head.num_queries, d)))
        self.static_anchors = None
        if not cfg.use_qse:
            init = np.concatenate([qrng.uniform(0.1, 0.9, (cfg.head.num_queries, 2)),
                                   np.full((cfg.head.num_queries, 2), 0.1)], axis=1)
            self.static_anchors = Parameter(np.log(init / (1 - init)))
        self.denoise = DenoiseEmbedding(rng.child(5), d, cfg.head.num_classes)
        self.head = DualHead(rng.child(6), cfg.head)
        self.assign_names()

    def forward(self, image: np.ndarray, gt: GroundTruth | None = None,
                rng: SeededRng | None = None) -> ForwardResult:
        feats = self.backbone(image)
        memory = self.neck(feats)
        enc_logits, enc_anchors = self.proposals(memory)
        proposals = None
        if self.cfg.use_qse:
            scores = token_scores(enc_logits.data)
            proposals = select_topk(scores, enc_anchors.data, self.cfg.head.num_queries)
        queries = init_queries(proposals, self.content_queries, self.static_anchors)
        dn = None
        if gt is not None and rng is not None and self.cfg.dn_groups and len(gt):
            c = self.cfg
            dn = make_denoising_queries(gt.boxes, gt.labels, c.dn_groups, c.dn_box_shift,
                                        c.dn_box_scale, c.dn_label_flip, rng, c.head.num_classes)
            queries = attach_denoising(queries, dn, self.denoise)
        fine = memory.maps[0]
        h, w, _ = fine.shape
        out = self.head(queries, fine.reshape(h * w, -1), memory_positions(h, w))
        return ForwardResult(out, enc_logits, enc_anchors, proposals, dn)

    def loss(self, image: np.ndarray, gt: GroundTruth, rng: SeededRng) -> LossBreakdown:
        res = self.forward(image, gt, rng)
        main = set_loss(res.head, gt)
        total = main.total
        parts = dict(main.parts)
        enc = proposal_loss(res.enc_logits, res.enc_anchors, gt)
        total = total + enc.total
        parts.update(enc.parts)
        if res.dn is not None:
            dn = denoising_loss(res.head, res.dn, gt)
            total = total + dn.total
            parts.update(dn.parts)
        parts["total"] = total.item()
        return LossBreakdown(total, parts)

    def predict(self, image: np.ndarray, max_detections: int = 100):
        """(boxes cxcywh (n, 4), labels (n,), scores (n,)) over every query/class pair."""
        with T.no_grad():
            res = self.forward(image)
        probs = 1.0 / (1.0 + np.exp(-res.head.class_logits.data.astype(np.float64)))
        boxes = res.head.boxes.data.astype(np.float64)
        q, c = probs.shape
        flat = probs.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:max_detections]
        return boxes[order // c], order % c, flat[order]
