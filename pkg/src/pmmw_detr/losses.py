"""Set-prediction supervision: matching cost, focal/L1/GIoU losses, denoising loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .boxes import cxcywh_to_xyxy, giou_tensor, pairwise_giou
from .head import DenoiseGroups, HeadOutput
from .matching import Assignment, hungarian_match
from .tensor import Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
COST_WEIGHTS = (2.0, 5.0, 2.0)    # class, L1, GIoU
LOSS_WEIGHTS = (1.0, 5.0, 2.0)


@dataclass
class GroundTruth:
    boxes: np.ndarray     # (G, 4) normalised cxcywh
    labels: np.ndarray    # (G,) in 0..3

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError("boxes and labels differ in length")
        if np.any((self.labels < 0) | (self.labels > 3)):
            raise ValueError("labels must be in 0..3")

    def __len__(self) -> int:
        return len(self.labels)

    def permuted(self, order) -> "GroundTruth":
        return GroundTruth(self.boxes[order], self.labels[order])


@dataclass
class LossBreakdown:
    total: Tensor
    parts: dict = field(default_factory=dict)

    def value(self, key: str) -> float:
        return float(self.parts[key])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def match_cost(logits: np.ndarray, boxes: np.ndarray, gt: GroundTruth,
               weights=COST_WEIGHTS) -> np.ndarray:
    """(Q, G) cost: focal-shaped class term + L1 on cxcywh + (1 - GIoU)."""
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    p = _sigmoid(logits[:, gt.labels])
    eps = 1e-8
    pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * -np.log(p + eps)
    neg = (1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * -np.log(1 - p + eps)
    l1 = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(-1)
    g = pairwise_giou(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt.boxes))
    wc, wl, wg = weights
    return wc * (pos - neg) + wl * l1 + wg * (1.0 - g)


def focal_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Summed sigmoid focal loss against a 0/1 target matrix."""
    t = np.asarray(targets, dtype=T.get_dtype())
    p = T.sigmoid(logits)
    ce = -(T.log_sigmoid(logits) * t + T.log_sigmoid(-logits) * (1.0 - t))
    p_t = p * t + (1.0 - p) * (1.0 - t)
    alpha_t = FOCAL_ALPHA * t + (1.0 - FOCAL_ALPHA) * (1.0 - t)
    return (T.Tensor(alpha_t) * (1.0 - p_t) ** FOCAL_GAMMA * ce).sum()


def _one_hot(n: int, num_classes: int, rows: np.ndarray, labels: np.ndarray) -> np.ndarray:
    t = np.zeros((n, num_classes))
    if len(rows):
        t[rows, labels] = 1.0
    return t


def _components(logits: Tensor, boxes: Tensor, rows: np.ndarray, gt_boxes: np.ndarray,
                gt_labels: np.ndarray, norm: float, weights=LOSS_WEIGHTS):
    n, classes = logits.shape
    cls = focal_loss(logits, _one_hot(n, classes, rows, gt_labels)) * (1.0 / norm)
    if len(rows) == 0:
        return cls * weights[0], {"cls": cls.item(), "l1": 0.0, "giou": 0.0}
    pred = T.take_rows(boxes, rows)
    l1 = T.abs_(pred - T.Tensor(gt_boxes)).sum() * (1.0 / norm)
    gi = (1.0 - giou_tensor(pred, gt_boxes)).sum() * (1.0 / norm)
    total = cls * weights[0] + l1 * weights[1] + gi * weights[2]
    return total, {"cls": cls.item(), "l1": l1.item(), "giou": gi.item()}


def match_predictions(logits: Tensor, boxes: Tensor, gt: GroundTruth) -> Assignment:
    if len(gt) == 0:
        return Assignment([], list(range(logits.shape[0])))
    return hungarian_match(match_cost(logits.data, boxes.data, gt))


def set_loss(output: HeadOutput, gt: GroundTruth, assignment: Assignment | None = None) -> LossBreakdown:
    """Final-layer loss plus auxiliary copies per intermediate layer, one shared assignment."""
    q0 = output.num_dn
    logits = [lg[q0:] if q0 else lg for lg in output.logits]
    boxes = [b[q0:] if q0 else b for b in output.anchors]
    if assignment is None:
        assignment = match_predictions(logits[-1], boxes[-1], gt)
    rows = assignment.pred_indices
    gidx = assignment.gt_indices
    norm = max(1.0, float(len(gt)))
    total, parts = None, {}
    for layer, (lg, bx) in enumerate(zip(logits, boxes)):
        t, p = _components(lg, bx, rows, gt.boxes[gidx], gt.labels[gidx], norm)
        total = t if total is None else total + t
        suffix = "" if layer == len(logits) - 1 else f"_aux{layer}"
        for key, val in p.items():
            parts[key + suffix] = val
    return LossBreakdown(total, parts)


def denoising_loss(output: HeadOutput, dn: DenoiseGroups, gt: GroundTruth) -> LossBreakdown:
    """Same components with the fixed query -> gt correspondence, mean over denoising queries."""
    n = len(dn)
    if n == 0:
        return LossBreakdown(T.Tensor(0.0), {"dn_cls": 0.0, "dn_l1": 0.0, "dn_giou": 0.0})
    rows = np.arange(n)
    total, parts = None, {}
    for layer, (lg, bx) in enumerate(zip(output.logits, output.anchors)):
        t, p = _components(lg[:n], bx[:n], rows, gt.boxes[dn.gt_index], dn.true_labels, float(n))
        total = t if total is None else total + t
        if layer == len(output.logits) - 1:
            parts = {"dn_" + k: v for k, v in p.items()}
    return LossBreakdown(total, parts)


def proposal_loss(logits: Tensor, anchors: Tensor, gt: GroundTruth) -> LossBreakdown:
    """Matched set loss over every encoder token's class/anchor prediction."""
    assignment = match_predictions(logits, anchors, gt)
    t, p = _components(logits, anchors, assignment.pred_indices, gt.boxes[assignment.gt_indices],
                       gt.labels[assignment.gt_indices], max(1.0, float(len(gt))))
    return LossBreakdown(t, {"enc_" + k: v for k, v in p.items()})
