"""Box containers and IoU/GIoU, in numpy and as differentiable ops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

MIN_SIZE = 1e-4


@dataclass(frozen=True)
class AnchorBox:
    """Normalised (cx, cy, w, h)."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(0.0 < v < 1.0 for v in vals):
            raise ValueError(f"anchor outside (0, 1)^4: {vals}")
        if self.w <= MIN_SIZE or self.h <= MIN_SIZE:
            raise ValueError("anchor width/height too small")

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h])

    def corners(self) -> np.ndarray:
        return cxcywh_to_xyxy(self.as_array())


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], -1)


def clamp_anchors(b: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Clamp (cx, cy, w, h) into the valid anchor range."""
    b = np.array(b, dtype=np.float64)
    b[..., :2] = np.clip(b[..., :2], eps, 1 - eps)
    b[..., 2:] = np.clip(b[..., 2:], max(eps, 2 * MIN_SIZE), 1 - eps)
    return b


def box_area(b: np.ndarray) -> np.ndarray:
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between corner boxes a (n, 4) and b (m, 4) -> (n, m)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iou = pairwise_iou(a, b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    hlt = np.minimum(a[:, None, :2], b[None, :, :2])
    hrb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    hull = np.prod(hrb - hlt, axis=-1)
    return iou - (hull - union) / hull


def iou(a, b) -> float:
    """IoU of two boxes given as AnchorBox or corner arrays."""
    a = a.corners() if isinstance(a, AnchorBox) else np.asarray(a, dtype=np.float64)
    b = b.corners() if isinstance(b, AnchorBox) else np.asarray(b, dtype=np.float64)
    return float(pairwise_iou(a, b)[0, 0])


def giou(a, b) -> float:
    a = a.corners() if isinstance(a, AnchorBox) else np.asarray(a, dtype=np.float64)
    b = b.corners() if isinstance(b, AnchorBox) else np.asarray(b, dtype=np.float64)
    return float(pairwise_giou(a, b)[0, 0])


def giou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise GIoU between predicted (n, 4) cxcywh tensors and target cxcywh boxes."""
    target = np.asarray(target, dtype=T.get_dtype())
    half = pred[:, 2:] * 0.5
    p_lt = pred[:, :2] - half
    p_rb = pred[:, :2] + half
    t_lt = T.Tensor(target[:, :2] - target[:, 2:] / 2)
    t_rb = T.Tensor(target[:, :2] + target[:, 2:] / 2)
    wh = T.clip(T.minimum(p_rb, t_rb) - T.maximum(p_lt, t_lt), 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    area_p = pred[:, 2] * pred[:, 3]
    area_t = T.Tensor(target[:, 2] * target[:, 3])
    union = area_p + area_t - inter
    hull_wh = T.maximum(p_rb, t_rb) - T.minimum(p_lt, t_lt)
    hull = hull_wh[:, 0] * hull_wh[:, 1]
    return inter / union - (hull - union) / hull
