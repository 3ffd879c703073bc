"""Average precision / recall for box detections.

Matching is greedy per image and class in descending confidence.  AP uses
all-point interpolation: the area under the precision envelope
``p_interp(r) = max{p(r') : r' >= r}`` over the unique recall levels, starting
from recall 0.  Size-bucket metrics follow COCO ignore semantics: ground truth
outside the bucket is ignored, detections matched to ignored ground truth are
ignored, and unmatched detections whose own area is outside the bucket are
ignored.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NUM_CLASSES = 4


class EvalInputError(ValueError):
    """Malformed detections or ground truth."""


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    box: tuple          # (x1, y1, x2, y2) pixels
    confidence: float

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not math.isfinite(self.confidence):
            raise EvalInputError("confidence must be finite")
        if not (x1 < x2 and y1 < y2):
            raise EvalInputError(f"box {self.box} is not well-ordered")


@dataclass(frozen=True)
class GtBox:
    image_id: int
    class_id: int
    box: tuple


def default_thresholds() -> tuple:
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class EvalConfig:
    iou_thresholds: tuple = field(default_factory=default_thresholds)
    max_detections: int = 100
    small_area: float = 32.0 ** 2
    medium_area: float = 96.0 ** 2
    interpolation: str = "all_point"     # or "101_point"
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        t = list(self.iou_thresholds)
        if not t or any(not 0 < x <= 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be ascending in (0, 1]")
        if self.interpolation not in ("all_point", "101_point"):
            raise ValueError("interpolation must be 'all_point' or '101_point'")

    def buckets(self) -> dict:
        return {"all": (0.0, math.inf), "small": (0.0, self.small_area),
                "medium": (self.small_area, self.medium_area)}


@dataclass
class EvalReport:
    metrics: dict                  # mAP, mAP50, mAP75, mAP_S, mAP_M, mAR100 when defined
    class_ap: dict                 # (class, threshold) -> AP or nan when excluded
    curves: dict                   # (class, threshold) -> [(recall, precision)]

    def __getitem__(self, key):
        return self.metrics[key]


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def box_area(b) -> float:
    return (b[2] - b[0]) * (b[3] - b[1])


def sort_by_confidence(dets: list) -> list:
    """Descending confidence; ties keep the original order."""
    return sorted(dets, key=lambda d: -d.confidence)


def greedy_match(dets: list, gts: list, t: float, gt_ignore=None):
    """Per-detection flags for one image and class.

    ``dets`` must already be in descending confidence.  Returns
    ``(flags, det_matched_ignored)`` where flags are True for TP.  Each
    detection takes the unmatched GT with highest IoU >= t (lower GT index on
    ties), preferring GTs that are not ignored.
    """
    ignore = list(gt_ignore) if gt_ignore is not None else [False] * len(gts)
    used = [False] * len(gts)
    flags, hit_ignored = [], []
    for d in dets:
        ious = [box_iou(d.box, g.box) for g in gts]
        chosen = -1
        for want_ignored in (False, True):
            best = -1.0
            for j, v in enumerate(ious):
                if used[j] or ignore[j] != want_ignored or v < t:
                    continue
                if v > best:
                    best, chosen = v, j
            if chosen >= 0:
                break
        if chosen >= 0:
            used[chosen] = True
        flags.append(chosen >= 0 and not ignore[chosen])
        hit_ignored.append(chosen >= 0 and ignore[chosen])
    return flags, hit_ignored


def pr_curve(flags, confidences, num_gt: int) -> list:
    """(recall, precision) after each detection in descending confidence order."""
    order = sorted(range(len(flags)), key=lambda i: -confidences[i])
    tp = fp = 0
    out = []
    for i in order:
        if flags[i]:
            tp += 1
        else:
            fp += 1
        recall = tp / num_gt if num_gt > 0 else 0.0
        out.append((recall, tp / (tp + fp)))
    return out


def ap_interpolated(curve: list, mode: str = "all_point") -> float:
    if not curve:
        return 0.0
    r = np.array([c[0] for c in curve], dtype=np.float64)
    p = np.array([c[1] for c in curve], dtype=np.float64)
    # precision envelope: max precision at recall >= r_i
    env = np.maximum.accumulate(p[np.argsort(r, kind="stable")][::-1])[::-1]
    rs = np.sort(r, kind="stable")
    if mode == "101_point":
        total = 0.0
        for level in np.linspace(0.0, 1.0, 101):
            k = np.searchsorted(rs, level, side="left")
            total += env[k] if k < len(rs) else 0.0
        return total / 101.0
    levels, first = np.unique(rs, return_index=True)
    prev = np.concatenate([[0.0], levels[:-1]])
    return float(np.sum((levels - prev) * env[first]))


def ar_at(dets: list, gts: list, thresholds, cap: int = 100) -> float:
    """Recall averaged over thresholds using the top ``cap`` detections per image."""
    if not gts:
        return 0.0
    dets = cap_detections(dets, cap)
    total = 0.0
    for t in thresholds:
        tp = 0
        for (img, cls), (ds, gs) in _group(dets, gts).items():
            flags, _ = greedy_match(ds, gs, t)
            tp += sum(flags)
        total += tp / len(gts)
    return total / len(thresholds)


def cap_detections(dets: list, cap: int) -> list:
    by_image = {}
    for d in dets:
        by_image.setdefault(d.image_id, []).append(d)
    out = []
    for img in sorted(by_image):
        out.extend(sort_by_confidence(by_image[img])[:cap])
    return out


def _group(dets: list, gts: list) -> dict:
    groups = {}
    for g in gts:
        groups.setdefault((g.image_id, g.class_id), ([], []))[1].append(g)
    for d in dets:
        groups.setdefault((d.image_id, d.class_id), ([], []))[0].append(d)
    for key, (ds, gs) in groups.items():
        groups[key] = (sort_by_confidence(ds), gs)
    return groups


def _class_threshold(groups: dict, cls: int, t: float, lo: float, hi: float):
    """(flags, confidences, num_gt) pooled over images for one bucket."""
    flags, confs, num_gt = [], [], 0
    for (img, c) in sorted(k for k in groups if k[1] == cls):
        ds, gs = groups[(img, c)]
        ignore = [not (lo <= box_area(g.box) < hi) for g in gs]
        order = sorted(range(len(gs)), key=lambda j: ignore[j])   # non-ignored first, stable
        gs_sorted = [gs[j] for j in order]
        ig_sorted = [ignore[j] for j in order]
        f, hit_ignored = greedy_match(ds, gs_sorted, t, ig_sorted)
        num_gt += sum(not x for x in ignore)
        for d, tp, hi_ in zip(ds, f, hit_ignored):
            if hi_ or (not tp and not (lo <= box_area(d.box) < hi)):
                continue
            flags.append(tp)
            confs.append(d.confidence)
    return flags, confs, num_gt


def _validate(dets, gts, num_classes):
    for x in list(dets) + list(gts):
        if not 0 <= x.class_id < num_classes:
            raise EvalInputError(f"unknown class id {x.class_id}")


def _mean_ap(groups, cfg: EvalConfig, thresholds, bucket, store=None, curves=None) -> float:
    lo, hi = cfg.buckets()[bucket]
    class_means = []
    for cls in range(cfg.num_classes):
        aps = []
        for t in thresholds:
            flags, confs, num_gt = _class_threshold(groups, cls, t, lo, hi)
            if num_gt == 0 and not flags:
                ap = math.nan
            elif num_gt == 0:
                ap = 0.0
            else:
                curve = pr_curve(flags, confs, num_gt)
                ap = ap_interpolated(curve, cfg.interpolation)
                if curves is not None:
                    curves[(cls, t)] = curve
            if store is not None:
                store[(cls, t)] = ap
            aps.append(ap)
        valid = [a for a in aps if not math.isnan(a)]
        if valid:
            class_means.append(sum(valid) / len(valid))
    return sum(class_means) / len(class_means) if class_means else None


def _mean_ar(groups, cfg: EvalConfig) -> float:
    per_class = []
    for cls in range(cfg.num_classes):
        recalls = []
        for t in cfg.iou_thresholds:
            flags, _, num_gt = _class_threshold(groups, cls, t, 0.0, math.inf)
            if num_gt:
                recalls.append(sum(flags) / num_gt)
        if recalls:
            per_class.append(sum(recalls) / len(recalls))
    return sum(per_class) / len(per_class) if per_class else None


def report(dets: list, gts: list, cfg: EvalConfig | None = None) -> EvalReport:
    cfg = cfg or EvalConfig()
    _validate(dets, gts, cfg.num_classes)
    groups = _group(cap_detections(dets, cfg.max_detections), gts)
    class_ap, curves = {}, {}
    metrics = {"mAP": _mean_ap(groups, cfg, cfg.iou_thresholds, "all", class_ap, curves)}
    for name, t in (("mAP50", 0.5), ("mAP75", 0.75)):
        metrics[name] = _mean_ap(groups, cfg, (t,), "all")
    metrics["mAP_S"] = _mean_ap(groups, cfg, cfg.iou_thresholds, "small")
    metrics["mAP_M"] = _mean_ap(groups, cfg, cfg.iou_thresholds, "medium")
    metrics["mAR100"] = _mean_ar(groups, cfg)
    # a metric with no ground truth and no detections in any class is undefined and omitted
    metrics = {k: v for k, v in metrics.items() if v is not None}
    return EvalReport(metrics, class_ap, curves)


def write_report(rep: EvalReport, path) -> None:
    """Flat ``key=value`` text, metrics first, then per-class AP per threshold."""
    lines = [f"{k}={v:.12f}" for k, v in rep.metrics.items()]
    for (cls, t), ap in sorted(rep.class_ap.items()):
        lines.append(f"AP_class{cls}_t{t:.2f}={'nan' if math.isnan(ap) else f'{ap:.12f}'}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition("=")
        out[key] = float(value)
    return out


def write_pr_csv(rep: EvalReport, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["class", "threshold", "rank", "recall", "precision"])
        for (cls, t), curve in sorted(rep.curves.items()):
            for rank, (r, p) in enumerate(curve, start=1):
                w.writerow([cls, f"{t:.2f}", rank, f"{r:.12f}", f"{p:.12f}"])
