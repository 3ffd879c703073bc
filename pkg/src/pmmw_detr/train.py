"""Training loop and training-set evaluation."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import augment, record_to_targets
from .evaluation import Detection, EvalReport, GtBox, report
from .losses import GroundTruth
from .model import PMMWDetr
from .optim import AdamW, step_lr
from .rng import SeededRng
from .tensor import NumericError


class TrainingDiverged(NumericError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class TrainResult:
    model: PMMWDetr
    history: list = field(default_factory=list)     # per-epoch dicts
    steps: int = 0
    seconds: float = 0.0
    final_loss: float = math.nan
    report: EvalReport | None = None


LOG_KEYS = ("total", "cls", "l1", "giou", "dn_cls", "dn_l1", "dn_giou", "enc_cls", "enc_l1", "enc_giou")


def predictions_to_detections(model: PMMWDetr, samples: list, max_detections: int = 100) -> list:
    dets = []
    for image, record in samples:
        boxes, labels, scores = model.predict(image.astype(T.get_dtype()), max_detections)
        w, h = record.width, record.height
        for (cx, cy, bw, bh), c, s in zip(boxes, labels, scores):
            x1, x2 = (cx - bw / 2) * w, (cx + bw / 2) * w
            y1, y2 = (cy - bh / 2) * h, (cy + bh / 2) * h
            if x2 > x1 and y2 > y1:
                dets.append(Detection(record.image_id, int(c), (x1, y1, x2, y2), float(s)))
    return dets


def ground_truth_boxes(samples: list) -> list:
    return [GtBox(r.image_id, c, tuple(float(v) for v in b)) for _, r in samples for c, b in r.annotations]


def evaluate_model(model: PMMWDetr, samples: list, cfg: RunConfig) -> EvalReport:
    dets = predictions_to_detections(model, samples, cfg.eval.max_detections)
    return report(dets, ground_truth_boxes(samples), cfg.eval)


def _maybe_augment(image, record, ops, rng: SeededRng):
    for k, op in enumerate(ops):
        if rng.random() < 0.5:
            image, record = augment(image, record, op, rng.child(k).seed)
    return image, record


def train(cfg: RunConfig, samples: list, out_dir=None, log=None, evaluate: bool = True) -> TrainResult:
    """Optimise a fresh model on ``samples`` [(image, record)].

    Writes ``train_log.csv``, ``final.pdtr`` and ``best.pdtr`` (lowest epoch
    loss) under ``out_dir`` when given.
    """
    tc = cfg.train
    start = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    with T.precision(tc.precision):
        model = PMMWDetr(cfg.model, seed=cfg.seed)
        model.to_precision()
        opt = AdamW(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay, clip_norm=tc.clip_norm)
        root = SeededRng(cfg.seed).child(100)
        n = len(samples)
        targets = [record_to_targets(r) for _, r in samples]
        result = TrainResult(model)
        best = math.inf
        writer = None
        log_file = None
        if out is not None:
            log_file = open(out / "train_log.csv", "w", newline="")
            writer = csv.writer(log_file, lineterminator="\n")
            writer.writerow(["epoch", "steps", "lr", *LOG_KEYS, "mAP50"])
        try:
            for epoch in range(tc.epochs):
                if tc.max_steps is not None and result.steps >= tc.max_steps:
                    break
                opt.lr = step_lr(tc.lr, epoch, tc.lr_drop_epoch, tc.lr_drop_factor)
                erng = root.child(epoch)
                order = erng.permutation(n)
                sums = dict.fromkeys(LOG_KEYS, 0.0)
                seen = 0
                for b, lo in enumerate(range(0, n, tc.batch_size)):
                    if tc.max_steps is not None and result.steps >= tc.max_steps:
                        break
                    batch = order[lo:lo + tc.batch_size]
                    opt.zero_grad()
                    for i in batch:
                        brng = erng.child(b, int(i))
                        image, record = samples[i]
                        if tc.augment:
                            image, record = _maybe_augment(image, record, tc.augment, brng.child(0))
                            boxes, labels = record_to_targets(record)
                        else:
                            boxes, labels = targets[i]
                        diag = {"epoch": epoch, "step": result.steps, "image_index": int(i),
                                "batch_seed": brng.seed, "lr": opt.lr}
                        try:
                            loss = model.loss(image.astype(T.get_dtype()), GroundTruth(boxes, labels),
                                              brng.child(1))
                        except NumericError as err:
                            diag["error"] = str(err)
                            raise TrainingDiverged(f"{err} at epoch {epoch}, step {result.steps}", diag) from err
                        if not math.isfinite(loss.parts["total"]):
                            diag["parts"] = loss.parts
                            raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {result.steps}", diag)
                        (loss.total * (1.0 / len(batch))).backward()
                        for k in LOG_KEYS:
                            sums[k] += loss.parts.get(k, 0.0)
                        seen += 1
                    opt.step()
                    result.steps += 1
                row = {k: v / max(seen, 1) for k, v in sums.items()}
                row.update(epoch=epoch, steps=result.steps, lr=opt.lr, mAP50=math.nan)
                last = epoch == tc.epochs - 1 or (tc.max_steps is not None and result.steps >= tc.max_steps)
                if tc.eval_every and (epoch + 1) % tc.eval_every == 0 and not last:
                    row["mAP50"] = evaluate_model(model, samples, cfg).metrics.get("mAP50", math.nan)
                result.history.append(row)
                result.final_loss = row["total"]
                if out is not None:
                    if row["total"] < best:
                        best = row["total"]
                        save_checkpoint(model, out / "best.pdtr")
                    writer.writerow(_csv_row(row))
                    log_file.flush()
                if log is not None:
                    log(f"epoch {epoch} steps {result.steps} loss {row['total']:.4f}")
            if evaluate:
                result.report = evaluate_model(model, samples, cfg)
                if result.history:
                    result.history[-1]["mAP50"] = result.report.metrics.get("mAP50", math.nan)
            if out is not None:
                if result.history:
                    log_file.seek(0)
                    log_file.truncate()
                    writer.writerow(["epoch", "steps", "lr", *LOG_KEYS, "mAP50"])
                    for row in result.history:
                        writer.writerow(_csv_row(row))
                save_checkpoint(model, out / "final.pdtr")
        finally:
            if log_file is not None:
                log_file.close()
    result.seconds = time.perf_counter() - start
    return result


def _csv_row(row: dict) -> list:
    fmt = lambda v: "nan" if isinstance(v, float) and math.isnan(v) else f"{v:.6f}"
    return [row["epoch"], row["steps"], f"{row['lr']:.3g}", *(fmt(row[k]) for k in LOG_KEYS), fmt(row["mAP50"])]


def write_diagnostic(path, err: TrainingDiverged) -> None:
    Path(path).write_text(json.dumps(err.diagnostic, indent=1, sort_keys=True, default=float) + "\n")


def loss_history(history: list, key: str = "total") -> np.ndarray:
    return np.array([row[key] for row in history], dtype=np.float64)
