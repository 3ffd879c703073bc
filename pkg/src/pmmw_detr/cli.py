"""Command-line entry point: synth | train | eval | gradcheck | bench."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .backbone import (ConfigError, DcftConfig, complexity_count, instrumented_macs, swin_complexity,
                       vit_complexity)
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigFileError, RunConfig, load_config, with_overrides
from .data import (CLASS_NAMES, DatasetFormatError, PlacementError, draw_boxes, load_dataset,
                   save_dataset, synth_dataset, synth_scene, write_pgm_u8)
from .evaluation import Detection, EvalInputError, report, write_pr_csv, write_report
from .rng import SeededRng
from .tensor import NumericError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def worker_count() -> int:
    raw = os.environ.get("PDTR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"PDTR_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise UsageError("PDTR_THREADS must be at least 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--profile", choices=("desk", "paper"), default="desk")
    common.add_argument("--seed", type=int)
    common.add_argument("--use-qse", type=parse_bool, metavar="BOOL")
    common.add_argument("--use-qsh", type=parse_bool, metavar="BOOL")
    common.add_argument("--backbone", choices=("dcft", "plain"))
    common.add_argument("--out", type=Path, default=Path("."))

    parser = _Parser(prog="pmmw-detr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int)

    p = sub.add_parser("train", parents=[common], help="train and evaluate on the training set")
    p.add_argument("--data", type=Path, help="dataset directory (default: synthesise from the config)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a detection file")
    p.add_argument("--data", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", type=Path)
    group.add_argument("--detections", type=Path, help="JSON list of {image_id, category_id, bbox, score}")
    p.add_argument("--vis-threshold", type=float, default=0.3)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--fault-scale", type=float, help=argparse.SUPPRESS)

    sub.add_parser("bench", parents=[common], help="attention complexity accounting")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.profile)
    return with_overrides(cfg, seed=args.seed, use_qse=args.use_qse, use_qsh=args.use_qsh,
                          backbone=args.backbone)


# ---------------------------------------------------------------------------
# synth

def _scene_job(job):
    spec, seed, index = job
    return synth_scene(spec, seed, index)


def synthesize(cfg: RunConfig, count: int, workers: int = 1) -> list:
    if workers <= 1 or count < 2:
        return synth_dataset(cfg.data.scene, count, cfg.seed)
    # same per-index seeds as synth_dataset; redraws happen serially on failure
    base = SeededRng(cfg.seed)
    jobs = [(cfg.data.scene, base.child(i).seed, i) for i in range(count)]
    out = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_scene_job, j) for j in jobs]
        for i, fut in enumerate(futures):
            try:
                out.append(fut.result())
            except PlacementError:
                out.append(synth_dataset_entry(cfg, i))
    return out


def synth_dataset_entry(cfg: RunConfig, index: int):
    base = SeededRng(cfg.seed)
    for attempt in range(1, 10):
        try:
            return synth_scene(cfg.data.scene, base.child(index, attempt).seed, index)
        except PlacementError:
            continue
    raise PlacementError(f"scene {index} could not be placed")


def cmd_synth(args, cfg: RunConfig) -> int:
    count = cfg.data.count if args.count is None else args.count
    if count < 0:
        raise UsageError("--count must be non-negative")
    samples = synthesize(cfg, count, worker_count())
    save_dataset(args.out, samples)
    per_class = np.zeros(len(CLASS_NAMES), dtype=int)
    for _, r in samples:
        for c, _ in r.annotations:
            per_class[c] += 1
    print(f"images={count}")
    print(f"objects={int(per_class.sum())}")
    for name, n in zip(CLASS_NAMES, per_class):
        print(f"objects_{name}={int(n)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval

def _write_eval_outputs(rep, out: Path) -> None:
    from .plots import plot_pr_curves

    write_report(rep, out / "report.txt")
    write_pr_csv(rep, out / "pr_curves.csv")
    plot_pr_curves(rep.curves, out / "pr_curves.png")


def _print_metrics(metrics: dict) -> None:
    for k, v in metrics.items():
        print(f"{k}={v:.6f}")


def cmd_train(args, cfg: RunConfig) -> int:
    from .plots import plot_loss_curve
    from .train import TrainingDiverged, train, write_diagnostic

    tc = cfg.train
    if args.epochs is not None:
        tc = dataclasses.replace(tc, epochs=args.epochs)
    if args.max_steps is not None:
        tc = dataclasses.replace(tc, max_steps=args.max_steps)
    cfg = dataclasses.replace(cfg, train=tc)
    samples = load_dataset(args.data) if args.data else synthesize(cfg, cfg.data.count, worker_count())
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    try:
        result = train(cfg, samples, out)
    except TrainingDiverged as err:
        write_diagnostic(out / "diagnostic.json", err)
        print(f"error: {err}; diagnostic written to {out / 'diagnostic.json'}", file=sys.stderr)
        return EXIT_NUMERIC
    plot_loss_curve(result.history, out / "loss_curve.png")
    _write_eval_outputs(result.report, out)
    print(f"steps={result.steps}")
    print(f"final_loss={result.final_loss:.6f}")
    _print_metrics(result.report.metrics)
    return EXIT_OK


def _read_detections(path: Path) -> list:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    dets = []
    try:
        for d in doc:
            x, y, w, h = d["bbox"]
            dets.append(Detection(int(d["image_id"]), int(d["category_id"]), (x, y, x + w, y + h),
                                  float(d["score"])))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: malformed detection ({exc})") from exc
    return dets


def cmd_eval(args, cfg: RunConfig) -> int:
    from . import tensor as T
    from .model import PMMWDetr
    from .train import ground_truth_boxes, predictions_to_detections

    samples = load_dataset(args.data)
    if args.checkpoint is not None:
        with T.precision(cfg.train.precision):
            model = PMMWDetr(cfg.model, seed=cfg.seed)
            model.to_precision()
            load_checkpoint(model, args.checkpoint)
            dets = predictions_to_detections(model, samples, cfg.eval.max_detections)
    else:
        dets = _read_detections(args.detections)
    rep = report(dets, ground_truth_boxes(samples), cfg.eval)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    _write_eval_outputs(rep, out)
    vis = out / "vis"
    vis.mkdir(exist_ok=True)
    for image, record in samples:
        boxes = [d.box for d in dets if d.image_id == record.image_id and d.confidence >= args.vis_threshold]
        write_pgm_u8(vis / record.file, draw_boxes(image, boxes))
    _print_metrics(rep.metrics)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck / bench

def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .verify import TOLERANCE, run_gradchecks

    rows = run_gradchecks(seeds=range(args.seeds), fault_scale=args.fault_scale)
    # timings go to stderr so stdout stays byte-reproducible
    lines = ["component,seed,max_rel_error,status"]
    for r in rows:
        lines.append(f"{r.component},{r.seed},{r.max_rel_error:.3e},{'pass' if r.passed else 'FAIL'}")
    text = "\n".join(lines)
    print(text)
    worst = max(r.max_rel_error for r in rows)
    failed = [r for r in rows if not r.passed]
    print(f"worst={worst:.3e} tolerance={TOLERANCE:.0e} failed={len(failed)}")
    print(f"seconds={sum(r.seconds for r in rows):.1f}", file=sys.stderr)
    if args.out != Path("."):
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.csv").write_text(text + "\n")
    return EXIT_VERIFY if failed else EXIT_OK


REFERENCE_BENCH = dict(window=7, pool_sizes=(1, 3, 5, 7), region_sizes=(7, 3, 3, 3), height=56, width=56,
                       channels=96)


def bench_rows(cfg: RunConfig) -> list:
    """(label, H, W, c, window, formula, swin, vit, instrumented) rows."""
    ref = REFERENCE_BENCH
    ref_cfg = DcftConfig(window=ref["window"], pool_sizes=ref["pool_sizes"], region_sizes=ref["region_sizes"])
    desk = cfg.model.backbone
    # the finest backbone stage that feeds the neck: stride 8 of the configured image size
    side = cfg.data.scene.size // 8
    rows = []
    for label, bcfg, h, w, c in (("reference", ref_cfg, ref["height"], ref["width"], ref["channels"]),
                                 ("config", desk, side, side, desk.channels[1])):
        formula = complexity_count(bcfg.pool_sizes, h, w, c)
        swin = swin_complexity(bcfg.window, h, w, c)
        vit = vit_complexity(h, w, c)
        measured = instrumented_macs(bcfg, h, w, c, SeededRng(cfg.seed))
        rows.append((label, h, w, c, bcfg.window, formula, swin, vit, measured))
    return rows


def cmd_bench(args, cfg: RunConfig) -> int:
    rows = bench_rows(cfg)
    print("config,H,W,c,window,dcft_formula,swin_formula,vit_formula,instrumented,ratio")
    ok = True
    for label, h, w, c, win, formula, swin, vit, measured in rows:
        ratio = measured / formula
        ok &= 1.0 <= ratio <= 2.0 and formula < swin
        print(f"{label},{h},{w},{c},{win},{formula},{swin},{vit},{measured},{ratio:.4f}")
    print(f"checks={'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        worker_count()
        return COMMANDS[args.command](args, cfg)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return EXIT_USAGE
    except (ConfigFileError, ConfigError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, PlacementError, CheckpointError, EvalInputError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
