"""Finite-difference gradient harness over toy-sized instances of each component."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import DcftConfig, DcftLayer
from .deformable import DeformConfig, MSDeformAttn
from .gradcheck import grad_check
from .head import DualHead, HeadConfig, HeadOutput, ModulatedCrossAttention
from .losses import GroundTruth, set_loss
from .query_selection import QuerySet
from .rng import SeededRng
from .tensor import Parameter

TOLERANCE = 1e-4
COMPONENTS = ("dcft_attention", "deformable_attention", "modulated_cross_attention", "dual_head", "set_loss")


@dataclass
class CheckRow:
    component: str
    seed: int
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _jitter(module, rng: SeededRng, scale: float = 0.2) -> list:
    """Perturb every parameter so zero-initialised branches carry gradient."""
    params = module.parameters()
    for i, p in enumerate(params):
        p.data = p.data + scale * rng.child(i).normal(size=p.data.shape)
    return params


def _weighted_sum(x: T.Tensor, rng: SeededRng) -> T.Tensor:
    return (x * T.Tensor(rng.normal(size=x.shape))).sum()


def _dcft(rng: SeededRng):
    cfg = DcftConfig(depths=(1, 1, 1, 1), base_channels=8, window=2, pool_sizes=(1, 2), region_sizes=(2, 3))
    layer = DcftLayer(rng.child(0), 8, cfg)
    params = _jitter(layer, rng.child(1))
    z = Parameter(rng.child(2).normal(size=(4, 4, 8)))
    w = rng.child(3)
    return (lambda: _weighted_sum(layer(z), w.child(0))), params + [z]


def _deformable(rng: SeededRng):
    cfg = DeformConfig(dim=8, heads=2, points=2, levels=2)
    attn = MSDeformAttn(rng.child(0), cfg)
    params = _jitter(attn, rng.child(1), 0.5)
    query = Parameter(rng.child(2).normal(size=(5, 8)))
    maps = [Parameter(rng.child(3).normal(size=(3, 4, 8))), Parameter(rng.child(4).normal(size=(2, 2, 8)))]
    ref = rng.child(5).uniform(0.1, 0.9, (5, 2))
    w = rng.child(6)
    return (lambda: _weighted_sum(attn(query, ref, maps), w.child(0))), params + [query] + maps


def _modulated(rng: SeededRng):
    cfg = HeadConfig(dim=8, num_queries=4)
    module = ModulatedCrossAttention(rng.child(0), cfg)
    params = _jitter(module, rng.child(1))
    content = Parameter(rng.child(2).normal(size=(4, 8)))
    anchor_logits = Parameter(rng.child(3).normal(size=(4, 4)))
    memory = Parameter(rng.child(4).normal(size=(6, 8)))
    mem_xy = rng.child(5).uniform(0.0, 1.0, (6, 2))
    w = rng.child(6)

    def f():
        return _weighted_sum(module(content, T.sigmoid(anchor_logits), memory, mem_xy, 8), w.child(0))

    return f, params + [content, anchor_logits, memory]


def _dual_head(rng: SeededRng):
    cfg = HeadConfig(dim=8, num_queries=4, layers=2)
    head = DualHead(rng.child(0), cfg)
    params = _jitter(head, rng.child(1), 0.1)
    content = Parameter(rng.child(2).normal(size=(4, 8)))
    anchor_logits = Parameter(rng.child(3).normal(0.0, 0.5, size=(4, 4)))
    memory = Parameter(rng.child(4).normal(size=(6, 8)))
    mem_xy = rng.child(5).uniform(0.0, 1.0, (6, 2))
    w = rng.child(6)

    def f():
        out = head(QuerySet(content * 1.0, T.sigmoid(anchor_logits)), memory, mem_xy)
        total = None
        for i, (a, lg) in enumerate(zip(out.anchors, out.logits)):
            term = _weighted_sum(a, w.child(i, 0)) + _weighted_sum(lg, w.child(i, 1))
            total = term if total is None else total + term
        return total

    return f, params + [content, anchor_logits, memory]


def _set_loss(rng: SeededRng):
    layers, q = 2, 5
    logits = [Parameter(rng.child(0, i).normal(size=(q, 4))) for i in range(layers)]
    box_logits = [Parameter(rng.child(1, i).normal(0.0, 0.5, size=(q, 4))) for i in range(layers)]
    gt_boxes = np.concatenate([rng.child(2).uniform(0.3, 0.7, (2, 2)), rng.child(3).uniform(0.1, 0.3, (2, 2))], 1)
    gt = GroundTruth(gt_boxes, rng.child(4).integers(0, 4, 2))

    def f():
        out = HeadOutput([T.sigmoid(b) for b in box_logits], list(logits))
        return set_loss(out, gt).total

    return f, logits + box_logits


# entries probed per parameter tensor; the head has ~200 small tensors, so one each
ENTRIES = {"dual_head": 1}

BUILDERS = {
    "dcft_attention": _dcft,
    "deformable_attention": _deformable,
    "modulated_cross_attention": _modulated,
    "dual_head": _dual_head,
    "set_loss": _set_loss,
}


def run_gradchecks(seeds=range(5), components=COMPONENTS, max_entries: int | None = None,
                   fault_scale: float | None = None) -> list:
    """One row per (component, seed); 64-bit precision is forced.

    ``max_entries`` overrides the per-component sampling budget (default 3
    entries per parameter tensor, 1 for the dual head).
    """
    rows = []
    with T.precision("float64"):
        for name in components:
            for seed in seeds:
                start = time.perf_counter()
                rng = SeededRng(seed).child(COMPONENTS.index(name))
                f, params = BUILDERS[name](rng)
                entries = max_entries or ENTRIES.get(name, 3)
                if fault_scale is None:
                    err = grad_check(f, params, max_entries=entries, rng=rng.child(99))
                else:
                    with T.fault_injection(fault_scale):
                        err = grad_check(f, params, max_entries=entries, rng=rng.child(99))
                rows.append(CheckRow(name, int(seed), float(err), time.perf_counter() - start))
    return rows
