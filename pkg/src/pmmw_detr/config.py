"""Run configuration: one JSON document, flag overrides on top."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import DcftConfig
from .data import SceneSpec
from .deformable import DeformConfig
from .evaluation import EvalConfig
from .head import HeadConfig
from .model import ModelConfig


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_drop_epoch: int = 40
    lr_drop_factor: float = 0.1
    clip_norm: float | None = 0.1
    max_steps: int | None = None
    augment: tuple = ()              # ops applied with probability 1/2 each
    eval_every: int = 0              # epochs between training-set evaluations (0: only at the end)
    precision: str = "float32"


@dataclass
class DataConfig:
    train: str = ""
    eval: str = ""
    count: int = 8
    scene: SceneSpec = field(default_factory=SceneSpec)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


_NESTED = {
    RunConfig: {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig},
    ModelConfig: {"backbone": DcftConfig, "deform": DeformConfig, "head": HeadConfig},
    DataConfig: {"scene": SceneSpec},
}


class ConfigFileError(ValueError):
    pass


def build(cls, doc: dict, base=None):
    """Instantiate dataclass ``cls`` from ``doc``, starting from ``base`` values."""
    if not isinstance(doc, dict):
        raise ConfigFileError(f"{cls.__name__} section must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigFileError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    base = base if base is not None else cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        current = getattr(base, f.name)
        if f.name not in doc:
            kwargs[f.name] = current
            continue
        sub = _NESTED.get(cls, {}).get(f.name)
        value = doc[f.name]
        if sub is not None:
            kwargs[f.name] = build(sub, value, current)
        elif isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"invalid {cls.__name__}: {exc}") from exc


def desk_profile() -> RunConfig:
    """128 px images, c1 = 32, 20 queries, 3 encoder layers; tuned to overfit 8 images."""
    cfg = RunConfig()
    cfg.train = TrainConfig(epochs=200, batch_size=4, lr=1e-3, lr_drop_epoch=160, clip_norm=0.1)
    return cfg


def paper_profile() -> RunConfig:
    """Mirrors the published recipe in shape only; far too slow for a CPU."""
    backbone = DcftConfig(depths=(2, 2, 6, 2), base_channels=96, window=7,
                          pool_sizes=(1, 3, 5, 7), region_sizes=(7, 3, 3, 3))
    deform = DeformConfig(dim=256, heads=8, points=4, levels=3, encoder_layers=6)
    head = HeadConfig(dim=256, num_queries=300, layers=3)
    model = ModelConfig(backbone=backbone, deform=deform, head=head)
    train = TrainConfig(epochs=50, batch_size=4, lr=1e-4, weight_decay=1e-4, lr_drop_epoch=40)
    data = DataConfig(count=715, scene=SceneSpec(size=512))
    return RunConfig(model=model, train=train, data=data)


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def load_config(path=None, profile: str = "desk") -> RunConfig:
    base = PROFILES[profile]()
    if path is None:
        return base
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if "profile" in doc:
        doc = dict(doc)
        base = PROFILES[doc.pop("profile")]()
    return build(RunConfig, doc, base)


def with_overrides(cfg: RunConfig, seed=None, use_qse=None, use_qsh=None, backbone=None) -> RunConfig:
    m = cfg.model
    head = dataclasses.replace(m.head, use_qsh=m.head.use_qsh if use_qsh is None else use_qsh)
    model = dataclasses.replace(m, head=head,
                                use_qse=m.use_qse if use_qse is None else use_qse,
                                backbone_kind=m.backbone_kind if backbone is None else backbone)
    return dataclasses.replace(cfg, model=model, seed=cfg.seed if seed is None else seed)
