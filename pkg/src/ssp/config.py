"""One JSON document configuring every stage of a run."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .embedder import LpeConfig, TrainConfig
from .errors import ValidationError
from .gmpp import GmppConfig
from .loss import LossConfig
from .pointcloud import AugmentParams, SceneSpec


@dataclass
class GraphConfig:
    k_adj: int = 5
    delaunay: bool = False  # reserved

    def validate(self) -> None:
        if self.k_adj < 1:
            raise ValidationError("k_adj must be positive")
        if self.delaunay:
            raise ValidationError("Delaunay edge augmentation is not supported")


@dataclass
class RunConfig:
    seed: int = 0
    n_train: int = 10
    n_val: int = 2
    scene: SceneSpec = field(default_factory=SceneSpec)
    graph: GraphConfig = field(default_factory=GraphConfig)
    lpe: LpeConfig = field(default_factory=LpeConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    gmpp: GmppConfig = field(default_factory=GmppConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lambda_path: Optional[list] = None  # partition at several strengths

    def validate(self) -> None:
        if self.n_train < 0 or self.n_val < 0:
            raise ValidationError("scene counts must be non-negative")
        self.scene.validate()
        self.graph.validate()
        self.lpe.validate()
        self.loss.validate()
        self.gmpp.validate()
        self.train.validate()
        if self.lambda_path is not None:
            lp = [float(x) for x in self.lambda_path]
            if not lp or min(lp) <= 0 or lp != sorted(lp):
                raise ValidationError("lambda_path must be a nonempty ascending list of positive values")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


_NESTED = {
    (RunConfig, "scene"): SceneSpec,
    (RunConfig, "graph"): GraphConfig,
    (RunConfig, "lpe"): LpeConfig,
    (RunConfig, "loss"): LossConfig,
    (RunConfig, "gmpp"): GmppConfig,
    (RunConfig, "train"): TrainConfig,
    (TrainConfig, "augment"): AugmentParams,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ValidationError(f"{where or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value, f"{where}{key}.")
        elif isinstance(value, list) and key.endswith("range"):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"bad config section {where or 'root'}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    """Parse a config, or the ``config`` section of a run manifest."""
    if isinstance(data, dict) and "manifest_version" in data:
        data = data.get("config", {})
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return config_from_dict(data)
