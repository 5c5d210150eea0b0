"""Run configuration: one JSON file holding every tunable constant."""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .losses import GeoLossWeights
from .mesher import MeshConfig
from .optim import DensifyPolicy
from .partition import PartitionConfig
from .raster import RasterConfig
from .synthetic import SyntheticConfig
from .trainer import TrainSchedule

_NESTED = {
    "synthetic": SyntheticConfig,
    "schedule": TrainSchedule,
    "densify": DensifyPolicy,
    "partition": PartitionConfig,
    "mesh": MeshConfig,
    "loss_weights": GeoLossWeights,
    "raster": RasterConfig,
}


@dataclass
class RunConfig:
    """Everything a pipeline run needs, serializable as one JSON document.

    When `colmap_dir` is unset, the built-in synthetic desk scene described
    by the `synthetic` block is used instead.
    """

    workdir: str = "runs/desk"
    seed: int = 0
    jobs: int = 1
    use_appearance: bool = True
    use_masks: bool = True
    held_out_period: int = 8
    colmap_dir: str = None
    images_dir: str = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    densify: DensifyPolicy = field(default_factory=DensifyPolicy)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    loss_weights: GeoLossWeights = field(default_factory=GeoLossWeights)
    raster: RasterConfig = field(default_factory=RasterConfig)

    def validate(self) -> "RunConfig":
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")
        if self.held_out_period < 2:
            raise ValueError("held_out_period must be at least 2")
        self.schedule.validate()
        self.densify.validate()
        self.partition.validate()
        self.mesh.validate()
        self.loss_weights.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(value):
    # JSON has no tuples; every sequence-valued setting here is a tuple
    if isinstance(value, list):
        return tuple(_coerce(v) for v in value)
    return value


def _build(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ValueError(f"expected an object for {context!r}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown key(s) {unknown} in {context!r}")
    return cls(**{k: _coerce(v) for k, v in data.items()})


def run_config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ValueError("run configuration must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown key(s) {unknown} in run configuration")
    kwargs = {}
    for name, value in data.items():
        if name in _NESTED and value is not None:
            kwargs[name] = _build(_NESTED[name], value, name)
        else:
            kwargs[name] = _coerce(value)
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path} is not valid JSON: {exc}") from exc
    return run_config_from_dict(data)


def save_config(config: RunConfig, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2,
                                     sort_keys=True) + "\n")
