"""Run configuration: one YAML file describes data, model, training and outputs."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from .snn import LifConfig, ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class MazeSection:
    W: int = 21
    H: int = 21
    count: int = 50_000
    seed: int = 0


@dataclass(frozen=True)
class DatasetSection:
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seq_len: int = 100
    split_seed: int = 0
    interchange_paths: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(self.fractions))
        object.__setattr__(self, "interchange_paths", tuple(self.interchange_paths))


@dataclass(frozen=True)
class ModelSection:
    kind: str = "snn"
    init_seed: int = 0
    config: ModelConfig = field(default_factory=ModelConfig)
    lif: LifConfig = field(default_factory=LifConfig)


@dataclass(frozen=True)
class EvalSection:
    e_mac: float = 4.6
    e_ac: float = 0.9
    rollout_limit: int = 0  # 0 = roll out every test maze


@dataclass(frozen=True)
class RunConfig:
    maze: MazeSection = field(default_factory=MazeSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        return _build(cls, d or {})

    def with_seed(self, seed: int) -> "RunConfig":
        """Apply one seed to maze generation, splitting, init and batch shuffling."""
        return replace(
            self,
            maze=replace(self.maze, seed=seed),
            dataset=replace(self.dataset, split_seed=seed),
            model=replace(self.model, init_seed=seed),
            train=replace(self.train, seed=seed),
        )


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, d: dict):
    if not isinstance(d, dict):
        raise ValueError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in d.items():
        default = getattr(cls(), name) if _has_defaults(cls) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _has_defaults(cls) -> bool:
    try:
        cls()
        return True
    except TypeError:
        return False


HEADER = """\
# STRL run configuration.
# Defaults reproduce the full-scale maze setup: 50,000 21x21 mazes, 70/15/15 split,
# d=256, 6 blocks, LIF T_s=4, AdamW lr 1e-3 / wd 1e-4, cosine schedule,
# gradient clip 1.0, batch 32, 10 epochs.
"""


def dump_config(cfg: RunConfig, path: str | Path | None = None) -> str:
    text = HEADER + yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(yaml.safe_load(fh))
