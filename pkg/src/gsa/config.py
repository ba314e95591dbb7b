"""Experiment configuration files (TOML).

Layout::

    seed = 0
    out_dir = "runs/example"

    [model]                 # ModelConfig fields
    [model.attention]       # GsaConfig fields
    [train]                 # TrainConfig fields except seed
    [train.lr_multipliers]  # base / indexer / gates
    [task]                  # kind = "copy" | "induction" | "bytes"; path for bytes

Unknown keys anywhere are errors. Every random stream derives from the
top-level seed: ``init`` (weights), ``data`` (training batches), ``probe``
(held-out evaluation batches), ``bench`` (benchmark inputs).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from gsa.attention import ConfigError
from gsa.model import ModelConfig
from gsa.rng import Rng
from gsa.training import TrainConfig, make_task

TASK_KINDS = ("copy", "induction", "bytes")


@dataclass
class TaskConfig:
    kind: str = "copy"
    path: str | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "bytes" and not self.path:
            raise ConfigError("bytes task needs a path")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        # the top-level seed is the only seed
        self.train.seed = self.seed
        if self.task.kind == "bytes" and self.model.vocab_size < 256:
            raise ConfigError("bytes task needs model.vocab_size >= 256")
        if self.train.seq_len < 2:
            raise ConfigError("seq_len must be at least 2")

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        data = dict(data)
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        model = dict(data.get("model", {}))
        train = dict(data.get("train", {}))
        if "seed" in train:
            raise ConfigError("seed is set at the top level, not in [train]")
        task = dict(data.get("task", {}))
        unknown_task = set(task) - {"kind", "path"}
        if unknown_task:
            raise ConfigError(f"unknown task keys: {sorted(unknown_task)}")
        if task.get("path") and base_dir is not None and not Path(task["path"]).is_absolute():
            task["path"] = str(base_dir / task["path"])
        return cls(
            model=ModelConfig.from_dict(model),
            train=TrainConfig.from_dict(train),
            task=TaskConfig(**task),
            out_dir=str(data.get("out_dir", "runs/default")),
            seed=int(data.get("seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None,
                       mode: str | None = None) -> "ExperimentConfig":
        model = self.model
        if mode is not None:
            model = replace(model, attention=replace(model.attention, mode=mode))
        return ExperimentConfig(model=model, train=replace(self.train), task=self.task,
                                out_dir=self.out_dir if out_dir is None else out_dir,
                                seed=self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        task = {"kind": self.task.kind}
        if self.task.path:
            task["path"] = self.task.path
        return {"seed": self.seed, "out_dir": self.out_dir, "model": self.model.to_dict(),
                "train": train, "task": task}

    def batches(self, stream: str = "data", batch_size: int | None = None):
        return make_task(self.task.kind, self.train.seq_len, self.model.vocab_size, Rng(self.seed, stream),
                         batch_size or self.train.batch_size, self.task.path)
