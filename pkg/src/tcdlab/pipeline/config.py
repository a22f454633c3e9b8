"""Run configuration: ``[model]``, ``[moe]``, ``[distill]`` and ``[train]`` TOML sections.

Every field defaults to the full-scale setting; desk-scale runs override
them in a config file (see ``configs/toy.toml``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from ..distill import DistillConfig
from ..errors import ConfigError
from ..moe import MoEConfig
from ..transformer import ModelConfig

MODES = ("teacher", "moe-baseline", "moe-tcd")


@dataclass
class TrainConfig:
    corpus: str = ""
    seed: int = 0
    epochs: int = 40
    max_steps: int = 0  # 0: run all epochs
    batch_size: int = 512
    seq_len: int = 128
    peak_lr: float = 1e-4
    warmup_steps: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    val_fraction: float = 0.05
    eval_seed: int = 1234
    log_every: int = 1
    checkpoint_every: int = 0  # 0: epoch-end checkpoints only

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.seq_len < 2:
            raise ConfigError("batch_size, epochs must be >= 1 and seq_len >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")


@dataclass
class RunConfig:
    mode: str = "teacher"
    model: ModelConfig = field(default_factory=ModelConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def uses_moe(self) -> bool:
        return self.mode != "teacher"

    @property
    def uses_teacher(self) -> bool:
        return self.mode == "moe-tcd"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        sections = {"model": ModelConfig, "moe": MoEConfig, "distill": DistillConfig, "train": TrainConfig}
        unknown = set(data) - set(sections) - {"mode"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in sections.items():
            section = data.get(name, {})
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(section) - names
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            try:
                kwargs[name] = klass(**section)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(mode=data.get("mode", "teacher"), **kwargs)


def load_run_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig.from_dict(data)
