"""Experiment configuration: one JSON-serialisable object with every knob and seed."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .encoder import ConfigurationError, ModelConfig
from .experiments import RANDOM_INIT_SEED_OFFSET, ExperimentSettings
from .pruning import HEADS_AND_MLPS, MODES
from .training import PretrainConfig, TrainConfig

OUTPUT_ENV = "TICKETLAB_OUTPUT"
DEFAULT_OUTPUT = "ticketlab-out"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT))


def config_hash(model_config: ModelConfig) -> str:
    """Short stable digest of a model configuration."""
    text = json.dumps(model_config.to_dict(), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    pretrain: PretrainConfig = PretrainConfig()
    train: TrainConfig = TrainConfig()
    suite_seed: int = 0
    train_size: int = 512
    dev_size: int = 256
    tasks: tuple = ("acceptability", "sentiment", "paraphrase", "similarity", "unlearnable")
    seeds: tuple = (0, 1, 2, 3, 4)
    method: str = "both"  # "m", "s" or "both"
    threshold: float = 0.9
    head_fraction: float = 0.10
    weight_fraction: float = 0.10
    basis: str = "remaining"
    mode: str = HEADS_AND_MLPS
    workers: int = 1
    output_dir: str = ""

    def __post_init__(self):
        # 0 and values above 1 are the documented limit cases of the loops
        if not self.threshold >= 0.0:
            raise ConfigurationError("threshold must be non-negative")
        for name in ("head_fraction", "weight_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigurationError(f"{name} must be in (0, 1)")
        if len(self.seeds) < 1:
            raise ConfigurationError("need at least one seed")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.method not in ("m", "s", "both"):
            raise ConfigurationError(f"unknown method {self.method!r}")

    def settings(self) -> ExperimentSettings:
        return ExperimentSettings(self.train, tuple(self.seeds), self.threshold, self.head_fraction,
                                  self.weight_fraction, self.basis, self.mode,
                                  ("m", "s") if self.method == "both" else (self.method,))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        if "pretrain" in d:
            d["pretrain"] = PretrainConfig(**d["pretrain"])
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        for key in ("tasks", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def merged(self, overrides: dict) -> "ExperimentConfig":
        """Copy with top-level and ``train.*`` / ``model.*`` overrides applied."""
        top, nested = {}, {"train": {}, "model": {}, "pretrain": {}}
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                group, name = key.split(".", 1)
                nested[group][name] = value
            else:
                top[key] = tuple(value) if key in ("tasks", "seeds") else value
        for group, vals in nested.items():
            if vals:
                top[group] = replace(getattr(self, group), **vals)
        return replace(self, **top)

    def manifest(self) -> dict:
        """Every seed the configuration implies, for the run manifest."""
        return {
            "model_init_seed": self.model.init_seed,
            "pretrain_seed": self.pretrain.seed,
            "task_suite_seed": self.suite_seed,
            "train_seeds": list(self.seeds),
            "classifier_init_seeds": list(self.seeds),
            "random_init_body_seeds": [RANDOM_INIT_SEED_OFFSET + s for s in self.seeds],
            "mask_sampling": "seed-split on (seed, crc32(task|method|kind))",
        }

