"""Experiment configuration: INI files with dotted-key overrides.

Recognised keys (``section.key``)::

    train.epochs  train.batch_size  train.lr  train.momentum  train.seed
    finetune.epochs  finetune.lr
    prune.sparsity_ratio  prune.score_method  prune.sample_cap
    data.mnist_dir  data.train_size  data.eval_size  data.synth_seed
    data.background_dir  data.eval_batch_size

Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ConfigError
from .saliency import Method


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    finetune_epochs: int = 5
    finetune_lr: float = 0.001
    sparsity_ratio: float = 0.4
    score_method: Method = Method.DSS
    sample_cap: int | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 <= self.sparsity_ratio < 1:
            raise ConfigError(f"sparsity_ratio must lie in [0, 1), got {self.sparsity_ratio}")
        if self.sample_cap is not None and self.sample_cap < 1:
            raise ConfigError(f"sample_cap must be positive, got {self.sample_cap}")
        object.__setattr__(self, "score_method", Method.parse(self.score_method))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class DataConfig:
    mnist_dir: str = "data/mnist-10k"
    train_size: int = 8000
    eval_size: int = 2000
    synth_seed: int = 0
    background_dir: str | None = None
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.train_size < 1 or self.eval_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("data sizes must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


# dotted key -> (group, field name)
KEYS: dict[str, tuple[str, str]] = {
    "train.epochs": ("train", "epochs"),
    "train.batch_size": ("train", "batch_size"),
    "train.lr": ("train", "lr"),
    "train.momentum": ("train", "momentum"),
    "train.seed": ("train", "seed"),
    "finetune.epochs": ("train", "finetune_epochs"),
    "finetune.lr": ("train", "finetune_lr"),
    "prune.sparsity_ratio": ("train", "sparsity_ratio"),
    "prune.score_method": ("train", "score_method"),
    "prune.sample_cap": ("train", "sample_cap"),
    "data.mnist_dir": ("data", "mnist_dir"),
    "data.train_size": ("data", "train_size"),
    "data.eval_size": ("data", "eval_size"),
    "data.synth_seed": ("data", "synth_seed"),
    "data.background_dir": ("data", "background_dir"),
    "data.eval_batch_size": ("data", "eval_batch_size"),
}

_INT = {"epochs", "batch_size", "seed", "finetune_epochs", "train_size", "eval_size", "synth_seed", "eval_batch_size"}
_FLOAT = {"lr", "momentum", "finetune_lr", "sparsity_ratio"}
_OPTIONAL = {"sample_cap", "background_dir"}


def _convert(key: str, name: str, raw: str):
    raw = raw.strip()
    if name in _OPTIONAL and raw.lower() in ("", "none"):
        return None
    try:
        if name in _INT or name == "sample_cap":
            return int(raw)
        if name in _FLOAT:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


def apply_overrides(cfg: ExperimentConfig, items: Iterable[tuple[str, str]]) -> ExperimentConfig:
    groups = {"train": {}, "data": {}}
    for key, raw in items:
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        group, name = KEYS[key]
        groups[group][name] = _convert(key, name, raw)
    try:
        train = dataclasses.replace(cfg.train, **groups["train"])
        data = dataclasses.replace(cfg.data, **groups["data"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(train, data)


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, value = text.split("=", 1)
    return key.strip(), value


def load_config(path=None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    items: list[tuple[str, str]] = []
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                items.append((f"{section}.{key}", value))
    items += [parse_override(o) for o in overrides]
    return apply_overrides(ExperimentConfig(), items)


def dump_config(cfg: ExperimentConfig) -> str:
    sections: dict[str, list[str]] = {}
    for key, (group, name) in KEYS.items():
        value = getattr(getattr(cfg, group), name)
        if isinstance(value, Method):
            value = value.value
        section, short = key.split(".")
        sections.setdefault(section, []).append(f"{short} = {'none' if value is None else value}")
    return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())
