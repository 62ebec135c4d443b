"""Experiment configuration: nested dataclasses loaded from YAML or JSON.

Unknown keys are hard errors so that a typo in an ablation file can never
silently fall back to a default.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class TaskConfig:
    modulus: int = 10
    vocab_size: int = 32
    max_difficulty: int = 3
    visual_dim: int = 32
    visual_noise: float = 0.01
    embed_seed: int = 1234
    reward_seed: int = 4321
    format_bonus: float = 0.5
    max_prompt_len: int = 8

    def validate(self, path: str = "task") -> None:
        if not 2 <= self.modulus <= 100:
            raise ConfigError(f"{path}.modulus", "must lie in [2, 100] (answers are at most two digits)")
        if self.vocab_size < 18:
            raise ConfigError(f"{path}.vocab_size", "need room for 10 digits, 5 delimiters, PLUS and IMG")
        if self.max_difficulty < 1:
            raise ConfigError(f"{path}.max_difficulty", "must be >= 1")
        if self.visual_dim < 1:
            raise ConfigError(f"{path}.visual_dim", "must be >= 1")
        if self.visual_noise < 0:
            raise ConfigError(f"{path}.visual_noise", "must be >= 0")
        if self.format_bonus < 0:
            raise ConfigError(f"{path}.format_bonus", "must be >= 0")
        if self.max_prompt_len < 3:
            raise ConfigError(f"{path}.max_prompt_len", "must be >= 3")


@dataclass
class PolicyConfig:
    encoder_dim: int = 32
    context_dim: int = 32
    token_dim: int = 16
    hidden_dim: int = 64
    init_scale: float = 0.1
    max_len: int = 8

    def validate(self, path: str = "policy") -> None:
        for name in ("encoder_dim", "context_dim", "token_dim", "hidden_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{path}.{name}", "must be >= 1")
        if self.init_scale <= 0:
            raise ConfigError(f"{path}.init_scale", "must be > 0")


@dataclass
class MpoWeights:
    w_pref: float = 0.8
    w_qual: float = 0.2
    w_gen: float = 1.0
    beta: float = 0.1

    def validate(self, path: str = "mpo.weights") -> None:
        for name in ("w_pref", "w_qual", "w_gen"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{path}.{name}", "must be >= 0")
        if self.w_pref == self.w_qual == self.w_gen == 0:
            raise ConfigError(path, "weights must not all be zero")
        if self.beta <= 0:
            raise ConfigError(f"{path}.beta", "must be > 0")


@dataclass
class ClipConfig:
    epsilon: float = 0.2
    kl_coeff: float = 0.0

    def validate(self, path: str = "grpo.clip") -> None:
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"{path}.epsilon", "must lie in (0, 1)")
        if self.kl_coeff < 0:
            raise ConfigError(f"{path}.kl_coeff", "must be >= 0")


@dataclass
class BufferConfig:
    enabled: bool = True
    capacity: int = 4096
    max_age: int = 3
    weight_temperature: float = 1.0
    replay_fraction: float = 0.25
    filter_pool: bool = False

    def validate(self, path: str = "grpo.buffer") -> None:
        if self.capacity < 1:
            raise ConfigError(f"{path}.capacity", "must be >= 1")
        if self.max_age < 1:
            raise ConfigError(f"{path}.max_age", "must be >= 1")
        if self.weight_temperature <= 0:
            raise ConfigError(f"{path}.weight_temperature", "must be > 0")
        if not 0 <= self.replay_fraction < 1:
            raise ConfigError(f"{path}.replay_fraction", "must lie in [0, 1)")


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self, path: str = "optim") -> None:
        if self.kind not in ("adam", "sgd"):
            raise ConfigError(f"{path}.kind", f"unknown optimizer {self.kind!r} (adam|sgd)")
        if self.lr <= 0:
            raise ConfigError(f"{path}.lr", "must be > 0")


@dataclass
class SftConfig:
    steps: int = 150
    batch_size: int = 32
    dataset_size: int = 24
    freeze: str = "head_plus_adapter"
    optim: OptimConfig = field(default_factory=OptimConfig)


@dataclass
class MpoConfig:
    rounds: int = 15
    steps_per_round: int = 10
    tasks_per_round: int = 64
    batch_size: int = 32
    n_samples: int = 8
    temperature: float = 1.0
    threshold: float = 0.5
    delta_decay: float = 0.99
    freeze: str = "adapter_only"
    weights: MpoWeights = field(default_factory=MpoWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)


@dataclass
class GrpoConfig:
    iterations: int = 500
    groups_per_step: int = 16
    group_size: int = 8
    temperature: float = 1.0
    inner_epochs: int = 1
    freeze: str = "adapter_only"
    clip: ClipConfig = field(default_factory=ClipConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=3e-2))


@dataclass
class BaseModelConfig:
    """Warm-up of the language head through a throwaway donor adapter."""

    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-2
    context_noise: float = 0.5
    seed: int = 99

    def validate(self, path: str = "base") -> None:
        if self.steps < 0:
            raise ConfigError(f"{path}.steps", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError(f"{path}.batch_size", "must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"{path}.lr", "must be > 0")
        if self.context_noise < 0:
            raise ConfigError(f"{path}.context_noise", "must be >= 0")


@dataclass
class TrainConfig:
    seed: int = 0
    stages: list[str] = field(default_factory=lambda: ["grpo"])
    train_pool: int = 2048
    eval_tasks: int = 512
    eval_seed_offset: int = 1_000_000
    log_every: int = 5
    grad_check_every: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    base: BaseModelConfig = field(default_factory=BaseModelConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    mpo: MpoConfig = field(default_factory=MpoConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)

    def validate(self) -> None:
        valid_stages = ("sft", "mpo", "grpo")
        if not isinstance(self.stages, list):
            raise ConfigError("stages", "must be a list")
        for i, stage in enumerate(self.stages):
            if stage not in valid_stages:
                raise ConfigError(f"stages[{i}]", f"unknown stage {stage!r}; expected one of {valid_stages}")
        order = [valid_stages.index(s) for s in self.stages]
        if order != sorted(order) or len(set(order)) != len(order):
            raise ConfigError("stages", "stages must be unique and ordered sft < mpo < grpo")
        if self.train_pool < 1:
            raise ConfigError("train_pool", "must be >= 1")
        if self.eval_tasks < 1:
            raise ConfigError("eval_tasks", "must be >= 1")
        if self.log_every < 1:
            raise ConfigError("log_every", "must be >= 1")
        if self.grad_check_every < 0:
            raise ConfigError("grad_check_every", "must be >= 0")
        self.task.validate("task")
        self.policy.validate("policy")
        self.base.validate("base")
        _check_freeze(self.sft.freeze, "sft.freeze")
        _check_freeze(self.mpo.freeze, "mpo.freeze")
        _check_freeze(self.grpo.freeze, "grpo.freeze")
        for path, opt in (("sft.optim", self.sft.optim), ("mpo.optim", self.mpo.optim), ("grpo.optim", self.grpo.optim)):
            opt.validate(path)
        if self.sft.dataset_size < 1:
            raise ConfigError("sft.dataset_size", "must be >= 1")
        if self.sft.steps < 0:
            raise ConfigError("sft.steps", "must be >= 0")
        if self.mpo.n_samples < 2:
            raise ConfigError("mpo.n_samples", "must be >= 2")
        if self.mpo.threshold < 0:
            raise ConfigError("mpo.threshold", "must be >= 0")
        if not 0 < self.mpo.delta_decay < 1:
            raise ConfigError("mpo.delta_decay", "must lie in (0, 1)")
        self.mpo.weights.validate("mpo.weights")
        if self.grpo.group_size < 2:
            raise ConfigError("grpo.group_size", "must be >= 2")
        if self.grpo.inner_epochs < 1:
            raise ConfigError("grpo.inner_epochs", "must be >= 1")
        for path, temp in (("mpo.temperature", self.mpo.temperature), ("grpo.temperature", self.grpo.temperature)):
            if temp <= 0:
                raise ConfigError(path, "must be > 0")
        self.grpo.clip.validate("grpo.clip")
        self.grpo.buffer.validate("grpo.buffer")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


FREEZE_CONFIGURATIONS = ("adapter_only", "head_plus_adapter", "adapter_plus_encoder_forwardonly")


def _check_freeze(name: str, path: str) -> None:
    if name not in FREEZE_CONFIGURATIONS:
        raise ConfigError(path, f"unknown freeze configuration {name!r}; expected one of {FREEZE_CONFIGURATIONS}")


def _coerce(value: Any, target: Any, path: str) -> Any:
    if isinstance(target, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected bool, got {value!r}")
        return value
    if isinstance(target, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected int, got {value!r}")
        return value
    if isinstance(target, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected number, got {value!r}")
        return float(value)
    if isinstance(target, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected string, got {value!r}")
        return value
    if isinstance(target, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected list, got {value!r}")
        return list(value)
    return value


def _merge(obj: Any, data: dict[str, Any], path: str) -> Any:
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(obj)}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in known:
            raise ConfigError(sub, "unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            _merge(current, value, sub)
        else:
            setattr(obj, key, _coerce(value, current, sub))
    return obj


def from_dict(data: dict[str, Any]) -> TrainConfig:
    cfg = _merge(TrainConfig(), copy.deepcopy(data), "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("", f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError("", f"cannot parse {path}: {exc}") from exc
    data = data or {}
    if isinstance(data, dict) and "config" in data and "manifest_version" in data:
        # a run manifest is itself a valid config source
        data = data["config"]
    return from_dict(data)


def apply_override(cfg: TrainConfig, assignment: str) -> TrainConfig:
    """Apply a dotted ``key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError("", f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    value = yaml.safe_load(raw)
    nested: dict[str, Any] = {}
    node = nested
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    merged = _merge(copy.deepcopy(cfg), nested, "")
    merged.validate()
    return merged
