"""Hybrid-reward RL on a toy vision-language arithmetic world.

Preference optimisation (DPO + BCO + NLL), group-relative policy optimisation
with a selective sample buffer, and the oracles that check them.
"""
__version__ = "0.1.0"

from .config import ConfigError, TrainConfig, apply_override, load_config
from .grpo import RolloutGroup, group_advantages, grpo_objective
from .mpo import DeltaTracker, PreferenceExample, build_preference_pairs, mpo_batch_loss
from .policy import InputError, PolicyParams, init_params, set_freeze
from .ssb import SelectiveSampleBuffer, effective_fraction
from .toyworld import Task, ToyWorld, world_for
from .trainer import Trainer, run_ablation, run_config

__all__ = [
    "ConfigError", "DeltaTracker", "InputError", "PolicyParams", "PreferenceExample", "RolloutGroup",
    "SelectiveSampleBuffer", "Task", "ToyWorld", "TrainConfig", "Trainer", "apply_override",
    "build_preference_pairs", "effective_fraction", "group_advantages", "grpo_objective", "init_params",
    "load_config", "mpo_batch_loss", "run_ablation", "run_config", "set_freeze", "world_for",
]
