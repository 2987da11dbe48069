"""Resilient fusion defense: restore frozen embedding groups from the base
model after aggregation, then realign the merged model with few-shot
fine-tuning on a pooled per-task sample budget.

The freeze always precedes realignment, and the frozen groups stay frozen
during the realignment step as well, so they are guaranteed to equal the
base model bit-for-bit after the full defense.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterSet
from .taskbench import concat_splits
from .tinyvit import ModelConfig, TrainSpec, finetune

DEFAULT_FREEZE_TAGS = frozenset({"patch_embed", "pos_embed", "class_embed"})


@dataclass(frozen=True)
class DefenseConfig:
    freeze_tags: frozenset = DEFAULT_FREEZE_TAGS
    fewshot_per_class: int = 10
    realign_steps: int = 50
    realign_lr: float = 5e-4
    enabled_freeze: bool = True
    enabled_realign: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "freeze_tags", frozenset(self.freeze_tags))
        if self.enabled_realign and self.fewshot_per_class < 1:
            raise ValueError("fewshot_per_class must be >= 1 when realignment is enabled")
        if self.realign_steps < 0:
            raise ValueError("realign_steps must be >= 0")
        if self.realign_lr <= 0:
            raise ValueError("realign_lr must be positive")

    def with_mode(self, mode: str) -> "DefenseConfig":
        """Map an ablation mode name onto the two enable flags."""
        flags = {
            "none": (False, False),
            "freeze_only": (True, False),
            "realign_only": (False, True),
            "full": (True, True),
        }
        if mode not in flags:
            raise ValueError(f"unknown defense mode {mode!r}")
        fr, re = flags[mode]
        return DefenseConfig(freeze_tags=self.freeze_tags,
                             fewshot_per_class=self.fewshot_per_class,
                             realign_steps=self.realign_steps,
                             realign_lr=self.realign_lr,
                             enabled_freeze=fr, enabled_realign=re,
                             seed=self.seed)


def restore_frozen(theta_mtllm: ParameterSet, theta_base: ParameterSet,
                   dcfg: DefenseConfig) -> ParameterSet:
    """Replace every group tagged in freeze_tags with the base model's copy."""
    theta_mtllm.check_compatible(theta_base)
    return ParameterSet(
        groups={
            name: (theta_base.groups[name] if theta_mtllm.tags[name] in dcfg.freeze_tags
                   else theta_mtllm.groups[name])
            for name in theta_mtllm.groups
        },
        tags=dict(theta_mtllm.tags),
        model_config_hash=theta_mtllm.model_config_hash,
    )


def realign(theta: ParameterSet, cfg: ModelConfig, fewshot_datasets,
            dcfg: DefenseConfig) -> ParameterSet:
    """Few-shot fine-tuning on the pooled per-task fewshot splits, with the
    freeze-tagged groups held frozen throughout. Whole pool per step."""
    splits = [data.fewshot for data in fewshot_datasets]
    if not splits or any(s.images.shape[0] == 0 for s in splits):
        raise ValueError("empty few-shot pool")
    budget = dcfg.fewshot_per_class * cfg.num_classes
    trimmed = [type(s)(images=s.images[:budget], labels=s.labels[:budget])
               for s in splits]
    pool = concat_splits(trimmed)
    spec = TrainSpec(iterations=dcfg.realign_steps,
                     batch_size=max(pool.images.shape[0], 1),
                     learning_rate=dcfg.realign_lr,
                     optimizer="adam",
                     seed=dcfg.seed)
    return finetune(theta, cfg, pool, spec, freeze_tags=dcfg.freeze_tags)


def apply_defense(theta_mtllm: ParameterSet, theta_base: ParameterSet,
                  cfg: ModelConfig, fewshot_datasets,
                  dcfg: DefenseConfig) -> ParameterSet:
    """Freeze-restore then realign, each gated by its enable flag."""
    theta = theta_mtllm
    if dcfg.enabled_freeze:
        theta = restore_frozen(theta, theta_base, dcfg)
    if dcfg.enabled_realign:
        theta = realign(theta, cfg, fewshot_datasets, dcfg)
    return theta
