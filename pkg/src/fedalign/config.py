"""Experiment configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .attacks import ADA_B_SIGN_SOURCES, ATTACKS, AttackSpec
from .data import TriggerSpec
from .defenses import DEFENSES
from .model import TrainConfig


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class AttackSection(_Strict):
    kind: Literal[ATTACKS] = "none"  # type: ignore[valid-type]
    scale_factor: float = Field(2.0, gt=0)
    pgd_radius_ratio: float = Field(1.0, ge=0, le=1)
    neurotoxin_bottom_frac: float = Field(0.75, gt=0, le=1)
    poison_ratio: float = Field(0.5, ge=0, le=1)
    attack_ratio: float = Field(0.2, ge=0, le=1)
    ada_b_sign: Literal[ADA_B_SIGN_SOURCES] = "colluders"  # type: ignore[valid-type]

    def spec(self) -> AttackSpec:
        return AttackSpec(**self.model_dump())


class TrainSection(_Strict):
    local_epochs: int = Field(2, ge=0)
    lr: float = Field(0.1, ge=0)
    batch_size: int = Field(8, ge=1)
    momentum: float = Field(0.0, ge=0, lt=1)

    def spec(self) -> TrainConfig:
        return TrainConfig(**self.model_dump())


class TriggerSection(_Strict):
    center: tuple[int, int] = (3, 3)
    arm_len: int = Field(2, ge=0)
    value: float = Field(1.0, ge=0, le=1)
    target_label: int = Field(0, ge=0)


class SyntheticSection(_Strict):
    num_classes: int = Field(4, ge=2)
    feat_dim: int = Field(20, ge=1)
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(500, ge=1)
    spread: float = Field(0.05, gt=0)
    separation: float = Field(5.0, gt=0)


class ExperimentConfig(_Strict):
    dataset: Literal["mnist", "fmnist", "synthetic"] = "synthetic"
    data_dir: Optional[str] = None
    train_subset: Optional[int] = Field(None, ge=1)
    test_subset: Optional[int] = Field(None, ge=1)
    synthetic: SyntheticSection = SyntheticSection()
    hidden: list[int] = Field(default_factory=list)

    n_clients: int = Field(20, ge=1)
    clients_per_round: Optional[int] = Field(None, ge=1)
    rounds: int = Field(150, ge=0)
    beta: Optional[float] = Field(None, gt=0)

    attack: AttackSection = AttackSection()
    trigger: TriggerSection = TriggerSection()
    defense: Literal[DEFENSES] = "alignins"  # type: ignore[valid-type]
    defense_params: dict[str, float | int | None] = Field(default_factory=dict)

    server_lr: float = Field(1.0, gt=0)
    server_lr_decay: Optional[float] = Field(None, gt=0, le=1)
    train: TrainSection = TrainSection()
    seed: int = Field(0, ge=0, lt=2**64)

    paired_run: bool = False
    eval_every: int = Field(1, ge=1)
    estimate_every: int = Field(0, ge=0)
    estimate_probes: int = Field(5, ge=2)
    mu: float = Field(1.0, ge=0)
    kappa_epsilon: float = Field(0.1, gt=0)

    @field_validator("beta", mode="before")
    @classmethod
    def _iid(cls, v):
        return None if isinstance(v, str) and v.lower() == "iid" else v

    @model_validator(mode="after")
    def _consistent(self):
        if self.dataset in ("mnist", "fmnist") and not self.data_dir:
            raise ValueError(f"dataset {self.dataset!r} needs data_dir")
        if self.clients_per_round is not None and self.clients_per_round > self.n_clients:
            raise ValueError("clients_per_round exceeds n_clients")
        if self.attack.kind != "none" and self.n_malicious == 0:
            raise ValueError("attack configured but attack_ratio * n_clients rounds down to 0")
        if self.n_malicious >= self.n_clients and self.attack.kind != "none":
            raise ValueError("at least one client must be benign")
        return self

    @property
    def n_malicious(self) -> int:
        if self.attack.kind == "none":
            return 0
        return int(math.floor(self.attack.attack_ratio * self.n_clients + 1e-9))

    def layer_sizes(self, feat_dim: int, num_classes: int) -> tuple[int, ...]:
        if self.hidden:
            hidden = self.hidden
        elif self.dataset == "synthetic":
            hidden = [32]
        else:
            hidden = [64]
        return (feat_dim, *hidden, num_classes)

    def trigger_spec(self, image_side: int) -> TriggerSpec:
        return TriggerSpec(center=tuple(self.trigger.center), arm_len=self.trigger.arm_len,
                           value=self.trigger.value, target_label=self.trigger.target_label,
                           image_side=image_side)

    def server_rates(self) -> list[float]:
        decay = self.server_lr_decay or 1.0
        return [self.server_lr * decay ** t for t in range(self.rounds)]

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Copy with top-level or dotted (``attack.kind``) keys replaced, re-validated."""
        data = self.model_dump()
        for key, value in changes.items():
            if value is None:
                continue
            target = data
            *path, leaf = key.split(".")
            for part in path:
                target = target[part]
            target[leaf] = value
        return parse_config(data)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")  # OSError propagates: an I/O failure, not a bad config
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parse_config(data)
