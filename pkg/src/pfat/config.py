"""Experiment configuration: YAML text with strict sections, validated by pydantic.

Unknown keys are errors so a typo in a hyperparameter name cannot silently
fall back to a default.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .attacks import AdvPerturbation, ByzantineSpec
from .federated import Phase1Config
from .gating import Phase2Config


class ConfigError(ValueError):
    """Config text could not be parsed or failed validation."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Section):
    kind: Literal["blobs", "csv"] = "blobs"
    path: Optional[str] = None  # csv only
    num_classes: int = Field(3, ge=2)
    per_class: int = Field(200, ge=1)
    dim: int = Field(6, ge=1)
    spread: float = Field(0.5, ge=0)
    scale: float = Field(1.0, gt=0)
    pretrain_fraction: float = Field(0.3, gt=0, lt=1)  # pooled benign split for the backbone

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.kind == "csv" and not self.path:
            raise ValueError("dataset.kind = csv needs dataset.path")
        return self


class PartitionSection(_Section):
    num_clients: int = Field(15, ge=1)
    dirichlet_alpha: float = Field(10.0, gt=0)
    iid: bool = False
    test_fraction: float = Field(0.2, gt=0, lt=1)


class ModelSection(_Section):
    hidden: list[int] = Field(default_factory=lambda: [16, 16], min_length=1)
    rank: int = Field(2, ge=1)
    pretrain_epochs: int = Field(40, ge=0)
    pretrain_lr: float = Field(0.05, gt=0)
    pretrain_batch_size: int = Field(32, ge=1)


class AttackSection(_Section):
    epsilon: float = Field(8 / 255, ge=0)
    step_size: Optional[float] = Field(None, gt=0)
    iterations: int = Field(10, ge=0)
    random_start: bool = True
    clamp: Optional[tuple[float, float]] = None

    def build(self) -> AdvPerturbation:
        clamp = self.clamp if self.clamp is not None else (float("-inf"), float("inf"))
        return AdvPerturbation(self.epsilon, self.step_size, self.iterations, self.random_start, clamp)


class ByzantineSection(_Section):
    mode: Literal["none", "label_flip", "mpaf"] = "none"
    rho: float = Field(0.0, ge=0, le=1)
    mpaf_scale: float = Field(10.0, gt=0)
    flip_rule: Optional[list[int]] = None


class Phase1Section(_Section):
    rounds: int = Field(10, ge=0)
    local_epochs: int = Field(1, ge=1)
    learning_rate: float = Field(0.05, ge=0)
    batch_size: int = Field(32, ge=1)
    knn_k: int = Field(5, ge=0)
    bandwidth: Union[Literal["median"], float] = "median"
    eta: float = Field(0.5, ge=0, le=1)
    lambda1: float = Field(20.0, ge=0)
    lambda2: float = Field(0.001, ge=0)
    gamma: float = Field(0.9, ge=0.5, le=0.99)
    eps_smooth: float = Field(0.9, ge=0, le=1)
    tree_depth: int = Field(2, ge=0)
    kappa: float = Field(3.0, ge=0)
    trim_fraction: float = Field(0.2, ge=0, lt=0.5)
    aggregator: Literal["robust", "fedavg"] = "robust"
    sharing: Literal["adapters", "full"] = "adapters"
    root_filter: bool = True

    @field_validator("bandwidth")
    @classmethod
    def _positive_bandwidth(cls, v):
        if not isinstance(v, str) and v <= 0:
            raise ValueError("a fixed bandwidth must be > 0")
        return v


class Phase2Section(_Section):
    outer_steps: int = Field(10, ge=0)
    inner_steps: int = Field(20, ge=0)
    beta: float = 5.0
    lambda3: float = Field(1.0, ge=0)
    budget: Optional[int] = Field(None, ge=0)
    budget_fraction: float = Field(0.25, ge=0, le=1)
    learning_rate: float = Field(0.005, ge=0)
    gate_lr: float = Field(1.0, ge=0)
    gate_init: float = 0.0
    batch_size: int = Field(32, ge=1)
    final_epochs: int = Field(5, ge=0)
    include_classifier: bool = True
    val_fraction: float = Field(0.1, gt=0, lt=1)


class OutputSection(_Section):
    dir: str = "runs/default"


class ExperimentConfig(_Section):
    seed: int = Field(0, ge=0)
    threads: int = Field(1, ge=1)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    partition: PartitionSection = Field(default_factory=PartitionSection)
    model: ModelSection = Field(default_factory=ModelSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    eval_attack: Optional[AttackSection] = None  # None -> same as attack
    byzantine: ByzantineSection = Field(default_factory=ByzantineSection)
    phase1: Phase1Section = Field(default_factory=Phase1Section)
    phase2: Phase2Section = Field(default_factory=Phase2Section)
    output: OutputSection = Field(default_factory=OutputSection)

    # -- text round trip --------------------------------------------------
    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        """sha256 of the canonical JSON form, seed included.

        Where the run is written and how many threads it uses do not change
        any result, so neither is part of the hash.
        """
        data = self.to_dict()
        data.pop("output")
        data.pop("threads")
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, out: str | None = None,
                       threads: int | None = None) -> "ExperimentConfig":
        data = self.to_dict()
        if seed is not None:
            data["seed"] = seed
        if out is not None:
            data["output"]["dir"] = out
        if threads is not None:
            data["threads"] = threads
        return ExperimentConfig.model_validate(data)

    # -- runtime objects ----------------------------------------------------
    def byzantine_spec(self) -> ByzantineSpec:
        b = self.byzantine
        return ByzantineSpec.build(b.mode, self.partition.num_clients, b.rho, self.dataset.num_classes,
                                   self.seed, b.mpaf_scale, b.flip_rule)

    def phase1_config(self) -> Phase1Config:
        p = self.phase1
        return Phase1Config(
            rounds=p.rounds, local_epochs=p.local_epochs, learning_rate=p.learning_rate,
            batch_size=p.batch_size, rank=self.model.rank, knn_k=p.knn_k, bandwidth=p.bandwidth,
            eta=p.eta, lambda1=p.lambda1, lambda2=p.lambda2, gamma=p.gamma, eps_smooth=p.eps_smooth,
            tree_depth=p.tree_depth, kappa=p.kappa, trim_fraction=p.trim_fraction,
            pgd=self.attack.build(), eval_attack=self.evaluation_attack(),
            byzantine=self.byzantine_spec(), aggregator=p.aggregator, sharing=p.sharing,
            root_filter=p.root_filter, threads=self.threads, seed=self.seed,
        )

    def phase2_config(self) -> Phase2Config:
        p = self.phase2
        return Phase2Config(
            outer_steps=p.outer_steps, inner_steps=p.inner_steps, beta=p.beta, lambda3=p.lambda3,
            budget=p.budget, budget_fraction=p.budget_fraction, learning_rate=p.learning_rate,
            gate_lr=p.gate_lr, gate_init=p.gate_init, batch_size=p.batch_size,
            final_epochs=p.final_epochs, include_classifier=p.include_classifier,
            val_fraction=p.val_fraction, attack=self.attack.build(), seed=self.seed,
        )

    def evaluation_attack(self) -> AdvPerturbation:
        return (self.eval_attack or self.attack).build()


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping of sections")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_config(path) -> ExperimentConfig:
    """Read and validate a config file; OSError propagates for missing or unreadable files."""
    return parse_config(Path(path).read_text(encoding="utf-8"))
