"""Config-driven building blocks shared by the CLI and the experiment tests."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import (
    Dataset, PartitionSpec, dirichlet_partition, iid_partition, load_csv, make_blobs, train_test_split,
)
from .evaluation import evaluate
from .federated import Phase1Result, run_phase1
from .gating import Phase2Report, run_phase2
from .model import FusedModel, pretrain_backbone


@dataclass
class Prepared:
    pretrained: FusedModel
    pool: Dataset  # benign split the backbone was trained on
    shards: list[tuple[Dataset, Dataset]]  # (train, test) per client


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "csv":
        return load_csv(d.path, num_classes=d.num_classes)
    return make_blobs(d.num_classes, d.per_class, d.dim, d.spread, seed=cfg.seed, scale=d.scale)


def split_clients(ds: Dataset, cfg: ExperimentConfig) -> list[Dataset]:
    p = cfg.partition
    if p.iid:
        return iid_partition(ds, p.num_clients, cfg.seed)
    return dirichlet_partition(ds, PartitionSpec(p.num_clients, p.dirichlet_alpha, cfg.seed))


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Dataset -> (pretraining pool, federated remainder) -> client shards -> per-client 80/20 splits."""
    ds = build_dataset(cfg)
    rest, pool = train_test_split(ds, cfg.dataset.pretrain_fraction, seed=cfg.seed)
    m = cfg.model
    pretrained = pretrain_backbone(pool.features, pool.labels, ds.num_classes, list(m.hidden),
                                   epochs=m.pretrain_epochs, lr=m.pretrain_lr,
                                   batch_size=m.pretrain_batch_size, rng=np.random.default_rng([cfg.seed, 1]))
    shards = [train_test_split(s, cfg.partition.test_fraction, seed=cfg.seed + i)
              for i, s in enumerate(split_clients(rest, cfg))]
    return Prepared(pretrained, pool, shards)


def phase1(cfg: ExperimentConfig, prepared: Prepared, **kwargs) -> Phase1Result:
    return run_phase1(cfg.phase1_config(), prepared.shards, prepared.pretrained, **kwargs)


def phase2(cfg: ExperimentConfig, result: Phase1Result) -> list[tuple[FusedModel, Phase2Report]]:
    p2 = cfg.phase2_config()
    out = []
    for c in result.clients:
        model, _, report = run_phase2(c.model, c.train, p2)
        out.append((model, report))
    return out


def evaluate_models(cfg: ExperimentConfig, models, tests) -> dict[int, dict[str, float]]:
    """BA/AR per client with a fixed attack stream per client."""
    attack = cfg.evaluation_attack()
    return {i: evaluate(m, t, attack, np.random.default_rng([cfg.seed, i, 0xE7]))
            for i, (m, t) in enumerate(zip(models, tests))}


def mean_metrics(metrics: dict[int, dict[str, float]], ids=None) -> dict[str, float]:
    ids = list(metrics) if ids is None else list(ids)
    return {k: float(np.mean([metrics[i][k] for i in ids])) for k in ("BA", "AR")}
