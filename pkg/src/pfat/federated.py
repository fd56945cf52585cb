"""Phase 1: federated adversarial fine-tuning of adapters with personal classifiers.

Clients are simulated in-process. The :class:`Server` is handed nothing but
:class:`~pfat.aggregation.Upload` records; client data and (in the default
adapter-sharing mode) classifiers never leave :class:`ClientState`.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .aggregation import (
    AggregationReport, AggregatorConfig, Upload, fedavg_report, robust_aggregate,
)
from .attacks import AdvPerturbation, ByzantineSpec, apply_label_flip, mpaf_update, pgd
from .data import Dataset, class_counts
from .evaluation import evaluate, grad_proxy_sq
from .losses import ClassWeights, LossWeights, reference_model, total_loss
from .model import (
    ClientModel, FlatVector, FusedModel, flatten_adapters, init_adapter_model, sgd_step,
    unflatten_adapters,
)

log = logging.getLogger(__name__)

AGGREGATORS = ("robust", "fedavg")
SHARING = ("adapters", "full")


@dataclass(frozen=True)
class Phase1Config:
    rounds: int = 10  # T1
    local_epochs: int = 1  # T2
    learning_rate: float = 0.05
    batch_size: int = 32
    rank: int = 2
    knn_k: int = 5
    bandwidth: str | float = "median"
    eta: float = 0.5
    lambda1: float = 20.0
    lambda2: float = 0.001
    gamma: float = 0.9
    eps_smooth: float = 0.9
    tree_depth: int = 2
    kappa: float = 3.0
    trim_fraction: float = 0.2
    pgd: AdvPerturbation = field(default_factory=AdvPerturbation)
    eval_attack: AdvPerturbation | None = None  # None -> same as pgd
    byzantine: ByzantineSpec = field(default_factory=ByzantineSpec)
    aggregator: str = "robust"
    sharing: str = "adapters"  # "full" also averages classifiers (whole-model baseline)
    root_filter: bool = True
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs < 1:
            raise ValueError("need rounds >= 0 and local_epochs >= 1")
        if self.learning_rate < 0 or self.batch_size < 1:
            raise ValueError("need learning_rate >= 0 and batch_size >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}")
        if self.sharing not in SHARING:
            raise ValueError(f"sharing must be one of {SHARING}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.eta)

    @property
    def aggregator_config(self) -> AggregatorConfig:
        return AggregatorConfig(self.knn_k, self.bandwidth, self.tree_depth, self.kappa,
                                self.trim_fraction, root_filter=self.root_filter)

    @property
    def zeta(self) -> float:
        """Equivalent step size of one round for the descent diagnostic."""
        return self.learning_rate * self.local_epochs


@dataclass
class ClientState:
    client_id: int
    model: ClientModel
    train: Dataset
    test: Dataset
    weights: ClassWeights
    malicious: bool = False
    mpaf_target: FlatVector | None = None


@dataclass
class RoundReport:
    round: int
    losses: dict[int, dict[str, float]]
    grad_norm_sq: float
    aggregation: AggregationReport
    metrics: dict[int, dict[str, float]]

    def to_record(self) -> dict:
        return {
            "round": self.round,
            "losses": {str(k): v for k, v in self.losses.items()},
            "grad_norm_sq": self.grad_norm_sq,
            "aggregation": self.aggregation.to_record(),
            "metrics": {str(k): v for k, v in self.metrics.items()},
        }


@dataclass
class Phase1Result:
    clients: list[ClientState]
    global_update: FlatVector
    reports: list[RoundReport]

    @property
    def models(self) -> list[ClientModel]:
        return [c.model for c in self.clients]


class Server:
    """Holds the global vector and the latest experts; sees uploads only."""

    def __init__(self, initial_global: FlatVector, rule: str, cfg: AggregatorConfig):
        self.global_update = initial_global
        self.rule = rule
        self.cfg = cfg
        self.last_report: AggregationReport | None = None

    def download(self, client_id: int) -> tuple[FlatVector, FlatVector]:
        if self.last_report is None:
            return self.global_update, self.global_update
        return self.global_update, self.last_report.expert_for(client_id)

    def aggregate(self, uploads: list[Upload]) -> AggregationReport:
        for u in uploads:
            if not isinstance(u, Upload):
                raise TypeError("the server accepts Upload records only")
        if self.rule == "fedavg":
            report = fedavg_report(uploads)
        else:
            report = robust_aggregate(uploads, self.cfg, previous_global=self.global_update)
            if report.aborted:
                log.warning("every upload was filtered out; keeping the previous global")
        self.global_update = report.global_update
        self.last_report = report
        return report


# -- what travels between client and server ---------------------------------

def client_vector(model: ClientModel, sharing: str) -> FlatVector:
    v = flatten_adapters(model)
    if sharing == "adapters":
        return v
    c = model.classifier
    return FlatVector(np.concatenate([v.values, c.ravel()]),
                      v.layout + ((len(model.layers), c.shape[0], c.shape[1]),))


def adapter_part(v: FlatVector, model: ClientModel) -> FlatVector:
    n = sum(l.b_train.size for l in model.layers)
    return FlatVector(v.values[:n], v.layout[:len(model.layers)])


def apply_download(model: ClientModel, v: FlatVector, sharing: str) -> None:
    unflatten_adapters(adapter_part(v, model), model)
    if sharing == "full":
        n = sum(l.b_train.size for l in model.layers)
        model.classifier = v.values[n:].reshape(model.classifier.shape).copy()


# -- client side ------------------------------------------------------------

def _client_rng(seed: int, round_index: int, client_id: int, stream: int = 0) -> np.random.Generator:
    # keyed on (seed, round, client) so results do not depend on thread scheduling
    return np.random.default_rng([seed, round_index, client_id, stream])


def local_train_epoch(client: ClientState, w_ref: FlatVector | None, cfg: Phase1Config,
                      rng: np.random.Generator) -> dict[str, float]:
    """One pass of minibatch SGD on the three-term loss; returns mean loss components."""
    client.weights = client.weights.advance(class_counts(client.train))
    x, y = client.train.features, client.train.labels
    order = rng.permutation(len(y))
    sums = {"L_A": 0.0, "L_S": 0.0, "L_R": 0.0, "total": 0.0}
    batches = 0
    for start in range(0, len(y), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        xb, yb = x[idx], y[idx]
        x_adv = pgd(client.model, xb, yb, cfg.pgd, rng)
        _, grads, parts = total_loss(client.model, xb, x_adv, yb, client.weights, w_ref, cfg.loss_weights)
        sgd_step(client.model, grads, cfg.learning_rate)
        for k in sums:
            sums[k] += parts[k]
        batches += 1
    return {k: v / max(batches, 1) for k, v in sums.items()}


def _client_round(client: ClientState, downloaded: tuple[FlatVector, FlatVector], cfg: Phase1Config,
                  round_index: int) -> tuple[Upload, dict[str, float] | None]:
    g, expert = downloaded
    if client.malicious and cfg.byzantine.mode == "mpaf":
        poisoned = mpaf_update(g, client.mpaf_target, cfg.byzantine.mpaf_scale)
        return Upload(client.client_id, poisoned, len(client.train)), None
    apply_download(client.model, g, cfg.sharing)
    w_ref = reference_model(adapter_part(g, client.model), adapter_part(expert, client.model), cfg.eta)
    rng = _client_rng(cfg.seed, round_index, client.client_id)
    per_epoch = [local_train_epoch(client, w_ref, cfg, rng) for _ in range(cfg.local_epochs)]
    losses = {k: float(np.mean([e[k] for e in per_epoch])) for k in per_epoch[0]}
    return Upload(client.client_id, client_vector(client.model, cfg.sharing), len(client.train)), losses


def _client_metrics(client: ClientState, cfg: Phase1Config, round_index: int) -> dict[str, float]:
    attack = cfg.eval_attack if cfg.eval_attack is not None else cfg.pgd
    return evaluate(client.model, client.test, attack, _client_rng(cfg.seed, round_index, client.client_id, 1))


def make_clients(shards: list[tuple[Dataset, Dataset]], pretrained: FusedModel, cfg: Phase1Config) -> list[ClientState]:
    """Attach the same frozen adapter down-projections to every client; poison where configured."""
    base = init_adapter_model(pretrained, cfg.rank, np.random.default_rng([cfg.seed, 0xADA]))
    spec = cfg.byzantine
    clients = []
    for cid, (train, test) in enumerate(shards):
        malicious = spec.is_malicious(cid)
        if malicious and spec.mode == "label_flip":
            train = apply_label_flip(train, spec)
        target = None
        if malicious and spec.mode == "mpaf":
            ref = client_vector(base, cfg.sharing)
            target = ref.with_values(np.random.default_rng([cfg.seed, cid, 0xBAD]).normal(size=len(ref)))
        clients.append(ClientState(cid, base.copy(client_id=cid), train, test,
                                   ClassWeights.initial(pretrained.num_classes, cfg.gamma, cfg.eps_smooth),
                                   malicious, target))
    return clients


def run_phase1(cfg: Phase1Config, shards: list[tuple[Dataset, Dataset]], pretrained: FusedModel, *,
               observer: Callable[[int, list[Upload], AggregationReport], None] | None = None,
               evaluate_rounds: bool = True) -> Phase1Result:
    """Federated rounds: download, local adversarial training, upload, aggregate.

    ``shards`` holds one (train, test) pair per client. ``observer`` sees each
    round's uploads and aggregation report (used by audits and tests).
    """
    clients = make_clients(shards, pretrained, cfg)
    server = Server(client_vector(clients[0].model, cfg.sharing), cfg.aggregator, cfg.aggregator_config)
    reports: list[RoundReport] = []
    pool = ThreadPoolExecutor(max_workers=cfg.threads) if cfg.threads > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            downloads = [server.download(c.client_id) for c in clients]
            jobs = [(c, d, cfg, t) for c, d in zip(clients, downloads)]
            if pool is None:
                results = [_client_round(*j) for j in jobs]
            else:
                results = list(pool.map(lambda j: _client_round(*j), jobs))  # map keeps client order
            uploads = [u for u, _ in results]
            previous = server.global_update
            report = server.aggregate(uploads)
            if observer is not None:
                observer(t, uploads, report)
            # everyone ends the round holding the new global adapters (classifiers stay local)
            for c in clients:
                if not c.malicious or cfg.byzantine.mode != "mpaf":
                    apply_download(c.model, server.global_update, cfg.sharing)
            metrics = {}
            if evaluate_rounds:
                metrics = {c.client_id: _client_metrics(c, cfg, t) for c in clients}
            reports.append(RoundReport(
                t, {c.client_id: l for c, (_, l) in zip(clients, results) if l is not None},
                grad_proxy_sq(previous, server.global_update, cfg.zeta) if cfg.zeta > 0 else 0.0,
                report, metrics,
            ))
    finally:
        if pool is not None:
            pool.shutdown()
    return Phase1Result(clients, server.global_update, reports)
