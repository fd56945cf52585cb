"""Phase 2: gated layer selection on the fused model, then budgeted benign fine-tuning.

Each selectable layer r (every backbone layer, optionally the classifier)
carries a sigmoid gate z_r. The forward pass uses
``w_eff_r = w_fus_r + z_r * delta_r`` where ``delta_r`` is what a few inner
SGD steps on benign data accumulated. Outer steps move the gate logits on
``acc - beta * rob + lambda3 * [sum z - B]_+`` and the model is reset to
``w_fus`` before the next inner loop.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .attacks import AdvPerturbation, pgd
from .data import Dataset, train_test_split
from .losses import phase2_objective
from .model import ClientModel, FusedModel, fuse, train_dense

log = logging.getLogger(__name__)


def sigmoid(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))


@dataclass
class GateVector:
    logits: np.ndarray
    budget: int
    selected: tuple | None = None

    @property
    def values(self) -> np.ndarray:
        """Sigmoid gates during search; 0/1 indicators once projected."""
        if self.selected is None:
            return sigmoid(self.logits)
        z = np.zeros(len(self.logits))
        z[list(self.selected)] = 1.0
        return z

    def project(self) -> tuple:
        """Keep the ``budget`` largest gates (ties go to the lower layer index)."""
        order = sorted(range(len(self.logits)), key=lambda r: (-self.logits[r], r))
        self.selected = tuple(sorted(order[:self.budget]))
        return self.selected


@dataclass(frozen=True)
class Phase2Config:
    outer_steps: int = 10  # T3
    inner_steps: int = 20  # T4
    beta: float = 5.0
    lambda3: float = 1.0
    budget: int | None = None  # absolute layer count; None -> derived from budget_fraction
    budget_fraction: float = 0.25
    learning_rate: float = 0.005
    gate_lr: float = 1.0
    gate_init: float = 0.0
    batch_size: int = 32
    final_epochs: int = 5
    include_classifier: bool = True
    val_fraction: float = 0.1
    attack: AdvPerturbation = field(default_factory=AdvPerturbation)
    seed: int = 0

    def __post_init__(self):
        if self.outer_steps < 0 or self.inner_steps < 0 or self.final_epochs < 0:
            raise ValueError("step counts must be >= 0")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be >= 0")
        if not 0 <= self.budget_fraction <= 1:
            raise ValueError("budget_fraction must lie in [0, 1]")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def resolve_budget(self, num_selectable: int) -> tuple[int, bool]:
        """(B, clamped). B larger than the number of selectable layers is clamped."""
        b = self.budget if self.budget is not None else max(1, int(round(self.budget_fraction * num_selectable)))
        if b > num_selectable:
            return num_selectable, True
        return b, False


@dataclass
class Phase2Report:
    client_id: int
    budget: int
    clamped: bool
    selected: tuple
    gate_history: list[list[float]]
    objective_history: list[float]
    reset_exact: bool

    def to_record(self) -> dict:
        return {
            "client_id": self.client_id,
            "budget": self.budget,
            "clamped": self.clamped,
            "selected": list(self.selected),
            "gate_history": self.gate_history,
            "objective_history": self.objective_history,
            "reset_exact": self.reset_exact,
        }


def _selectable(model: FusedModel, include_classifier: bool) -> list[np.ndarray]:
    return list(model.layers) + ([model.classifier] if include_classifier else [])


def _split(model: FusedModel, mats: list[np.ndarray]) -> tuple[list[np.ndarray], np.ndarray]:
    n = len(model.layers)
    return mats[:n], (mats[n] if len(mats) > n else model.classifier)


def effective(w_fus: FusedModel, deltas: list[np.ndarray], z, include_classifier: bool) -> FusedModel:
    """w_fus + z_r * delta_r on every selectable layer."""
    mats = [w + zr * d for w, zr, d in zip(_selectable(w_fus, include_classifier), z, deltas)]
    layers, classifier = _split(w_fus, mats)
    return FusedModel(layers, list(w_fus.activations), classifier, w_fus.client_id)


def _ce_grads(model: FusedModel, x, y, include_classifier: bool) -> tuple[float, list[np.ndarray]]:
    cache = nn.forward(model.layers, model.activations, model.classifier, x)
    value, dlogits = nn.cross_entropy(cache.logits, y)
    d_w, d_c, _ = nn.backward(model.layers, model.activations, model.classifier, cache, dlogits)
    return value, list(d_w) + ([d_c] if include_classifier else [])


def gate_objective(w_fus: FusedModel, deltas, logits, x, y, x_adv, beta: float, lambda3: float,
                   budget: float, include_classifier: bool = True) -> tuple[float, np.ndarray]:
    """Gate-search objective and its gradient w.r.t. the gate logits.

    The robustness term is the negated adversarial cross-entropy, so lowering
    the objective lowers clean loss and adversarial loss together. ``x_adv``
    is treated as fixed.
    """
    z = sigmoid(logits)
    model = effective(w_fus, deltas, z, include_classifier)
    acc, g_acc = _ce_grads(model, x, y, include_classifier)
    adv, g_adv = _ce_grads(model, x_adv, y, include_classifier)
    value = phase2_objective(acc, -adv, z, beta, lambda3, budget)
    # dJ/dz_r = <dJ/dW_eff_r, delta_r> (+ lambda3 when over budget); chain through the sigmoid
    dz = np.array([np.sum((ga + beta * gv) * d) for ga, gv, d in zip(g_acc, g_adv, deltas)])
    if z.sum() > budget:
        dz = dz + lambda3
    return value, dz * z * (1.0 - z)


def _inner_loop(w_fus: FusedModel, z, x, y, cfg: Phase2Config, rng) -> list[np.ndarray]:
    """T4 SGD steps on benign minibatches with the gates frozen; returns the accumulated deltas."""
    deltas = [np.zeros_like(w) for w in _selectable(w_fus, cfg.include_classifier)]
    n = len(y)
    for _ in range(cfg.inner_steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        model = effective(w_fus, deltas, z, cfg.include_classifier)
        _, grads = _ce_grads(model, x[idx], y[idx], cfg.include_classifier)
        for d, g, zr in zip(deltas, grads, z):
            d -= cfg.learning_rate * zr * g
    return deltas


def final_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, client_id, 0x6A7E, 1])


def run_phase2(model: ClientModel | FusedModel, train: Dataset, cfg: Phase2Config) -> tuple[FusedModel, tuple, Phase2Report]:
    """Fuse, search gates for T3 outer steps, project to the top B, retrain those layers on benign data."""
    w_fus = fuse(model) if isinstance(model, ClientModel) else model.copy()
    frozen_ref = w_fus.copy()
    n_sel = len(_selectable(w_fus, cfg.include_classifier))
    budget, clamped = cfg.resolve_budget(n_sel)
    if clamped:
        msg = f"budget {cfg.budget} exceeds {n_sel} selectable layers; using all of them"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        log.warning(msg)
    gates = GateVector(np.full(n_sel, cfg.gate_init, dtype=np.float64), budget)
    rng = np.random.default_rng([cfg.seed, w_fus.client_id, 0x6A7E])

    fit, val = train_test_split(train, cfg.val_fraction, seed=cfg.seed + w_fus.client_id)
    if len(fit) == 0 or len(val) == 0:
        fit = val = train
    history, objective = [], []
    reset_exact = True
    for _ in range(cfg.outer_steps):
        # every inner loop starts from the fused weights
        reset_exact &= all(np.array_equal(a, b) for a, b in zip(
            _selectable(w_fus, cfg.include_classifier), _selectable(frozen_ref, cfg.include_classifier)))
        z = gates.values
        deltas = _inner_loop(w_fus, z, fit.features, fit.labels, cfg, rng)
        x_adv = pgd(effective(w_fus, deltas, z, cfg.include_classifier), val.features, val.labels, cfg.attack, rng)
        value, grad = gate_objective(w_fus, deltas, gates.logits, val.features, val.labels, x_adv,
                                     cfg.beta, cfg.lambda3, budget, cfg.include_classifier)
        gates.logits = gates.logits - cfg.gate_lr * grad
        history.append(gates.logits.tolist())
        objective.append(value)

    selected = gates.project()
    final = w_fus.copy()
    if selected and cfg.final_epochs:
        n_layers = len(final.layers)
        trainable = {r if r < n_layers else n_layers for r in selected}
        # own stream: the retrain does not depend on how much randomness the search consumed
        train_dense(final, train.features, train.labels, epochs=cfg.final_epochs, lr=cfg.learning_rate,
                    batch_size=cfg.batch_size, rng=final_rng(cfg.seed, w_fus.client_id), trainable=trainable)
    report = Phase2Report(w_fus.client_id, budget, clamped, selected, history, objective, bool(reset_exact))
    return final, selected, report
