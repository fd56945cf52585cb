"""Inference-time evasion attacks (FGSM, PGD) and training-time Byzantine behaviours."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Dataset
from .model import FlatVector, backprop, forward

BYZANTINE_MODES = ("none", "label_flip", "mpaf")


@dataclass(frozen=True)
class AdvPerturbation:
    epsilon: float = 8 / 255
    step_size: float | None = None  # None -> epsilon / 4
    iterations: int = 10
    random_start: bool = True
    clamp: tuple[float, float] = (-np.inf, np.inf)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.clamp[0] < self.clamp[1]:
            raise ValueError("clamp needs lo < hi")
        if self.iterations == 1 and not self.random_start and self.step > self.epsilon:
            raise ValueError("single-step attack needs step_size <= epsilon")

    @property
    def step(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


def _input_grad(model, x, y) -> np.ndarray:
    logits = forward(model, x)
    _, dlogits = nn.cross_entropy(logits, y)
    _, _, dx = backprop(model, x, dlogits)
    if not np.all(np.isfinite(dx)):
        raise FloatingPointError("non-finite input gradient")
    return dx


def fgsm(model, x, y, p: AdvPerturbation) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x_adv = x + p.epsilon * np.sign(_input_grad(model, x, y))
    return np.clip(x_adv, *p.clamp)


def pgd(model, x, y, p: AdvPerturbation, rng: np.random.Generator | None = None) -> np.ndarray:
    """Signed-gradient ascent projected onto the l-inf ball around ``x`` and the clamp box."""
    x = np.asarray(x, dtype=np.float64)
    if p.iterations == 0 or p.epsilon == 0:
        return x.copy()
    lo, hi = x - p.epsilon, x + p.epsilon
    x_adv = x.copy()
    if p.random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        x_adv = np.clip(x + rng.uniform(-p.epsilon, p.epsilon, size=x.shape), *p.clamp)
    for _ in range(p.iterations):
        x_adv = x_adv + p.step * np.sign(_input_grad(model, x_adv, y))
        x_adv = np.clip(np.clip(x_adv, lo, hi), *p.clamp)
    return x_adv


@dataclass(frozen=True)
class ByzantineSpec:
    mode: str = "none"
    malicious_ids: frozenset = field(default_factory=frozenset)
    rho: float = 0.0
    mpaf_scale: float = 10.0
    flip_rule: tuple = ()

    def __post_init__(self):
        if self.mode not in BYZANTINE_MODES:
            raise ValueError(f"unknown byzantine mode {self.mode!r}")
        object.__setattr__(self, "malicious_ids", frozenset(int(i) for i in self.malicious_ids))
        object.__setattr__(self, "flip_rule", tuple(int(v) for v in self.flip_rule))
        if self.mode == "label_flip":
            check_derangement(self.flip_rule)
        if self.mpaf_scale <= 0:
            raise ValueError("mpaf_scale must be > 0")

    @classmethod
    def build(cls, mode: str, num_clients: int, rho: float, num_classes: int, seed: int,
              mpaf_scale: float = 10.0, flip_rule=None) -> "ByzantineSpec":
        """Pick ``round(rho * N)`` malicious clients at random (deterministic in ``seed``)."""
        if mode == "none" or rho == 0:
            return cls("none", frozenset(), 0.0, mpaf_scale, ())
        count = int(round(rho * num_clients))
        ids = np.random.default_rng(seed).choice(num_clients, size=count, replace=False)
        rule = tuple(flip_rule) if flip_rule is not None else tuple((c + 1) % num_classes for c in range(num_classes))
        return cls(mode, frozenset(ids.tolist()), rho, mpaf_scale, rule if mode == "label_flip" else ())

    def is_malicious(self, client_id: int) -> bool:
        return self.mode != "none" and client_id in self.malicious_ids


def check_derangement(rule) -> None:
    rule = list(rule)
    if sorted(rule) != list(range(len(rule))):
        raise ValueError(f"flip rule {rule} is not a permutation")
    if any(r == i for i, r in enumerate(rule)):
        raise ValueError(f"flip rule {rule} has a fixed point; a derangement is required")


def apply_label_flip(ds: Dataset, spec: ByzantineSpec) -> Dataset:
    if spec.mode != "label_flip":
        raise ValueError("apply_label_flip needs mode 'label_flip'")
    rule = np.asarray(spec.flip_rule, dtype=np.int64)
    if len(rule) != ds.num_classes:
        raise ValueError("flip rule length must equal the number of classes")
    return Dataset(ds.features, rule[ds.labels], ds.num_classes, f"{ds.name}-flipped")


def mpaf_update(current_global: FlatVector, attacker_target: FlatVector, scale: float) -> FlatVector:
    """Poisoned upload dragging the aggregate toward the attacker's fake base model."""
    current_global.check_layout(attacker_target)
    return current_global.with_values(
        current_global.values + scale * (attacker_target.values - current_global.values)
    )
