"""Class-balanced adversarial loss, clean/adversarial KL consistency, proximal
pull toward a global+expert reference, and the gate-search objective.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .model import ClientModel, FlatVector, Gradients, flatten_adapters, forward, param_gradients


@dataclass(frozen=True)
class ClassWeights:
    base: np.ndarray
    adaptive: np.ndarray
    normalized: np.ndarray
    gamma: float = 0.9
    eps_smooth: float = 0.9
    epoch: int = 0

    @classmethod
    def initial(cls, num_classes: int, gamma: float = 0.9, eps_smooth: float = 0.9) -> "ClassWeights":
        """Uniform 1/C start so early epochs are class-agnostic."""
        _check_gamma(gamma)
        u = np.full(num_classes, 1.0 / num_classes)
        return cls(np.ones(num_classes), u, u.copy(), gamma, eps_smooth, 0)

    def advance(self, counts) -> "ClassWeights":
        """Weights for the next local epoch given the shard's class counts."""
        base = base_weights(counts, self.gamma)
        adaptive = smooth_weights(self, base, self.eps_smooth)
        return replace(self, base=base, adaptive=adaptive,
                       normalized=normalize_weights(adaptive), epoch=self.epoch + 1)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 20.0
    lambda2: float = 0.001
    eta: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or not 0 <= self.eta <= 1:
            raise ValueError("need lambda1, lambda2 >= 0 and eta in [0, 1]")


def _check_gamma(gamma: float) -> None:
    if not 0.5 <= gamma <= 0.99:
        raise ValueError(f"gamma {gamma} outside [0.5, 0.99]")


def base_weight(n_c: int, gamma: float) -> float:
    """(1 - gamma) / (1 - gamma**n_c); an absent class (n_c = 0) gets the inert weight 1."""
    _check_gamma(gamma)
    if n_c < 0:
        raise ValueError("class count must be >= 0")
    if n_c == 0:
        return 1.0
    return (1.0 - gamma) / (1.0 - gamma ** n_c)


def base_weights(counts, gamma: float) -> np.ndarray:
    return np.array([base_weight(int(n), gamma) for n in counts])


def smooth_weights(prev, base_now, eps_smooth: float) -> np.ndarray:
    prev_ada = prev.adaptive if isinstance(prev, ClassWeights) else np.asarray(prev, dtype=np.float64)
    base_now = np.asarray(base_now, dtype=np.float64)
    if prev_ada.shape != base_now.shape:
        raise ValueError("weight vectors differ in length")
    return eps_smooth * prev_ada + (1.0 - eps_smooth) * base_now


def normalize_weights(adaptive) -> np.ndarray:
    adaptive = np.asarray(adaptive, dtype=np.float64)
    total = adaptive.sum()
    if not total > 0:
        raise ValueError("class weights sum to zero")
    return adaptive / total


def _per_class(weights) -> np.ndarray:
    return weights.normalized if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)


def loss_A(model: ClientModel, x_adv, y, weights) -> tuple[float, Gradients]:
    """Class-weighted cross-entropy on adversarial inputs, mean over the batch."""
    h = _per_class(weights)
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= len(h)):
        raise ValueError("label out of range")
    logits = forward(model, x_adv)
    value, dlogits = nn.cross_entropy(logits, y, sample_weights=h[y])
    return value, param_gradients(model, x_adv, dlogits)


def kl_from_logits(clean_logits, adv_logits):
    """Mean KL(softmax(clean) || softmax(adv)) and its gradients w.r.t. both logit sets."""
    n = clean_logits.shape[0]
    lp, lq = nn.log_softmax(clean_logits), nn.log_softmax(adv_logits)
    p, q = np.exp(lp), np.exp(lq)
    per_sample = (p * (lp - lq)).sum(axis=1)
    d_clean = p * ((lp - lq) - per_sample[:, None]) / n
    d_adv = (q - p) / n
    return float(per_sample.mean()), d_clean, d_adv


def loss_S(model: ClientModel, x, x_adv) -> tuple[float, Gradients]:
    x, x_adv = np.asarray(x, dtype=np.float64), np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ValueError("clean and adversarial batches differ in shape")
    a, b = forward(model, x), forward(model, x_adv)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise FloatingPointError("non-finite logits")
    value, d_clean, d_adv = kl_from_logits(a, b)
    return max(value, 0.0), param_gradients(model, x, d_clean) + param_gradients(model, x_adv, d_adv)


def reference_model(w_global: FlatVector, w_expert: FlatVector, eta: float) -> FlatVector:
    w_global.check_layout(w_expert)
    return w_global.with_values((1.0 - eta) * w_global.values + eta * w_expert.values)


def loss_R(w_local: FlatVector, w_ref: FlatVector) -> tuple[float, FlatVector]:
    w_local.check_layout(w_ref)
    diff = w_local.values - w_ref.values
    return float(diff @ diff), w_local.with_values(2.0 * diff)


def _unflatten_grad(model: ClientModel, g: FlatVector) -> list[np.ndarray]:
    out, offset = [], 0
    for layer in model.layers:
        n = layer.b_train.size
        out.append(g.values[offset:offset + n].reshape(layer.b_train.shape))
        offset += n
    return out


def total_loss(model: ClientModel, x, x_adv, y, weights, w_ref: FlatVector | None,
               lw: LossWeights) -> tuple[float, Gradients, dict]:
    """L_A + lambda1 * L_S + lambda2 * L_R, with gradients on adapters and classifier."""
    la, g = loss_A(model, x_adv, y, weights)
    ls = lr = 0.0
    if lw.lambda1:
        ls, gs = loss_S(model, x, x_adv)
        g = g + gs.scaled(lw.lambda1)
    if lw.lambda2 and w_ref is not None:
        lr, gr = loss_R(flatten_adapters(model), w_ref)
        g = g + Gradients([lw.lambda2 * d for d in _unflatten_grad(model, gr)],
                          np.zeros_like(model.classifier))
    value = la + lw.lambda1 * ls + lw.lambda2 * lr
    return value, g, {"L_A": la, "L_S": ls, "L_R": lr, "total": value}


def phase2_objective(acc_loss: float, rob_term: float, gates, beta: float, lambda3: float,
                     budget: float) -> float:
    """acc - beta * rob + lambda3 * max(sum(gates) - budget, 0)."""
    z = np.asarray(getattr(gates, "values", gates), dtype=np.float64)
    return float(acc_loss - beta * rob_term + lambda3 * max(z.sum() - budget, 0.0))
