"""Adapter-augmented MLP: frozen pretrained weights plus a frozen down-projection
and a trainable up-projection per layer, topped by a trainable classifier.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import nn
from .nn import IDENTITY, RELU, NonFiniteLossError, ShapeError

LossFn = Callable[[np.ndarray, np.ndarray], "tuple[float, np.ndarray]"]


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass
class AdapterLayer:
    w_pre: np.ndarray
    a_fixed: np.ndarray
    b_train: np.ndarray
    activation: str = RELU

    def __post_init__(self):
        # frozen parts are read-only arrays, so an accidental in-place update raises
        self.w_pre = _frozen(self.w_pre)
        self.a_fixed = _frozen(self.a_fixed)
        self.b_train = np.array(self.b_train, dtype=np.float64, copy=True)
        r_in, r_out = self.w_pre.shape
        rank = self.a_fixed.shape[1]
        if self.a_fixed.shape[0] != r_in or self.b_train.shape != (rank, r_out):
            raise ShapeError(
                f"adapter shapes {self.a_fixed.shape} x {self.b_train.shape} "
                f"do not factor a {self.w_pre.shape} weight"
            )
        if not 1 <= rank <= min(r_in, r_out):
            raise ShapeError(f"rank {rank} outside [1, {min(r_in, r_out)}]")
        if self.activation not in nn.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def r_in(self) -> int:
        return self.w_pre.shape[0]

    @property
    def r_out(self) -> int:
        return self.w_pre.shape[1]

    @property
    def rank(self) -> int:
        return self.a_fixed.shape[1]

    def weight(self) -> np.ndarray:
        return self.w_pre + self.a_fixed @ self.b_train


@dataclass
class ClientModel:
    layers: list[AdapterLayer]
    classifier: np.ndarray
    client_id: int = 0

    def __post_init__(self):
        self.classifier = np.array(self.classifier, dtype=np.float64, copy=True)
        for r in range(1, len(self.layers)):
            if self.layers[r].r_in != self.layers[r - 1].r_out:
                raise ShapeError(f"layer {r} input does not match layer {r - 1} output", layer=r)
        if self.layers and self.classifier.shape[0] != self.layers[-1].r_out:
            raise ShapeError("classifier input does not match last layer", layer=len(self.layers))
        if self.num_classes < 2:
            raise ShapeError("need at least two classes")

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[1]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def effective_weights(self) -> list[np.ndarray]:
        return [layer.weight() for layer in self.layers]

    def copy(self, client_id: int | None = None) -> "ClientModel":
        # frozen arrays are immutable and shared; trainable ones are copied
        layers = [AdapterLayer(l.w_pre, l.a_fixed, l.b_train, l.activation) for l in self.layers]
        return ClientModel(layers, self.classifier, self.client_id if client_id is None else client_id)

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(np.ascontiguousarray(layer.w_pre).tobytes())
            h.update(np.ascontiguousarray(layer.a_fixed).tobytes())
        return h.hexdigest()


@dataclass
class FusedModel:
    """Plain dense network; every layer and the classifier are trainable."""

    layers: list[np.ndarray]
    activations: list[str]
    classifier: np.ndarray
    client_id: int = 0

    def __post_init__(self):
        self.layers = [np.array(w, dtype=np.float64, copy=True) for w in self.layers]
        self.classifier = np.array(self.classifier, dtype=np.float64, copy=True)
        if len(self.layers) != len(self.activations):
            raise ShapeError("one activation per layer required")

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[1]

    def effective_weights(self) -> list[np.ndarray]:
        return self.layers

    def copy(self) -> "FusedModel":
        return FusedModel(self.layers, list(self.activations), self.classifier, self.client_id)


Model = Union[ClientModel, FusedModel]


@dataclass(frozen=True)
class FlatVector:
    values: np.ndarray
    layout: tuple  # ((layer index, rows, cols), ...)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", tuple(tuple(int(v) for v in d) for d in self.layout))
        expected = sum(rows * cols for _, rows, cols in self.layout)
        if values.ndim != 1 or values.size != expected:
            raise ShapeError(f"flat vector length {values.size} != layout total {expected}")

    def __len__(self) -> int:
        return self.values.size

    def check_layout(self, other: "FlatVector") -> None:
        if self.layout != other.layout:
            raise ShapeError(f"layout mismatch: {self.layout} vs {other.layout}")

    def with_values(self, values) -> "FlatVector":
        return FlatVector(np.asarray(values, dtype=np.float64), self.layout)


@dataclass
class Gradients:
    b: list[np.ndarray]
    classifier: np.ndarray
    inputs: np.ndarray | None = field(default=None, repr=False)

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.b, other.b)], self.classifier + other.classifier)

    def scaled(self, factor: float) -> "Gradients":
        return Gradients([factor * b for b in self.b], factor * self.classifier)

    @classmethod
    def zeros_like(cls, model: "ClientModel") -> "Gradients":
        return cls([np.zeros_like(l.b_train) for l in model.layers], np.zeros_like(model.classifier))


def forward(model: Model, x) -> np.ndarray:
    """Raw logits (batch x C)."""
    return nn.forward(model.effective_weights(), model.activations, model.classifier, x).logits


def backprop(model: Model, x, dlogits):
    """Gradients of a logit-space upstream signal w.r.t. effective weights, classifier, input."""
    weights = model.effective_weights()
    cache = nn.forward(weights, model.activations, model.classifier, x)
    return nn.backward(weights, model.activations, model.classifier, cache, dlogits)


def param_gradients(model: ClientModel, x, dlogits) -> Gradients:
    """Pull a logit-space gradient back to adapter-B and classifier gradients."""
    d_weights, d_classifier, d_input = backprop(model, x, dlogits)
    return Gradients([l.a_fixed.T @ dw for l, dw in zip(model.layers, d_weights)], d_classifier, d_input)


def gradients(model: ClientModel, loss_fn: LossFn, x, y, *, batch_index: int = 0) -> tuple[float, Gradients]:
    """Loss value and gradients restricted to the trainable parameters.

    ``loss_fn(logits, y)`` must return ``(value, d value / d logits)``.
    Frozen tensors never receive a gradient entry.
    """
    weights = model.effective_weights()
    cache = nn.forward(weights, model.activations, model.classifier, x)
    if not np.all(np.isfinite(cache.logits)):
        raise NonFiniteLossError("non-finite logits", batch_index)
    value, dlogits = loss_fn(cache.logits, y)
    if not np.isfinite(value):
        raise NonFiniteLossError("non-finite loss", batch_index)
    d_weights, d_classifier, d_input = nn.backward(
        weights, model.activations, model.classifier, cache, dlogits
    )
    # W = P + A B  =>  dL/dB = A^T dL/dW
    d_b = [layer.a_fixed.T @ dw for layer, dw in zip(model.layers, d_weights)]
    return float(value), Gradients(d_b, d_classifier, d_input)


def sgd_step(model: ClientModel, grads: Gradients, lr: float) -> None:
    for layer, g in zip(model.layers, grads.b):
        layer.b_train -= lr * g
    model.classifier -= lr * grads.classifier


def adapter_layout(model: ClientModel) -> tuple:
    return tuple((r, layer.rank, layer.r_out) for r, layer in enumerate(model.layers))


def flatten_adapters(model: ClientModel) -> FlatVector:
    values = np.concatenate([layer.b_train.ravel() for layer in model.layers])
    return FlatVector(values, adapter_layout(model))


def unflatten_adapters(v: FlatVector, model: ClientModel) -> ClientModel:
    """Overwrite ``model``'s adapter-B matrices in place from ``v``; returns the model."""
    expected = adapter_layout(model)
    if tuple(v.layout) != expected:
        raise ShapeError(f"layout {v.layout} does not match model layout {expected}")
    offset = 0
    for layer in model.layers:
        n = layer.b_train.size
        layer.b_train = v.values[offset:offset + n].reshape(layer.b_train.shape).copy()
        offset += n
    return model


def fuse(model: ClientModel) -> FusedModel:
    return FusedModel(model.effective_weights(), model.activations, model.classifier, model.client_id)


def init_adapter_model(pretrained: FusedModel, rank: int, rng: np.random.Generator) -> ClientModel:
    """Attach zero-initialized adapters with Gaussian (var 1/r_in) frozen down-projections."""
    layers = []
    for w, act in zip(pretrained.layers, pretrained.activations):
        r_in, r_out = w.shape
        a = rng.normal(0.0, 1.0 / np.sqrt(r_in), size=(r_in, rank))
        layers.append(AdapterLayer(w, a, np.zeros((rank, r_out)), act))
    return ClientModel(layers, pretrained.classifier)


def init_dense(dims: list[int], num_classes: int, rng: np.random.Generator) -> FusedModel:
    """He-initialized MLP ``dims[0] -> ... -> dims[-1] -> num_classes``."""
    layers = [rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    activations = [RELU] * (len(layers) - 1) + [IDENTITY]
    classifier = rng.normal(0.0, np.sqrt(1.0 / dims[-1]), size=(dims[-1], num_classes))
    return FusedModel(layers, activations, classifier)


def train_dense(model: FusedModel, x, y, *, epochs: int, lr: float, batch_size: int,
                rng: np.random.Generator, trainable=None) -> FusedModel:
    """Minibatch SGD on mean cross-entropy, in place.

    ``trainable`` is an optional set of selectable-layer indices, where index
    ``len(model.layers)`` denotes the classifier; other layers stay untouched.
    """
    n_layers = len(model.layers)
    if trainable is None:
        trainable = set(range(n_layers + 1))
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            cache = nn.forward(model.layers, model.activations, model.classifier, x[idx])
            _, dlogits = nn.cross_entropy(cache.logits, y[idx])
            d_w, d_c, _ = nn.backward(model.layers, model.activations, model.classifier, cache, dlogits)
            for r in trainable:
                if r == n_layers:
                    model.classifier -= lr * d_c
                else:
                    model.layers[r] -= lr * d_w[r]
    return model


def pretrain_backbone(x, y, num_classes: int, hidden: list[int], *, epochs: int, lr: float,
                      batch_size: int, rng: np.random.Generator) -> FusedModel:
    """Produce the frozen 'pretrained' network on a pooled benign split."""
    model = init_dense([x.shape[1], *hidden], num_classes, rng)
    return train_dense(model, x, y, epochs=epochs, lr=lr, batch_size=batch_size, rng=rng)
