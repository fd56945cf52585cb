"""Dense ReLU network forward/backward passes and softmax numerics.

Everything here works on plain lists of weight matrices so that the
adapter model, the fused model and the gated model can share one
backpropagation routine.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)


class ShapeError(ValueError):
    """Raised when an input or parameter does not fit the network layout."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, batch_index: int):
        super().__init__(f"{message} (batch {batch_index})")
        self.batch_index = batch_index


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each backbone layer, then classifier input last
    preacts: list[np.ndarray]
    logits: np.ndarray


def forward(weights, activations, classifier, x) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    h = x
    inputs, preacts = [], []
    for r, (w, act) in enumerate(zip(weights, activations)):
        if h.shape[1] != w.shape[0]:
            raise ShapeError(
                f"layer {r} expects input width {w.shape[0]}, got {h.shape[1]}", layer=r
            )
        inputs.append(h)
        z = h @ w
        preacts.append(z)
        h = np.maximum(z, 0.0) if act == RELU else z
    if h.shape[1] != classifier.shape[0]:
        raise ShapeError(
            f"classifier expects input width {classifier.shape[0]}, got {h.shape[1]}",
            layer=len(weights),
        )
    inputs.append(h)
    return ForwardCache(inputs, preacts, h @ classifier)


def backward(weights, activations, classifier, cache: ForwardCache, dlogits):
    """Return (per-layer dW, dClassifier, dInput) for upstream gradient ``dlogits``."""
    d_classifier = cache.inputs[-1].T @ dlogits
    dh = dlogits @ classifier.T
    d_weights = [None] * len(weights)
    for r in range(len(weights) - 1, -1, -1):
        dz = dh * (cache.preacts[r] > 0) if activations[r] == RELU else dh
        d_weights[r] = cache.inputs[r].T @ dz
        dh = dz @ weights[r].T
    return d_weights, d_classifier, dh


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits, y, sample_weights=None):
    """Mean (optionally per-sample weighted) cross-entropy and its logit gradient."""
    y = np.asarray(y, dtype=np.int64)
    n, num_classes = logits.shape
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    per_sample = -logp[rows, y]
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    value = float((w * per_sample).sum() / n)
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad *= (w / n)[:, None]
    return value, grad
