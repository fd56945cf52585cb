"""Benign accuracy / adversarial robustness and the round-level descent diagnostic."""
from __future__ import annotations

import numpy as np

from .attacks import AdvPerturbation, pgd
from .data import Dataset
from .model import forward


def accuracy(model, x, y) -> float:
    return float(np.mean(np.argmax(forward(model, x), axis=1) == y))


def evaluate(model, test: Dataset, attack: AdvPerturbation | None = None,
             rng: np.random.Generator | None = None) -> dict:
    """BA on clean inputs; AR on PGD inputs built against ``model`` (AR = BA without an attack)."""
    if len(test) == 0:
        raise ValueError("cannot evaluate on an empty test set")
    x, y = test.features, test.labels
    ba = accuracy(model, x, y)
    if attack is None:
        return {"BA": ba, "AR": ba}
    x_adv = pgd(model, x, y, attack, rng if rng is not None else np.random.default_rng(0))
    return {"BA": ba, "AR": accuracy(model, x_adv, y)}


def grad_proxy_sq(prev_global, new_global, zeta: float) -> float:
    """||(w_g^t - w_g^{t+1}) / zeta||^2: the aggregated pseudo-gradient of one round."""
    if zeta <= 0:
        raise ValueError("zeta must be > 0")
    d = (np.asarray(getattr(prev_global, "values", prev_global))
         - np.asarray(getattr(new_global, "values", new_global))) / zeta
    return float(d @ d)


def convergence_monitor(reports) -> dict:
    """Squared pseudo-gradient norm per round and its running average.

    Accepts round reports (anything with ``grad_norm_sq``) or a plain sequence
    of global vectors plus ``zeta`` via :func:`monitor_globals`.
    """
    series = np.array([r.grad_norm_sq if hasattr(r, "grad_norm_sq") else float(r) for r in reports])
    running = np.cumsum(series) / np.arange(1, len(series) + 1) if len(series) else series
    return {"grad_norm_sq": series.tolist(), "running_avg": running.tolist()}


def monitor_globals(globals_, zeta: float) -> dict:
    """Same diagnostic computed straight from consecutive global vectors."""
    if len(globals_) < 2:
        raise ValueError("need at least two rounds")
    sq = [grad_proxy_sq(a, b, zeta) for a, b in zip(globals_[:-1], globals_[1:])]
    return convergence_monitor(sq)
