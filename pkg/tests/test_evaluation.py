import numpy as np
import pytest

from pfat.attacks import AdvPerturbation
from pfat.data import Dataset, make_blobs
from pfat.evaluation import accuracy, convergence_monitor, evaluate, grad_proxy_sq, monitor_globals
from pfat.model import FusedModel, init_dense


def constant_model(cls, dim=3, num_classes=3):
    """Predicts ``cls`` for every input: zero weights, classifier bias via a constant-one feature."""
    w = np.zeros((dim, num_classes))
    w[0, cls] = 1.0
    return FusedModel([np.eye(dim)], ["identity"], w)


def test_constant_model_on_its_own_class():
    x = np.column_stack([np.ones(10), np.zeros((10, 2))])
    ds = Dataset(x, np.zeros(10, dtype=int), 3)
    assert evaluate(constant_model(0), ds) == {"BA": 1.0, "AR": 1.0}
    assert evaluate(constant_model(1), ds)["BA"] == 0.0


def test_zero_budget_attack_leaves_accuracy_unchanged(trained_toy):
    model, ds = trained_toy
    m = evaluate(model, ds, AdvPerturbation(epsilon=0.0, iterations=10), np.random.default_rng(0))
    assert m["AR"] == m["BA"] == accuracy(model, ds.features, ds.labels)


def test_attack_cannot_raise_accuracy_much(trained_toy):
    model, ds = trained_toy
    m = evaluate(model, ds, AdvPerturbation(epsilon=0.5, iterations=10), np.random.default_rng(0))
    assert 0 <= m["AR"] <= m["BA"] <= 1


def test_random_model_is_at_chance():
    accs = []
    for seed in range(5):
        ds = make_blobs(4, 250, 6, 0.5, seed=seed)
        model = init_dense([6, 8], 4, np.random.default_rng(100 + seed))
        accs.append(evaluate(model, ds)["BA"])
    assert abs(np.mean(accs) - 0.25) <= 0.05


def test_empty_test_set_is_an_error(trained_toy):
    model, _ = trained_toy
    with pytest.raises(ValueError):
        evaluate(model, Dataset(np.zeros((0, 4)), np.zeros(0, dtype=int), 3))


def test_identical_globals_give_zero_proxy():
    g = np.array([1.0, -2.0, 3.0])
    assert grad_proxy_sq(g, g.copy(), 0.1) == 0.0
    assert monitor_globals([g, g, g], 0.5)["grad_norm_sq"] == [0.0, 0.0]


def test_hand_built_one_dimensional_trace():
    # w: 1.0 -> 0.5 -> 0.25 with zeta = 0.5: g = 1.0 then 0.5; squares 1.0, 0.25
    out = monitor_globals([np.array([1.0]), np.array([0.5]), np.array([0.25])], 0.5)
    assert out["grad_norm_sq"] == [1.0, 0.25]
    assert out["running_avg"] == [1.0, 0.625]


def test_monitor_needs_two_rounds_and_positive_step():
    with pytest.raises(ValueError):
        monitor_globals([np.zeros(2)], 0.1)
    with pytest.raises(ValueError):
        grad_proxy_sq(np.zeros(2), np.ones(2), 0.0)


def test_monitor_accepts_report_like_objects():
    class R:
        def __init__(self, v):
            self.grad_norm_sq = v

    out = convergence_monitor([R(4.0), R(2.0)])
    assert out == {"grad_norm_sq": [4.0, 2.0], "running_avg": [4.0, 3.0]}
