import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfat.attacks import AdvPerturbation
from pfat.gating import (
    GateVector, Phase2Config, effective, final_rng, gate_objective, run_phase2, sigmoid,
)
from pfat.model import fuse, train_dense

from conftest import finite_diff, random_model, rel_err

SMALL = dict(outer_steps=3, inner_steps=4, final_epochs=2, learning_rate=0.05,
             attack=AdvPerturbation(epsilon=0.1, iterations=2))


def trained(trained_toy, seed=0):
    model, ds = trained_toy
    m = model.copy(client_id=seed)
    rng = np.random.default_rng(seed)
    for layer in m.layers:
        layer.b_train = rng.normal(scale=0.1, size=layer.b_train.shape)
    return m, ds


def selectable(fused):
    return [*fused.layers, fused.classifier]


def test_sigmoid_is_stable_at_extremes():
    z = sigmoid(np.array([-800.0, -1.0, 0.0, 1.0, 800.0]))
    assert np.all(np.isfinite(z))
    assert z[0] == 0.0 and z[-1] == 1.0 and z[2] == 0.5
    assert z[1] + z[3] == pytest.approx(1.0)


def test_gate_vector_projection_keeps_largest_and_breaks_ties_low():
    g = GateVector(np.array([0.3, 2.0, 0.3, -1.0]), budget=2)
    assert np.all((g.values > 0) & (g.values < 1))
    assert g.project() == (0, 1)
    np.testing.assert_array_equal(g.values, [1.0, 1.0, 0.0, 0.0])


def test_budget_resolution():
    assert Phase2Config(budget=2).resolve_budget(5) == (2, False)
    assert Phase2Config(budget=9).resolve_budget(5) == (5, True)
    assert Phase2Config(budget_fraction=0.25).resolve_budget(4) == (1, False)
    assert Phase2Config(budget_fraction=0.0).resolve_budget(4) == (1, False)
    with pytest.raises(ValueError):
        Phase2Config(budget=-1)


def test_zero_budget_returns_fused_model_exactly(trained_toy):
    model, ds = trained(trained_toy)
    final, selected, report = run_phase2(model, ds, Phase2Config(budget=0, **SMALL))
    assert selected == () and report.selected == ()
    for a, b in zip(selectable(final), selectable(fuse(model))):
        np.testing.assert_array_equal(a, b)


def test_budget_over_layer_count_is_clamped_with_warning(trained_toy):
    model, ds = trained(trained_toy)
    with pytest.warns(RuntimeWarning, match="exceeds"):
        _, selected, report = run_phase2(model, ds, Phase2Config(budget=50, **SMALL))
    assert report.clamped and report.budget == 3
    assert selected == (0, 1, 2)


@pytest.mark.parametrize("seed", range(3))
def test_unselected_layers_are_bit_identical(trained_toy, seed):
    model, ds = trained(trained_toy, seed)
    final, selected, report = run_phase2(model, ds, Phase2Config(budget=2, seed=seed, **SMALL))
    assert len(selected) <= 2
    assert report.reset_exact
    w_fus = fuse(model)
    for r, (a, b) in enumerate(zip(selectable(final), selectable(w_fus))):
        if r in selected:
            assert not np.array_equal(a, b)
        else:
            np.testing.assert_array_equal(a, b)


def test_full_budget_without_penalty_is_plain_fine_tuning(trained_toy):
    model, ds = trained(trained_toy)
    cfg = Phase2Config(budget=3, lambda3=0.0, **SMALL)
    final, selected, _ = run_phase2(model, ds, cfg)
    assert selected == (0, 1, 2)
    plain = train_dense(fuse(model), ds.features, ds.labels, epochs=cfg.final_epochs,
                        lr=cfg.learning_rate, batch_size=cfg.batch_size, rng=final_rng(cfg.seed, 0))
    for a, b in zip(selectable(final), selectable(plain)):
        np.testing.assert_array_equal(a, b)


def test_classifier_can_be_excluded(trained_toy):
    model, ds = trained(trained_toy)
    final, selected, report = run_phase2(model, ds, Phase2Config(budget=2, include_classifier=False, **SMALL))
    assert selected == (0, 1)
    np.testing.assert_array_equal(final.classifier, fuse(model).classifier)
    assert len(report.gate_history[0]) == 2


def test_report_shapes(trained_toy):
    model, ds = trained(trained_toy)
    _, _, report = run_phase2(model, ds, Phase2Config(budget=1, **SMALL))
    rec = report.to_record()
    assert len(rec["gate_history"]) == len(rec["objective_history"]) == 3
    assert all(len(g) == 3 for g in rec["gate_history"])
    assert np.all(np.isfinite(rec["objective_history"]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 10), st.floats(0, 5), st.floats(0.0, 4.0))
def test_gate_gradient_matches_finite_differences(seed, beta, lambda3, budget):
    rng = np.random.default_rng(seed)
    w_fus = fuse(random_model(rng, dims=(3, 4, 4), num_classes=3))
    deltas = [rng.normal(scale=0.3, size=w.shape) for w in selectable(w_fus)]
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 3, size=6)
    x_adv = x + rng.uniform(-0.1, 0.1, size=x.shape)
    logits = rng.normal(size=len(deltas))
    # keep sum(z) away from the hinge kink so the derivative is defined
    if abs(sigmoid(logits).sum() - budget) < 1e-3:
        budget += 0.01

    def f():
        return gate_objective(w_fus, deltas, logits, x, y, x_adv, beta, lambda3, budget)[0]

    _, grad = gate_objective(w_fus, deltas, logits, x, y, x_adv, beta, lambda3, budget)
    assert rel_err(grad, finite_diff(f, logits, step=1e-6)) < 1e-4


def test_effective_weights_interpolate(rng):
    w_fus = fuse(random_model(rng))
    deltas = [np.ones_like(w) for w in selectable(w_fus)]
    z = np.array([0.0, 1.0, 0.5])
    eff = effective(w_fus, deltas, z, True)
    np.testing.assert_array_equal(eff.layers[0], w_fus.layers[0])
    np.testing.assert_array_equal(eff.layers[1], w_fus.layers[1] + 1)
    np.testing.assert_array_equal(eff.classifier, w_fus.classifier + 0.5)


def test_same_seed_same_result(trained_toy):
    model, ds = trained(trained_toy)
    cfg = Phase2Config(budget=2, **SMALL)
    a = run_phase2(model, ds, cfg)
    b = run_phase2(model, ds, cfg)
    assert a[2].to_record() == b[2].to_record()
    for x, y in zip(selectable(a[0]), selectable(b[0])):
        np.testing.assert_array_equal(x, y)


def test_accepts_an_already_fused_model(trained_toy):
    model, ds = trained(trained_toy)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        final, _, _ = run_phase2(fuse(model), ds, Phase2Config(budget=1, **SMALL))
    assert final.layers[0].shape == model.layers[0].w_pre.shape
