import numpy as np
import pytest

from pfat.model import AdapterLayer, ClientModel
from pfat.nn import IDENTITY, RELU


def random_model(rng, dims=(3, 5, 4), rank=2, num_classes=3, b_scale=0.5, client_id=0):
    """Adapter model with non-zero adapters so every path carries gradient."""
    layers = []
    n = len(dims) - 1
    for r, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(AdapterLayer(
            rng.normal(size=(a, b)),
            rng.normal(scale=1 / np.sqrt(a), size=(a, min(rank, a, b))),
            rng.normal(scale=b_scale, size=(min(rank, a, b), b)),
            RELU if r < n - 1 else IDENTITY,
        ))
    return ClientModel(layers, rng.normal(size=(dims[-1], num_classes)), client_id)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def finite_diff(f, array, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``array`` (mutated in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = array[i]
        array[i] = old + step
        up = f()
        array[i] = old - step
        down = f()
        array[i] = old
        grad[i] = (up - down) / (2 * step)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b)), np.max(np.abs(a))))


@pytest.fixture(scope="session")
def trained_toy():
    """Pretrained blobs classifier wrapped with zero adapters, plus its data."""
    from pfat.data import make_blobs
    from pfat.model import init_adapter_model, pretrain_backbone

    ds = make_blobs(3, 120, 4, 0.35, seed=0)
    rng = np.random.default_rng(0)
    pre = pretrain_backbone(ds.features, ds.labels, 3, [8, 8], epochs=60, lr=0.1,
                            batch_size=32, rng=rng)
    return init_adapter_model(pre, 2, rng), ds


# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
