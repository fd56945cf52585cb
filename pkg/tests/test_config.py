import pytest
import yaml
from hypothesis import given, settings, strategies as st

from pfat.config import ConfigError, ExperimentConfig, load_config, parse_config


def test_empty_text_gives_documented_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig()
    p1 = cfg.phase1_config()
    assert (p1.lambda1, p1.lambda2, p1.gamma, p1.eps_smooth, p1.knn_k) == (20.0, 0.001, 0.9, 0.9, 5)
    assert cfg.partition.num_clients == 15 and cfg.partition.dirichlet_alpha == 10.0


@pytest.mark.parametrize("text", [
    "phase1: {lamda1: 3}",
    "bogus: 1",
    "dataset: {kind: blobs, colour: red}",
])
def test_unknown_keys_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("text", [
    "phase1: {rounds: -1}",
    "phase1: {bandwidth: -2.0}",
    "phase1: {aggregator: krum}",
    "dataset: {kind: csv}",
    "partition: {num_clients: 0}",
    "[1, 2]",
    "seed: [unclosed",
])
def test_invalid_values_are_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_file_is_an_os_error(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "nope.yaml")


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), rounds=st.integers(0, 50), lr=st.floats(0, 1),
       alpha=st.floats(0.01, 100), iid=st.booleans(), budget=st.one_of(st.none(), st.integers(0, 20)),
       bandwidth=st.one_of(st.just("median"), st.floats(0.01, 10)))
def test_yaml_round_trip(seed, rounds, lr, alpha, iid, budget, bandwidth):
    cfg = ExperimentConfig.model_validate({
        "seed": seed,
        "partition": {"dirichlet_alpha": alpha, "iid": iid},
        "phase1": {"rounds": rounds, "learning_rate": lr, "bandwidth": bandwidth},
        "phase2": {"budget": budget},
    })
    again = parse_config(cfg.to_yaml())
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_overrides_and_digest():
    cfg = parse_config("seed: 1")
    other = cfg.with_overrides(seed=2, out="elsewhere", threads=3)
    assert (other.seed, other.output.dir, other.threads) == (2, "elsewhere", 3)
    assert other.digest() != cfg.digest()
    assert cfg.with_overrides().digest() == cfg.digest()
    # location and parallelism do not change results, so they do not change the hash
    assert cfg.with_overrides(out="x", threads=4).digest() == cfg.digest()


def test_runtime_objects_follow_sections():
    cfg = parse_config(yaml.safe_dump({
        "seed": 4,
        "partition": {"num_clients": 10},
        "attack": {"epsilon": 0.3, "iterations": 3},
        "eval_attack": {"epsilon": 0.1, "iterations": 7},
        "byzantine": {"mode": "mpaf", "rho": 0.2},
        "phase2": {"budget": 2},
    }))
    p1 = cfg.phase1_config()
    assert p1.seed == 4 and p1.pgd.epsilon == 0.3 and p1.eval_attack.iterations == 7
    assert len(p1.byzantine.malicious_ids) == 2
    assert cfg.phase2_config().budget == 2 and cfg.phase2_config().attack.iterations == 3


def test_shipped_example_config_is_valid():
    from pathlib import Path

    cfg = load_config(Path(__file__).parents[1] / "configs" / "example.yaml")
    assert cfg.byzantine.mode == "mpaf" and len(cfg.byzantine_spec().malicious_ids) == 1
