import numpy as np
import pytest

from pfat.data import (
    DataError, Dataset, PartitionSpec, class_counts, dirichlet_partition, load_csv, make_blobs,
    partition_manifest, train_test_split, write_csv,
)


def test_blobs_zero_spread_sits_on_means():
    ds = make_blobs(2, 1, 2, 0.0, seed=1)
    pts = {tuple(x): y for x, y in zip(ds.features, ds.labels)}
    assert pts == {(1.0, 0.0): 0, (0.0, 1.0): 1}


def test_blobs_deterministic():
    a, b = make_blobs(3, 20, 4, 0.3, seed=9), make_blobs(3, 20, 4, 0.3, seed=9)
    assert a.features.tobytes() == b.features.tobytes()
    assert np.array_equal(a.labels, b.labels)


def test_blobs_linearly_separable_by_least_squares():
    ds = make_blobs(3, 100, 3, 0.1, seed=0)
    X = np.hstack([ds.features, np.ones((len(ds), 1))])
    T = np.eye(3)[ds.labels]
    W, *_ = np.linalg.lstsq(X, T, rcond=None)
    assert np.mean((X @ W).argmax(1) == ds.labels) > 0.9


def test_csv_hand_written(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n0.5,1.5,1\n-2,3e-1,0\n")
    ds = load_csv(p)
    np.testing.assert_array_equal(ds.features, [[0.5, 1.5], [-2.0, 0.3]])
    np.testing.assert_array_equal(ds.labels, [1, 0])


def test_csv_headerless(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("0.5,1.5,1\n-2,0.3,0\n")
    assert len(load_csv(p)) == 2


def test_csv_empty_file(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    with pytest.raises(DataError):
        load_csv(p)


def test_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "nope.csv")


def test_csv_ragged_rows_report_line_numbers(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("x,y,label\n1,2,0\n1,0\n3,4,1\n")
    with pytest.raises(DataError, match="line 3"):
        load_csv(p)


def test_csv_label_out_of_range(tmp_path):
    p = tmp_path / "l.csv"
    p.write_text("1,2,0\n1,2,5\n")
    with pytest.raises(DataError, match="line 2"):
        load_csv(p, num_classes=3)


def test_csv_round_trip(tmp_path):
    ds = make_blobs(3, 7, 4, 0.5, seed=2)
    write_csv(ds, tmp_path / "b.csv")
    back = load_csv(tmp_path / "b.csv", num_classes=3)
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.labels, ds.labels)


def naive_counts(labels, c):
    out = [0] * c
    for y in labels:
        out[int(y)] += 1
    return out


def test_class_counts():
    ds = Dataset(np.zeros((3, 1)), [0, 0, 0], 3)
    assert class_counts(ds).tolist() == [3, 0, 0]
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, size=200)
    ds = Dataset(np.zeros((200, 1)), labels, 5)
    assert class_counts(ds).tolist() == naive_counts(labels, 5)
    assert class_counts(ds).sum() == len(ds)


def test_partition_single_client_is_passthrough():
    ds = make_blobs(3, 10, 3, 0.2, seed=0)
    (only,) = dirichlet_partition(ds, PartitionSpec(1, 10.0, 0))
    assert only.features.tobytes() == ds.features.tobytes()


@pytest.mark.parametrize("alpha", [0.3, 1.0, 10.0])
def test_partition_is_exact_and_deterministic(alpha):
    ds = make_blobs(4, 60, 4, 0.2, seed=1)
    spec = PartitionSpec(15, alpha, 7)
    shards = dirichlet_partition(ds, spec)
    assert len(shards) == 15 and all(len(s) > 0 for s in shards)
    assert sum(len(s) for s in shards) == len(ds)
    rows = np.vstack([s.features for s in shards])
    assert len({r.tobytes() for r in rows}) == len(ds)
    assert sorted(r.tobytes() for r in rows) == sorted(r.tobytes() for r in ds.features)
    again = dirichlet_partition(ds, spec)
    assert partition_manifest(again) == partition_manifest(shards)


def test_partition_default_heterogeneity_varies_counts():
    ds = make_blobs(4, 150, 4, 0.2, seed=1)
    counts = np.array([class_counts(s) for s in dirichlet_partition(ds, PartitionSpec(15, 10.0, 0))])
    assert counts.shape == (15, 4)
    assert np.all(counts.std(axis=0) > 0)


def test_partition_huge_alpha_matches_global_proportions():
    ds = make_blobs(3, 3000, 3, 0.2, seed=0)
    glob = class_counts(ds) / len(ds)
    for seed in range(20):
        for s in dirichlet_partition(ds, PartitionSpec(5, 1e9, seed)):
            assert np.max(np.abs(class_counts(s) / len(s) - glob)) <= 0.02


def test_partition_retry_bound():
    ds = make_blobs(2, 1, 2, 0.0, seed=0)
    with pytest.raises(DataError, match="larger"):
        dirichlet_partition(ds, PartitionSpec(5, 0.1, 0), max_retries=5)


def test_stratified_split_keeps_proportions():
    ds = make_blobs(2, 50, 2, 0.1, seed=0).subset(np.r_[0:100:1])
    tr, te = train_test_split(ds, 0.2, seed=0)
    assert len(tr) + len(te) == len(ds)
    assert class_counts(te).tolist() == [10, 10]
