"""Synthetic blobs, CSV ingestion, Dirichlet non-IID partitioning."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise DataError(f"features {x.shape} and labels {y.shape} disagree")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes,
                       self.name if name is None else name)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    dirichlet_alpha: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise DataError("num_clients must be >= 1")
        if not self.dirichlet_alpha > 0:
            raise DataError("dirichlet_alpha must be > 0")


def make_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int,
               scale: float = 1.0) -> Dataset:
    """Isotropic Gaussian clusters centred on the vertices ``scale * e_c``."""
    if per_class < 1:
        raise DataError("per_class must be >= 1")
    if dim < num_classes:
        raise DataError("dim must be >= num_classes for simplex means")
    rng = np.random.default_rng(seed)
    means = scale * np.eye(num_classes, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + spread * rng.normal(size=(len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(features[order], labels[order], num_classes, f"blobs-c{num_classes}-s{seed}")


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv(path, num_classes: int | None = None) -> Dataset:
    """Feature columns then one integer label column; a non-numeric first row is a header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="", encoding="utf-8") as f:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(f)) if r and any(c.strip() for c in r)]
    if rows and not all(_is_number(c) for c in rows[0][1]):
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0][1])
    if width < 2:
        raise DataError(f"{path}: need at least one feature and a label column")
    feats, labels, bad = [], [], []
    for line, row in rows:
        if len(row) != width:
            bad.append(f"line {line}: expected {width} columns, got {len(row)}")
            continue
        try:
            values = [float(c) for c in row[:-1]]
            label = float(row[-1])
        except ValueError:
            bad.append(f"line {line}: non-numeric value")
            continue
        if label != int(label) or label < 0:
            bad.append(f"line {line}: label {row[-1]!r} is not a non-negative integer")
            continue
        if num_classes is not None and label >= num_classes:
            bad.append(f"line {line}: label {int(label)} >= C={num_classes}")
            continue
        feats.append(values)
        labels.append(int(label))
    if bad:
        raise DataError(f"{path}: malformed rows: " + "; ".join(bad))
    c = num_classes if num_classes is not None else max(2, max(labels) + 1)
    return Dataset(np.array(feats), np.array(labels), c, path.stem)


def write_csv(ds: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(ds.dim)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def class_counts(ds: Dataset) -> np.ndarray:
    return np.bincount(ds.labels, minlength=ds.num_classes)


def dirichlet_partition(ds: Dataset, spec: PartitionSpec, max_retries: int = 100) -> list[Dataset]:
    """Split ``ds`` into ``spec.num_clients`` disjoint shards with Dirichlet class mixes."""
    n_clients = spec.num_clients
    if n_clients == 1:
        return [ds.subset(np.arange(len(ds)), f"{ds.name}-client0")]
    counts = class_counts(ds)
    if np.any(counts == 0):
        raise DataError("every class needs at least one sample")
    rng = np.random.default_rng(spec.seed)
    by_class = [rng.permutation(np.flatnonzero(ds.labels == c)) for c in range(ds.num_classes)]
    for _ in range(max_retries):
        shards = [[] for _ in range(n_clients)]
        for idx in by_class:
            props = rng.dirichlet(np.full(n_clients, spec.dirichlet_alpha))
            cuts = np.round(np.cumsum(props)[:-1] * len(idx)).astype(int)
            for client, part in enumerate(np.split(idx, cuts)):
                shards[client].extend(part.tolist())
        if all(shards):
            return [ds.subset(np.sort(s), f"{ds.name}-client{i}") for i, s in enumerate(shards)]
    raise DataError(
        f"could not draw {n_clients} non-empty shards in {max_retries} tries; "
        "use a larger dataset or a larger dirichlet_alpha"
    )


def iid_partition(ds: Dataset, num_clients: int, seed: int) -> list[Dataset]:
    """Equal-size shards with (near-)identical class counts."""
    rng = np.random.default_rng(seed)
    shards = [[] for _ in range(num_clients)]
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        usable = len(idx) - len(idx) % num_clients
        for i, part in enumerate(np.split(idx[:usable], num_clients)):
            shards[i].extend(part.tolist())
    return [ds.subset(np.sort(s), f"{ds.name}-iid{i}") for i, s in enumerate(shards)]


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Class-stratified split so the test part keeps the shard's class proportions."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        k = int(round(test_fraction * len(idx)))
        test.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return ds.subset(np.sort(train), f"{ds.name}-train"), ds.subset(np.sort(test), f"{ds.name}-test")


def partition_manifest(shards: list[Dataset]) -> dict:
    return {str(i): class_counts(s).tolist() for i, s in enumerate(shards)}
