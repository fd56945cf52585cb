"""Server-side aggregation of uploaded adapter vectors.

The server only ever sees :class:`Upload` records (client id, flattened
adapter vector, sample count). Nothing here may touch client data or
classifier weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .balltree import build_ball_tree, cluster_cut, knn
from .model import FlatVector


class AggregationAborted(RuntimeError):
    """Every client was filtered out; the caller keeps the previous global."""


@dataclass(frozen=True)
class Upload:
    client_id: int
    update: FlatVector
    num_samples: int


@dataclass(frozen=True)
class GaussianBandwidth:
    sigma_sq: float

    def __post_init__(self):
        if not self.sigma_sq > 0:
            raise ValueError("sigma_sq must be > 0")


@dataclass(frozen=True)
class AggregatorConfig:
    knn_k: int = 5
    bandwidth: str | float = "median"  # "median" or a fixed sigma^2
    tree_depth: int = 2
    kappa: float = 3.0
    trim_fraction: float = 0.2
    leaf_size: int = 1
    root_filter: bool = True


@dataclass
class AggregationReport:
    client_ids: list[int]
    q: np.ndarray
    q_filtered: np.ndarray
    clusters: dict[int, list[int]]  # cluster id -> client ids
    excluded: list[int]
    psi: np.ndarray
    cluster_stats: dict[int, dict]
    global_update: FlatVector
    experts: dict[int, FlatVector]
    sigma_sq: float = float("nan")
    aborted: bool = False
    rule: str = "robust"
    root_stats: dict | None = None

    def cluster_of(self, client_id: int) -> int:
        for cid, members in self.clusters.items():
            if client_id in members:
                return cid
        raise KeyError(client_id)

    def expert_for(self, client_id: int) -> FlatVector:
        return self.experts[self.cluster_of(client_id)]

    def to_record(self) -> dict:
        return {
            "rule": self.rule,
            "client_ids": list(self.client_ids),
            "q": [float(v) for v in self.q],
            "q_filtered": [float(v) for v in self.q_filtered],
            "clusters": {str(k): list(v) for k, v in self.clusters.items()},
            "excluded": list(self.excluded),
            "psi": [float(v) for v in self.psi],
            "cluster_stats": {str(k): v for k, v in self.cluster_stats.items()},
            "sigma_sq": None if math.isnan(self.sigma_sq) else float(self.sigma_sq),
            "aborted": bool(self.aborted),
            "root_stats": self.root_stats,
            "global": [float(v) for v in self.global_update.values],
        }


def _stack(updates) -> np.ndarray:
    vecs = [u.update if isinstance(u, Upload) else u for u in updates]
    for v in vecs[1:]:
        vecs[0].check_layout(v)
    return np.vstack([v.values for v in vecs])


def median_bandwidth(knn_distances: np.ndarray) -> GaussianBandwidth:
    """sigma^2 = median of every k-NN distance this round (1.0 if that is zero)."""
    d = np.asarray(knn_distances, dtype=np.float64)
    med = float(np.median(d)) if d.size else 0.0
    return GaussianBandwidth(med if med > 0 else 1.0)


def gaussian_weights(knn_distances, bw: GaussianBandwidth) -> np.ndarray:
    """q_i proportional to sum_m exp(-d_im / sigma^2); distance, not squared distance."""
    d = np.asarray(knn_distances, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError("expected an N x k distance table")
    n, k = d.shape
    if k == 0:
        return np.full(n, 1.0 / n)
    scaled = -d / bw.sigma_sq
    s = np.exp(scaled - scaled.max()).sum(axis=1)  # shift cancels in the ratio
    return s / s.sum()


def mad_threshold(psi: np.ndarray, kappa: float) -> tuple[float, float, float]:
    med = float(np.median(psi))
    mad = float(np.median(np.abs(psi - med)))
    return med, mad, med + kappa * mad


def byzantine_filter(cluster_points, q, kappa: float):
    """Median/MAD distance filter inside one cluster.

    Returns ``(q_tilde, excluded positions, stats)``.
    """
    pts = np.vstack([getattr(p, "values", p) for p in cluster_points])
    q = np.asarray(q, dtype=np.float64)
    center = np.median(pts, axis=0)
    psi = np.sqrt(((pts - center) ** 2).sum(axis=1))
    med, mad, threshold = mad_threshold(psi, kappa)
    keep = psi <= threshold
    q_tilde = np.where(keep, q, 0.0)
    excluded = np.flatnonzero(~keep).tolist()
    stats = {"median_psi": med, "mad": mad, "threshold": threshold, "psi": psi, "center": center}
    return q_tilde, excluded, stats


def aggregate_global(updates, q_tilde, sizes) -> FlatVector:
    vecs = [u.update if isinstance(u, Upload) else u for u in updates]
    x = _stack(vecs)
    w = np.asarray(q_tilde, dtype=np.float64) * np.asarray(sizes, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        raise AggregationAborted("all clients excluded from aggregation")
    return vecs[0].with_values((w / total) @ x)


def aggregate_expert(updates, trim_fraction: float) -> FlatVector:
    """Coordinate-wise trimmed mean; falls back to the median when trimming empties the set."""
    if not 0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must lie in [0, 0.5)")
    vecs = [u.update if isinstance(u, Upload) else u for u in updates]
    x = np.sort(_stack(vecs), axis=0)
    n = len(x)
    cut = math.ceil(trim_fraction * n)
    if n <= 2 * cut:
        return vecs[0].with_values(np.median(x, axis=0))
    return vecs[0].with_values(x[cut:n - cut].mean(axis=0))


def aggregate_fedavg(updates, sizes) -> FlatVector:
    vecs = [u.update if isinstance(u, Upload) else u for u in updates]
    w = np.asarray(sizes, dtype=np.float64)
    return vecs[0].with_values((w / w.sum()) @ _stack(vecs))


def robust_aggregate(uploads: list[Upload], cfg: AggregatorConfig,
                     previous_global: FlatVector | None = None) -> AggregationReport:
    """Ball-tree Gaussian weighting, per-cluster median/MAD filtering, weighted global
    and trimmed-mean experts.

    If every client is filtered out the round is marked aborted and
    ``previous_global`` is carried over; without one, ``AggregationAborted``
    propagates.
    """
    uploads = sorted(uploads, key=lambda u: u.client_id)
    ids = [u.client_id for u in uploads]
    n = len(uploads)
    x = _stack(uploads)
    sizes = np.array([u.num_samples for u in uploads], dtype=np.float64)
    tree = build_ball_tree(x, cfg.leaf_size)

    k = min(cfg.knn_k, n - 1)
    dists = np.array([[d for _, d in knn(tree, i, k)] for i in range(n)]).reshape(n, k)
    bw = median_bandwidth(dists) if cfg.bandwidth == "median" else GaussianBandwidth(float(cfg.bandwidth))
    q = gaussian_weights(dists, bw)

    # coarse pass over everyone: clusters made only of far-away uploads cannot
    # police themselves, so the same median/MAD test first runs at the root
    excluded_set: set[int] = set()
    root_stats = None
    if cfg.root_filter and n > 1:
        _, excl, st = byzantine_filter(x, q, cfg.kappa)
        excluded_set.update(excl)
        root_stats = {"median_psi": st["median_psi"], "mad": st["mad"], "threshold": st["threshold"],
                      "excluded": sorted(ids[e] for e in excl)}

    clusters_pos = cluster_cut(tree, cfg.tree_depth)
    psi = np.zeros(n)
    stats = {}
    for cid, members in clusters_pos.items():
        _, excl, st = byzantine_filter(x[members], q[members], cfg.kappa)
        psi[members] = st["psi"]
        excluded_set.update(members[e] for e in excl)
        stats[cid] = {"median_psi": st["median_psi"], "mad": st["mad"], "threshold": st["threshold"]}
    q_tilde = np.where(np.isin(np.arange(n), sorted(excluded_set)), 0.0, q)

    experts = {}
    for cid, members in clusters_pos.items():
        kept = [m for m in members if m not in excluded_set] or members
        experts[cid] = aggregate_expert([uploads[m].update for m in kept], cfg.trim_fraction)

    aborted = False
    try:
        global_update = aggregate_global(uploads, q_tilde, sizes)
    except AggregationAborted:
        if previous_global is None:
            raise
        global_update, aborted = previous_global, True
    return AggregationReport(
        client_ids=ids, q=q, q_filtered=q_tilde,
        clusters={cid: [ids[m] for m in members] for cid, members in clusters_pos.items()},
        excluded=sorted(ids[p] for p in excluded_set), psi=psi, cluster_stats=stats,
        global_update=global_update, experts=experts, sigma_sq=bw.sigma_sq, aborted=aborted,
        root_stats=root_stats,
    )


def fedavg_report(uploads: list[Upload]) -> AggregationReport:
    """Plain size-weighted averaging in report form; its single cluster's expert is the global."""
    uploads = sorted(uploads, key=lambda u: u.client_id)
    ids = [u.client_id for u in uploads]
    n = len(uploads)
    g = aggregate_fedavg(uploads, [u.num_samples for u in uploads])
    q = np.full(n, 1.0 / n)
    return AggregationReport(ids, q, q.copy(), {0: ids}, [], np.zeros(n), {}, g, {0: g},
                             rule="fedavg")


def honest_reference(uploads: list[Upload], q_tilde, honest_ids) -> FlatVector:
    """Weighted aggregate over honest clients only, reusing the filtered weights."""
    uploads = sorted(uploads, key=lambda u: u.client_id)
    keep = [i for i, u in enumerate(uploads) if u.client_id in set(honest_ids)]
    return aggregate_global([uploads[i] for i in keep], np.asarray(q_tilde)[keep],
                            [uploads[i].num_samples for i in keep])
