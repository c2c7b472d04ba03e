"""Temporal-signature clustering for change-imbalance handling.

Patches are summarized by their per-interval mean imperviousness change,
compared under dynamic time warping, grouped by seeded k-medoids, and the
resulting cluster shares drive a reverse-weighting scheme so rare
high-change clusters are sampled as often as the dominant static ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import Grid

SIGNATURE_STATS = ("mean_change", "changed_fraction")


@dataclass(frozen=True)
class TemporalSignature:
    """Per-interval change summary for one patch."""

    patch_id: int
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"patch {self.patch_id}: non-finite signature values")


def signature(series: list[Grid], patch_id: int = 0,
              stat: str = "mean_change") -> TemporalSignature:
    """Summarize one patch's imperviousness series into a change signature.

    ``mean_change`` takes the mean signed per-pixel difference between each
    consecutive pair (percent points); ``changed_fraction`` the fraction of
    pixels with any change. Pixels invalid in either year are skipped.
    """
    if len(series) < 2:
        raise ValueError(f"need >= 2 timestamps, got {len(series)}")
    if stat not in SIGNATURE_STATS:
        raise ValueError(f"unknown signature stat {stat!r}")
    shape = series[0].shape
    entries = []
    for a, b in zip(series, series[1:]):
        if a.shape != shape or b.shape != shape:
            raise ValueError("series grids are not aligned")
        valid = a.valid & b.valid
        if not valid.any():
            entries.append(0.0)
            continue
        diff = b.values.astype(np.float64)[valid] - a.values.astype(np.float64)[valid]
        if stat == "mean_change":
            entries.append(float(diff.mean()))
        else:
            entries.append(float((diff != 0).mean()))
    return TemporalSignature(patch_id=patch_id, values=np.array(entries))


def dtw(a, b) -> float:
    """Dynamic time warping distance with absolute-difference local cost.

    Classic dynamic program over the |a| x |b| lattice with match, insert,
    and delete moves; returns the minimal accumulated cost.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw requires nonempty sequences")
    n, m = a.size, b.size
    cost = np.abs(a[:, None] - b[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = acc[i]
        prev = acc[i - 1]
        for j in range(1, m + 1):
            row[j] = cost[i - 1, j - 1] + min(prev[j], row[j - 1], prev[j - 1])
    return float(acc[n, m])


def distance_matrix(signatures: list[TemporalSignature]) -> np.ndarray:
    n = len(signatures)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = dtw(signatures[i].values, signatures[j].values)
    return dist


@dataclass
class ClusterModel:
    """k-medoids result plus the reverse sampling weights."""

    k: int
    medoid_indices: np.ndarray
    medoids: list[np.ndarray]
    assignments: np.ndarray
    distances: np.ndarray
    ratios: np.ndarray
    weights: np.ndarray


def sampling_weights(ratios) -> np.ndarray:
    """Reverse weights: inversely proportional to each cluster's share.

    Giving every patch its cluster's weight makes the per-cluster expected
    draw frequency uniform (n_c * 1/ratio_c is constant across clusters).
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios <= 0):
        raise ValueError("ratios must be strictly positive")
    inv = 1.0 / ratios
    return inv / inv.sum()


def _total_cost(dist: np.ndarray, medoids: np.ndarray) -> tuple[float, np.ndarray]:
    sub = dist[:, medoids]
    assign = sub.argmin(axis=1)
    return float(sub[np.arange(dist.shape[0]), assign].sum()), assign


def cluster(signatures: list[TemporalSignature], k: int = 5,
            seed: int = 0, max_swaps: int = 200) -> ClusterModel:
    """Group signatures by PAM-style k-medoids under the DTW distance.

    Initial medoids are a seeded draw; each round applies the single best
    strictly-improving (medoid, candidate) swap, so the objective never
    increases. Assignment ties break toward the lowest cluster index.
    """
    n = len(signatures)
    if n < k:
        raise ValueError(f"need at least k={k} signatures, got {n}")
    dist = distance_matrix(signatures)
    rng = np.random.default_rng(seed)
    medoids = np.sort(rng.choice(n, size=k, replace=False))
    cost, assign = _total_cost(dist, medoids)

    for _ in range(max_swaps):
        best = None
        for mi in range(k):
            for h in range(n):
                if h in medoids:
                    continue
                trial = medoids.copy()
                trial[mi] = h
                trial_cost, _ = _total_cost(dist, trial)
                if trial_cost < cost - 1e-12 and (best is None or trial_cost < best[0]):
                    best = (trial_cost, mi, h)
        if best is None:
            break
        cost, mi, h = best[0], best[1], best[2]
        medoids[mi] = h
        cost, assign = _total_cost(dist, medoids)

    counts = np.bincount(assign, minlength=k)
    ratios = counts / n
    # Guard zero-share clusters before reverse weighting (possible when two
    # medoids coincide in value); give them the smallest observed share.
    safe = np.where(ratios > 0, ratios, 1.0 / n)
    weights = sampling_weights(safe)
    return ClusterModel(
        k=k,
        medoid_indices=medoids,
        medoids=[signatures[int(m)].values.copy() for m in medoids],
        assignments=assign,
        distances=dist[np.arange(n), medoids[assign]],
        ratios=ratios,
        weights=weights,
    )


def persistence_cluster(model: ClusterModel,
                        signatures: list[TemporalSignature]) -> int:
    """Cluster with the lowest mean |signature|, eligible for persistence."""
    means = np.full(model.k, np.inf)
    for c in range(model.k):
        members = [signatures[i].values for i in np.flatnonzero(model.assignments == c)]
        if members:
            means[c] = float(np.mean([np.abs(v).mean() for v in members]))
    return int(np.argmin(means))


def patch_weights(model: ClusterModel) -> np.ndarray:
    """Per-patch sampling weights: each member carries its cluster's reverse
    weight, so every cluster is drawn with equal expected frequency."""
    per_patch = model.weights[model.assignments]
    return per_patch / per_patch.sum()


def save_assignments(model: ClusterModel, signatures: list[TemporalSignature],
                     path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patch_id", "cluster_label", "distance"])
        for sig, label, d in zip(signatures, model.assignments, model.distances):
            writer.writerow([sig.patch_id, int(label), f"{d:.9g}"])


def save_signatures(signatures: list[TemporalSignature], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for sig in signatures:
            writer.writerow([sig.patch_id] + [f"{v:.9g}" for v in sig.values])
