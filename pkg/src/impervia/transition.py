"""Imperviousness-transition likelihood estimation from land-cover pairs.

Given two consecutive categorical land-cover grids, the pipeline is:
cross-tabulate class transitions, collapse the destination classes into a
pervious column and a weighted impervious column, row-normalize into
probabilities, and look the impervious column back up per pixel to produce
a likelihood map in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SchemaError, ShapeMismatchError
from .raster import Grid, GridKind, LulcLegend, NLCD16

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class TransitionTables:
    """Cross-tab counts plus their collapsed and normalized forms.

    ``counts`` is the C x C transition count matrix, ``collapsed`` the C x 2
    [pervious, weighted-impervious] totals, and ``probs`` the row-normalized
    C x 2 probabilities. Classes with no support at the source timestamp are
    listed in ``absent_classes`` and carry the conservative [1, 0] row.
    """

    counts: np.ndarray
    collapsed: np.ndarray
    probs: np.ndarray
    absent_classes: frozenset[int]

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class LikelihoodMap:
    """A continuous grid of per-pixel imperviousness-transition likelihoods."""

    grid: Grid
    source_years: tuple[int, int] | None = None


def crosstab(lc_t: Grid, lc_t1: Grid, class_count: int) -> np.ndarray:
    """Count per-pixel class transitions between two aligned categorical grids.

    Returns an int64 matrix where entry (i, j) is the number of pixels that
    are class i at time t and class j at time t+1, counting only pixels valid
    in both grids.
    """
    if lc_t.shape != lc_t1.shape:
        raise ShapeMismatchError(f"shapes differ: {lc_t.shape} vs {lc_t1.shape}")
    if lc_t.kind is not GridKind.CATEGORICAL or lc_t1.kind is not GridKind.CATEGORICAL:
        raise SchemaError("crosstab requires categorical grids")
    valid = lc_t.valid & lc_t1.valid
    src = lc_t.values[valid].astype(np.int64)
    dst = lc_t1.values[valid].astype(np.int64)
    if src.size and (src.max() >= class_count or dst.max() >= class_count):
        raise SchemaError(
            f"class index out of range for class count {class_count}"
        )
    flat = np.bincount(src * class_count + dst, minlength=class_count * class_count)
    return flat.reshape(class_count, class_count)


def collapse(counts: np.ndarray, legend: LulcLegend = NLCD16) -> np.ndarray:
    """Collapse destination classes into [pervious, weighted impervious] columns.

    Pervious destinations contribute raw counts; developed destinations
    contribute counts scaled by the legend's per-class impervious fraction.
    """
    counts = np.asarray(counts)
    if counts.shape != (legend.class_count, legend.class_count):
        raise SchemaError(
            f"counts shape {counts.shape} does not match legend C={legend.class_count}"
        )
    perv = list(legend.pervious_classes)
    dev = list(legend.developed_classes)
    weights = np.array([legend.developed_weight[j] for j in dev], dtype=np.float64)
    collapsed = np.zeros((legend.class_count, 2), dtype=np.float64)
    collapsed[:, 0] = counts[:, perv].sum(axis=1)
    collapsed[:, 1] = counts[:, dev].astype(np.float64) @ weights
    return collapsed


def normalize(collapsed: np.ndarray) -> tuple[np.ndarray, frozenset[int]]:
    """Row-normalize collapsed counts into probabilities.

    Rows with zero support collapse to [1, 0] (stay pervious) and their class
    indices are returned so downstream consumers can audit the fallback.
    """
    collapsed = np.asarray(collapsed, dtype=np.float64)
    if np.any(collapsed < 0):
        raise SchemaError("collapsed counts must be nonnegative")
    row_sum = collapsed.sum(axis=1)
    absent = np.flatnonzero(row_sum == 0)
    probs = np.zeros_like(collapsed)
    support = row_sum > 0
    probs[support] = collapsed[support] / row_sum[support, None]
    probs[~support, 0] = 1.0
    return probs, frozenset(int(i) for i in absent)


def transition_tables(lc_t: Grid, lc_t1: Grid, legend: LulcLegend = NLCD16) -> TransitionTables:
    """Run the full crosstab -> collapse -> normalize chain for one year pair."""
    counts = crosstab(lc_t, lc_t1, legend.class_count)
    collapsed = collapse(counts, legend)
    probs, absent = normalize(collapsed)
    return TransitionTables(counts=counts, collapsed=collapsed, probs=probs,
                            absent_classes=absent)


def likelihood_map(lc: Grid, probs: np.ndarray,
                   source_years: tuple[int, int] | None = None) -> LikelihoodMap:
    """Look up the impervious-transition probability of every pixel's class."""
    if lc.kind is not GridKind.CATEGORICAL:
        raise SchemaError("likelihood_map requires a categorical grid")
    probs = np.asarray(probs, dtype=np.float64)
    vals = lc.values.astype(np.int64)
    if vals[lc.valid].size and vals[lc.valid].max() >= probs.shape[0]:
        raise SchemaError(
            f"class index {vals[lc.valid].max()} out of range for {probs.shape[0]} prob rows"
        )
    lut = probs[:, 1].astype(np.float32)
    out = lut[np.where(lc.valid, vals, 0)]
    out[lc.nodata] = 0.0
    grid = Grid(out, GridKind.CONTINUOUS, pixel_size=lc.pixel_size,
                nodata=lc.nodata.copy())
    return LikelihoodMap(grid=grid, source_years=source_years)


def likelihood_series(lc_series: list[Grid], legend: LulcLegend = NLCD16,
                      years: list[int] | None = None) -> list[LikelihoodMap]:
    """Build one likelihood map per land-cover timestamp.

    Maps 1..N-1 come from consecutive pairs (lc_k, lc_k+1). The final map
    reuses the probabilities of the last pair but performs the lookup on the
    last grid itself, so every timestamp has an aligned map.
    """
    n = len(lc_series)
    if n < 2:
        raise ValueError(f"need at least 2 land-cover grids, got {n}")
    if years is not None and len(years) != n:
        raise ValueError("years list must match the number of grids")
    maps: list[LikelihoodMap] = []
    last_probs: np.ndarray | None = None
    for k in range(n - 1):
        tables = transition_tables(lc_series[k], lc_series[k + 1], legend)
        span = (years[k], years[k + 1]) if years else None
        maps.append(likelihood_map(lc_series[k], tables.probs, source_years=span))
        last_probs = tables.probs
    span = (years[n - 2], years[n - 1]) if years else None
    maps.append(likelihood_map(lc_series[n - 1], last_probs, source_years=span))
    return maps


def save_probs(probs: np.ndarray, path: str | Path) -> None:
    """Serialize a C x 2 probability table as audit-friendly plain text."""
    probs = np.asarray(probs)
    lines = [f"{row[0]:.9g} {row[1]:.9g}" for row in probs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_probs(path: str | Path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        a, b = line.split()
        rows.append((float(a), float(b)))
    return np.array(rows, dtype=np.float64)
