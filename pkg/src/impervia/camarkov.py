"""CA-Markov land-cover baseline: transition projection plus greedy allocation.

An 8-class transition matrix fitted from two observed maps projects the
per-class area budget one step ahead. Suitability combines the Markov row of
each cell's current class with the neighborhood share of the candidate class
inside a square window. Allocation is a greedy loop: assign every cell its
best multiplier-scaled suitability, compare per-class areas to the budget,
and nudge the multipliers of under/over-allocated classes until areas match.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import SchemaError, ShapeMismatchError
from .raster import Grid, GridKind
from .transition import crosstab

CLASSES8 = (
    "Water", "Developed", "Barren", "Forest",
    "Shrubland", "Herbaceous", "Cultivated", "Wetlands",
)
DEVELOPED8 = 1

# NLCD 16-class indices -> the 8 aggregate classes above.
NLCD16_TO_8 = np.array([0, 0, 1, 1, 1, 1, 2, 3, 3, 3, 4, 5, 6, 6, 7, 7],
                       dtype=np.uint8)

SUITABILITY_FLOOR = 1e-6


def collapse_to_8(lc16: Grid) -> Grid:
    """Remap a 16-class NLCD grid onto the 8 aggregate classes."""
    if lc16.kind is not GridKind.CATEGORICAL:
        raise SchemaError("collapse_to_8 requires a categorical grid")
    vals = lc16.values
    if vals[lc16.valid].size and vals[lc16.valid].max() >= len(NLCD16_TO_8):
        raise SchemaError("class index exceeds the 16-class legend")
    out = NLCD16_TO_8[np.where(lc16.valid, vals, 0)]
    return Grid(out, GridKind.CATEGORICAL, pixel_size=lc16.pixel_size,
                nodata=lc16.nodata.copy())


@dataclass
class MarkovModel:
    """Row-stochastic 8-class transition matrix and projected area budget."""

    transition: np.ndarray
    current_areas: np.ndarray
    targets: np.ndarray

    @property
    def class_count(self) -> int:
        return self.transition.shape[0]


def fit_markov(lc_a: Grid, lc_b: Grid, class_count: int = 8) -> MarkovModel:
    """Fit the transition matrix from an observed pair and project one step.

    Rows with no support become identity rows (a class absent at time a
    stays put). Targets are the current class areas pushed through the
    matrix once; row-stochasticity keeps their sum at the valid cell count.
    """
    counts = crosstab(lc_a, lc_b, class_count).astype(np.float64)
    row_sum = counts.sum(axis=1)
    transition = np.eye(class_count)
    support = row_sum > 0
    transition[support] = counts[support] / row_sum[support, None]
    valid = lc_b.valid
    areas = np.bincount(lc_b.values[valid].astype(np.int64),
                        minlength=class_count).astype(np.float64)
    targets = areas @ transition
    return MarkovModel(transition=transition, current_areas=areas, targets=targets)


def _box_sum(arr: np.ndarray, window: int) -> np.ndarray:
    """Sum of a window x window box around each pixel, truncated at edges."""
    half = window // 2
    padded = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1), dtype=np.float64)
    padded[1:, 1:] = np.cumsum(np.cumsum(arr, axis=0), axis=1)
    h, w = arr.shape
    r0 = np.clip(np.arange(h) - half, 0, h)
    r1 = np.clip(np.arange(h) + half + 1, 0, h)
    c0 = np.clip(np.arange(w) - half, 0, w)
    c1 = np.clip(np.arange(w) + half + 1, 0, w)
    return (padded[r1][:, c1] - padded[r0][:, c1]
            - padded[r1][:, c0] + padded[r0][:, c0])


def suitability(lc: Grid, model: MarkovModel, window: int = 5) -> np.ndarray:
    """Per-class suitability grids, shape [C, H, W], each value in [0, 1].

    suitability_c(p) = P[class(p), c] * (share of class c among valid pixels
    in the window around p), floored at a small epsilon so no cell is
    categorically excluded. Nodata cells get zero suitability everywhere.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and positive, got {window}")
    c_count = model.class_count
    vals = lc.values.astype(np.int64)
    valid = lc.valid
    valid_counts = _box_sum(valid.astype(np.float64), window)
    out = np.zeros((c_count, *lc.shape), dtype=np.float64)
    markov_rows = model.transition[np.where(valid, vals, 0)]
    for c in range(c_count):
        onehot = (vals == c) & valid
        neigh = np.divide(_box_sum(onehot.astype(np.float64), window),
                          valid_counts, out=np.zeros_like(valid_counts),
                          where=valid_counts > 0)
        out[c] = np.maximum(markov_rows[:, :, c] * neigh, SUITABILITY_FLOOR)
    out[:, ~valid] = 0.0
    return out


@dataclass
class AllocationState:
    """Mutable bookkeeping for the greedy allocation loop."""

    suitability: np.ndarray
    multipliers: np.ndarray
    pixel_size: float = 30.0
    allocation: Grid | None = None
    iterations: int = 0
    deficits: np.ndarray | None = None
    converged: bool = False


def make_allocation_state(lc: Grid, model: MarkovModel,
                          window: int = 5) -> AllocationState:
    suit = suitability(lc, model, window)
    return AllocationState(
        suitability=suit,
        multipliers=np.ones(model.class_count, dtype=np.float64),
        pixel_size=lc.pixel_size,
    )


def allocate(state: AllocationState, targets, *, eta: float = 0.1,
             tolerance: float = 0.005, max_iterations: int = 500) -> Grid:
    """Greedy iterative allocation toward the projected area budget.

    Each pass assigns every valid cell the class maximizing multiplier *
    suitability (lowest index wins ties), then scales each multiplier by
    exp(eta * deficit / target). Converged when every class deficit is
    within max(1, tolerance * target) cells; otherwise stops after
    ``max_iterations`` with ``state.converged`` False.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(targets < 0):
        raise ValueError("targets must be nonnegative")
    c_count, h, w = state.suitability.shape
    if targets.shape != (c_count,):
        raise ShapeMismatchError(
            f"targets shape {targets.shape} vs class count {c_count}"
        )
    valid = state.suitability.sum(axis=0) > 0
    n_valid = int(valid.sum())
    if abs(targets.sum() - n_valid) > max(1e-6 * n_valid, 1e-6):
        raise ValueError(
            f"targets sum {targets.sum():.3f} differs from valid cell count {n_valid}"
        )
    band = np.maximum(1.0, tolerance * targets)
    assign = np.zeros((h, w), dtype=np.uint8)
    for iteration in range(1, max_iterations + 1):
        scored = state.multipliers[:, None, None] * state.suitability
        assign = scored.argmax(axis=0).astype(np.uint8)
        allocated = np.bincount(assign[valid].astype(np.int64),
                                minlength=c_count).astype(np.float64)
        deficits = targets - allocated
        state.iterations = iteration
        state.deficits = deficits
        if np.all(np.abs(deficits) <= band):
            state.converged = True
            break
        state.multipliers *= np.exp(eta * deficits / np.maximum(targets, 1.0))
    grid = Grid(assign, GridKind.CATEGORICAL, pixel_size=state.pixel_size,
                nodata=~valid)
    state.allocation = grid
    return grid


def imperv_change_binary(before: Grid, after: Grid,
                         developed: int = DEVELOPED8) -> Grid:
    """Binary map of newly developed cells (pervious -> developed)."""
    if before.shape != after.shape:
        raise ShapeMismatchError(f"shapes differ: {before.shape} vs {after.shape}")
    mask = before.nodata | after.nodata
    change = (after.values == developed) & (before.values != developed) & ~mask
    return Grid(change.astype(np.uint8), GridKind.CATEGORICAL,
                pixel_size=before.pixel_size, nodata=mask)


def save_transition_matrix(model: MarkovModel, path: str | Path) -> None:
    lines = [" ".join(f"{v:.9g}" for v in row) for row in model.transition]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
