"""Multi-scale forecast evaluation against a persistence null model.

Forecast and reference grids are mean-aggregated into progressively larger
cells; the per-scale MAE curves of the model and of a no-change baseline are
interpolated with a cubic spline in log-resolution and the resolution where
they cross (the model starts beating persistence) is located with Brent's
method. Binary change maps are scored with standard confusion metrics.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import ShapeMismatchError
from .raster import Grid, aggregate

DEFAULT_CELLS = (4, 8, 16, 32, 64, 128)


@dataclass(frozen=True)
class MaeCurve:
    """MAE per aggregation resolution; resolutions in km, strictly increasing."""

    scales_km: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "scales_km", np.asarray(self.scales_km, dtype=np.float64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.scales_km.shape != self.values.shape or self.scales_km.ndim != 1:
            raise ShapeMismatchError("scales and values must be matching 1-D arrays")
        if np.any(np.diff(self.scales_km) <= 0):
            raise ValueError("scales must be strictly increasing")
        if np.any(self.values < 0):
            raise ValueError("MAE values must be nonnegative")


def null_forecast(past: Grid) -> Grid:
    """Pure-persistence forecast: the past grid re-labeled as a prediction."""
    return past.copy()


def mae(pred: Grid, truth: Grid) -> float:
    """Mean absolute error over pixels valid in both grids."""
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"shapes differ: {pred.shape} vs {truth.shape}")
    valid = pred.valid & truth.valid
    if not valid.any():
        raise ValueError("no jointly valid pixels")
    diff = pred.values.astype(np.float64)[valid] - truth.values.astype(np.float64)[valid]
    return float(np.abs(diff).mean())


def mae_curve(pred: Grid, truth: Grid, cells=DEFAULT_CELLS) -> MaeCurve:
    """MAE after mean-aggregating both grids into each cell size."""
    values = []
    scales = []
    for cell in cells:
        pa = aggregate(pred, cell)
        ta = aggregate(truth, cell)
        values.append(mae(pa, ta))
        scales.append(cell * pred.pixel_size / 1000.0)
    return MaeCurve(scales_km=np.array(scales), values=np.array(values))


class CrossingStatus(enum.Enum):
    FOUND = "found"
    BELOW_RANGE = "below_range"
    ABOVE_RANGE = "above_range"


@dataclass(frozen=True)
class NullResolution:
    """Resolution where the model's MAE curve meets the null model's."""

    status: CrossingStatus
    km: float | None = None
    mae_at_crossing: float | None = None

    def label(self) -> str:
        if self.status is CrossingStatus.FOUND:
            return f"{self.km:.2f}"
        return self.status.name


def null_resolution(model: MaeCurve, null: MaeCurve) -> NullResolution:
    """Locate the finest resolution where the model matches the null model.

    The curve difference is cubic-splined over resolution and its first
    sign-changing knot interval (finest first) is bracketed and solved with
    Brent's method. BELOW_RANGE means the model already beats the null at
    the finest measured scale; ABOVE_RANGE means it never catches up.
    """
    if model.scales_km.shape != null.scales_km.shape or np.any(
            model.scales_km != null.scales_km):
        raise ValueError("curves must share the same scales")
    if model.scales_km.size < 4:
        raise ValueError("need at least 4 points for cubic interpolation")
    x = model.scales_km
    diff_knots = model.values - null.values
    if diff_knots[0] < 0:
        return NullResolution(status=CrossingStatus.BELOW_RANGE)
    diff_spline = CubicSpline(x, diff_knots)
    null_spline = CubicSpline(x, null.values)
    if diff_knots[0] == 0:
        return NullResolution(CrossingStatus.FOUND, km=float(x[0]),
                              mae_at_crossing=float(null.values[0]))
    for i in range(len(x) - 1):
        if diff_knots[i] > 0 >= diff_knots[i + 1]:
            root = brentq(diff_spline, x[i], x[i + 1])
            return NullResolution(
                CrossingStatus.FOUND,
                km=float(root),
                mae_at_crossing=float(null_spline(root)),
            )
    return NullResolution(status=CrossingStatus.ABOVE_RANGE)


def seed_stats(preds: list[Grid]) -> tuple[Grid, Grid]:
    """Per-pixel mean and population std across seed predictions.

    A pixel invalid in any seed is invalid in both outputs.
    """
    if not preds:
        raise ValueError("empty prediction list")
    shape = preds[0].shape
    stack = np.empty((len(preds), *shape), dtype=np.float64)
    mask = np.zeros(shape, dtype=bool)
    for i, g in enumerate(preds):
        if g.shape != shape:
            raise ShapeMismatchError("seed grids are not aligned")
        stack[i] = g.values
        mask |= g.nodata
    mean = stack.mean(axis=0)
    std = stack.std(axis=0)
    mean[mask] = 0.0
    std[mask] = 0.0
    kind = preds[0].kind
    px = preds[0].pixel_size
    return (Grid(mean.astype(np.float32), kind, pixel_size=px, nodata=mask.copy()),
            Grid(std.astype(np.float32), kind, pixel_size=px, nodata=mask.copy()))


@dataclass(frozen=True)
class ConfusionCounts:
    """2x2 change/no-change confusion counts with percent metrics."""

    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int = 0) -> "ConfusionCounts":
        degenerate = False
        if tp + fp > 0:
            precision = 100.0 * tp / (tp + fp)
        else:
            precision, degenerate = 0.0, True
        if tp + fn > 0:
            recall = 100.0 * tp / (tp + fn)
        else:
            recall, degenerate = 0.0, True
        if precision + recall > 0:
            f1 = 2.0 * precision * recall / (precision + recall)
        else:
            f1, degenerate = 0.0, True
        return cls(tp=tp, fp=fp, fn=fn, tn=tn, precision=precision,
                   recall=recall, f1=f1, degenerate=degenerate)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_bool(grid_or_array) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(grid_or_array, Grid):
        return grid_or_array.values.astype(bool), grid_or_array.valid
    arr = np.asarray(grid_or_array, dtype=bool)
    return arr, np.ones(arr.shape, dtype=bool)


def confusion(pred_change, true_change) -> ConfusionCounts:
    """Score a binary change forecast against observed change."""
    pred, pred_valid = _as_bool(pred_change)
    true, true_valid = _as_bool(true_change)
    if pred.shape != true.shape:
        raise ShapeMismatchError(f"shapes differ: {pred.shape} vs {true.shape}")
    valid = pred_valid & true_valid
    p = pred[valid]
    t = true[valid]
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    return ConfusionCounts.from_counts(tp, fp, fn, tn)


# ---------------------------------------------------------------------------
# Report assembly and serialization

@dataclass
class EvalReport:
    model_curve: MaeCurve
    null_curve: MaeCurve
    null_res: NullResolution
    seed_mean: Grid | None = None
    seed_std: Grid | None = None
    confusion_counts: ConfusionCounts | None = None
    notes: list[str] = field(default_factory=list)


def build_report(preds: list[Grid], truth: Grid, past: Grid,
                 cells=DEFAULT_CELLS) -> EvalReport:
    """Full evaluation of seed predictions against truth and a persistence null.

    The model curve is computed from the seed-mean prediction; the null curve
    from the unchanged past. Change maps threshold strictly positive
    imperviousness difference.
    """
    mean_grid, std_grid = seed_stats(preds)
    model_curve = mae_curve(mean_grid, truth, cells)
    null_curve = mae_curve(null_forecast(past), truth, cells)
    nr = null_resolution(model_curve, null_curve)
    pred_change = (mean_grid.values - past.values) > 0
    true_change = (truth.values - past.values) > 0
    valid = mean_grid.valid & truth.valid & past.valid
    counts = confusion(pred_change & valid, true_change & valid)
    return EvalReport(
        model_curve=model_curve,
        null_curve=null_curve,
        null_res=nr,
        seed_mean=mean_grid,
        seed_std=std_grid,
        confusion_counts=counts,
    )


def save_curves_csv(model: MaeCurve, null: MaeCurve, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["resolution_km", "model_mae", "null_mae"])
        for s, m, n in zip(model.scales_km, model.values, null.values):
            writer.writerow([f"{s:.6g}", f"{m:.9g}", f"{n:.9g}"])


def load_curves_csv(path: str | Path) -> tuple[MaeCurve, MaeCurve]:
    scales, model_vals, null_vals = [], [], []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["resolution_km", "model_mae", "null_mae"]:
            raise ValueError(f"{path}: unexpected curve CSV header {header}")
        for row in reader:
            if not row:
                continue
            scales.append(float(row[0]))
            model_vals.append(float(row[1]))
            null_vals.append(float(row[2]))
    scales_arr = np.array(scales)
    return (MaeCurve(scales_arr, np.array(model_vals)),
            MaeCurve(scales_arr.copy(), np.array(null_vals)))


def report_text(report: EvalReport) -> str:
    lines = ["== imperviousness forecast evaluation =="]
    lines.append("scale_km  model_mae  null_mae")
    for s, m, n in zip(report.model_curve.scales_km, report.model_curve.values,
                       report.null_curve.values):
        lines.append(f"{s:8.3f}  {m:9.6f}  {n:8.6f}")
    lines.append(f"null_resolution_km={report.null_res.label()}")
    if report.null_res.mae_at_crossing is not None:
        lines.append(f"mae_at_null_resolution={report.null_res.mae_at_crossing:.6f}")
    c = report.confusion_counts
    if c is not None:
        lines.append(f"confusion tp={c.tp} fp={c.fp} fn={c.fn} tn={c.tn}")
        lines.append(
            f"precision={c.precision:.2f} recall={c.recall:.2f} f1={c.f1:.2f}"
            + (" (degenerate)" if c.degenerate else "")
        )
    lines.extend(report.notes)
    return "\n".join(lines) + "\n"


def curves_svg(model: MaeCurve, null: MaeCurve, title: str = "MAE vs resolution",
               width: int = 640, height: int = 420) -> str:
    """Render both curves as a minimal self-contained SVG line plot."""
    margin = 60
    x = np.log(model.scales_km)
    ys = np.concatenate([model.values, null.values])
    y_lo, y_hi = float(ys.min()), float(ys.max())
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.08 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v: float) -> float:
        return margin + (v - x[0]) / (x[-1] - x[0]) * (width - 2 * margin)

    def sy(v: float) -> float:
        return height - margin - (v - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    def polyline(vals: np.ndarray, color: str) -> str:
        pts = " ".join(f"{sx(xi):.1f},{sy(v):.1f}" for xi, v in zip(x, vals))
        return (f'<polyline fill="none" stroke="{color}" stroke-width="2" '
                f'points="{pts}"/>')

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for xi, s in zip(x, model.scales_km):
        parts.append(
            f'<text x="{sx(xi):.1f}" y="{height - margin + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{s:g}</text>')
    for frac in (0.0, 0.5, 1.0):
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(
            f'<text x="{margin - 8}" y="{sy(yv) + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{yv:.2f}</text>')
    parts.append(polyline(model.values, "#c0392b"))
    parts.append(polyline(null.values, "#16786c"))
    parts.append(
        f'<text x="{width - margin}" y="{margin - 8}" text-anchor="end" '
        f'font-family="sans-serif" font-size="12">'
        f'<tspan fill="#c0392b">model</tspan>  '
        f'<tspan fill="#16786c">null</tspan></text>')
    parts.append(
        f'<text x="{width / 2:.0f}" y="{height - 14}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">resolution (km, log)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
