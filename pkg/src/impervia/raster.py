"""Raster data model, IGRD file I/O, tiling, block aggregation, and change maps.

Grids are the common currency of the package: 2-D rasters holding either
continuous imperviousness percentages in [0, 100] or categorical land-cover
class indices, together with a per-pixel nodata mask and a pixel size in
meters. The on-disk representation is the little-endian IGRD format:

    magic "IGRD" | version u16 (=1) | kind u8 (0=categorical/u8,
    1=continuous/f32) | reserved u8 | width u32 | height u32 |
    pixel_size_m f32 | nodata_value f32 | row-major body

Continuous bodies are float32, categorical bodies uint8. Nodata pixels are
stored as the header's nodata value and surfaced as a boolean mask in memory.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, KindMismatchError, SchemaError, ShapeMismatchError

IGRD_MAGIC = b"IGRD"
IGRD_VERSION = 1
_HEADER = struct.Struct("<4sHBBIIff")

DEFAULT_NODATA_CONTINUOUS = -9999.0
DEFAULT_NODATA_CATEGORICAL = 255


class GridKind(enum.Enum):
    CATEGORICAL = 0
    CONTINUOUS = 1


@dataclass
class Grid:
    """A 2-D raster with pixel size metadata and a nodata mask.

    ``values`` is a (height, width) array: float32 for continuous grids
    (imperviousness percent in [0, 100]) and uint8 for categorical grids
    (class indices). ``nodata`` marks invalid pixels; the stored value at a
    masked position is the grid's nodata fill and carries no meaning.
    """

    values: np.ndarray
    kind: GridKind
    pixel_size: float = 30.0
    nodata: np.ndarray | None = None
    nodata_value: float = field(default=np.nan)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeMismatchError(f"grid values must be 2-D, got {self.values.ndim}-D")
        if self.kind is GridKind.CONTINUOUS:
            # float64 survives in memory (aggregation stays mean-preserving
            # to 1e-9); files always store float32
            if self.values.dtype != np.float64:
                self.values = self.values.astype(np.float32, copy=False)
            if np.isnan(self.nodata_value):
                self.nodata_value = DEFAULT_NODATA_CONTINUOUS
        else:
            self.values = self.values.astype(np.uint8, copy=False)
            if np.isnan(self.nodata_value):
                self.nodata_value = DEFAULT_NODATA_CATEGORICAL
        if self.nodata is None:
            self.nodata = np.zeros(self.values.shape, dtype=bool)
        else:
            self.nodata = np.asarray(self.nodata, dtype=bool)
            if self.nodata.shape != self.values.shape:
                raise ShapeMismatchError("nodata mask shape differs from values shape")
        if self.pixel_size <= 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def valid(self) -> np.ndarray:
        """Boolean mask of usable pixels (inverse of nodata)."""
        return ~self.nodata

    def copy(self) -> "Grid":
        return Grid(
            self.values.copy(),
            self.kind,
            pixel_size=self.pixel_size,
            nodata=self.nodata.copy(),
            nodata_value=self.nodata_value,
        )

    def crop(self, row: int, col: int, rows: int, cols: int) -> "Grid":
        """Slice a rows x cols window anchored at (row, col)."""
        if row < 0 or col < 0 or row + rows > self.height or col + cols > self.width:
            raise ShapeMismatchError(
                f"crop window ({row},{col})+({rows},{cols}) exceeds grid {self.shape}"
            )
        sl = (slice(row, row + rows), slice(col, col + cols))
        return Grid(
            self.values[sl].copy(),
            self.kind,
            pixel_size=self.pixel_size,
            nodata=self.nodata[sl].copy(),
            nodata_value=self.nodata_value,
        )

    def validate_range(self, class_count: int | None = None) -> None:
        """Check value-range invariants on valid pixels.

        Continuous values must lie in [0, 100]; categorical class indices
        must be < ``class_count`` when given.
        """
        vals = self.values[self.valid]
        if vals.size == 0:
            return
        if self.kind is GridKind.CONTINUOUS:
            lo, hi = float(vals.min()), float(vals.max())
            if lo < 0.0 or hi > 100.0:
                raise SchemaError(f"continuous values outside [0,100]: [{lo},{hi}]")
        elif class_count is not None:
            top = int(vals.max())
            if top >= class_count:
                raise SchemaError(f"class index {top} >= class count {class_count}")


def continuous_grid(values, pixel_size: float = 30.0, nodata=None) -> Grid:
    return Grid(np.asarray(values, dtype=np.float32), GridKind.CONTINUOUS,
                pixel_size=pixel_size, nodata=nodata)


def categorical_grid(values, pixel_size: float = 30.0, nodata=None) -> Grid:
    return Grid(np.asarray(values, dtype=np.uint8), GridKind.CATEGORICAL,
                pixel_size=pixel_size, nodata=nodata)


# ---------------------------------------------------------------------------
# LULC legend

@dataclass(frozen=True)
class LulcLegend:
    """Legend for categorical land-cover grids.

    ``developed_weight`` holds, for each class, the fraction of impervious
    surface credited to transitions into that class (None for pervious
    classes). Exactly the developed classes carry a weight.
    """

    names: tuple[str, ...]
    developed_weight: tuple[float | None, ...]

    def __post_init__(self) -> None:
        if len(self.names) != len(self.developed_weight):
            raise SchemaError("legend names and weights differ in length")
        for w in self.developed_weight:
            if w is not None and not (0.0 < w <= 1.0):
                raise SchemaError(f"developed weight {w} outside (0, 1]")

    @property
    def class_count(self) -> int:
        return len(self.names)

    @property
    def pervious_flag(self) -> tuple[bool, ...]:
        return tuple(w is None for w in self.developed_weight)

    @property
    def developed_classes(self) -> tuple[int, ...]:
        return tuple(i for i, w in enumerate(self.developed_weight) if w is not None)

    @property
    def pervious_classes(self) -> tuple[int, ...]:
        return tuple(i for i, w in enumerate(self.developed_weight) if w is None)


# NLCD 16-class legend. The four developed classes are weighted by the upper
# bound of their impervious-surface band (open-ended "high intensity" -> 1.0).
NLCD16 = LulcLegend(
    names=(
        "Open Water",
        "Perennial Ice/Snow",
        "Developed, Open Space",
        "Developed, Low Intensity",
        "Developed, Medium Intensity",
        "Developed, High Intensity",
        "Barren Land",
        "Deciduous Forest",
        "Evergreen Forest",
        "Mixed Forest",
        "Shrub/Scrub",
        "Grassland/Herbaceous",
        "Pasture/Hay",
        "Cultivated Crops",
        "Woody Wetlands",
        "Emergent Herbaceous Wetlands",
    ),
    developed_weight=(
        None, None, 0.20, 0.49, 0.79, 1.00,
        None, None, None, None, None, None, None, None, None, None,
    ),
)


# ---------------------------------------------------------------------------
# File I/O

def save_grid(grid: Grid, path: str | Path) -> None:
    """Write a grid to an IGRD file (atomically via temp file + rename)."""
    path = Path(path)
    body = grid.values.copy()
    if grid.kind is GridKind.CONTINUOUS:
        body[grid.nodata] = np.float32(grid.nodata_value)
        raw = body.astype("<f4").tobytes()
    else:
        body[grid.nodata] = np.uint8(int(grid.nodata_value))
        raw = body.astype(np.uint8).tobytes()
    header = _HEADER.pack(
        IGRD_MAGIC,
        IGRD_VERSION,
        grid.kind.value,
        0,
        grid.width,
        grid.height,
        np.float32(grid.pixel_size),
        np.float32(grid.nodata_value),
    )
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + raw)
    tmp.replace(path)


def load_grid(path: str | Path) -> Grid:
    """Read an IGRD file back into a Grid.

    Raises FormatError on a bad magic/version, SchemaError on an
    inconsistent header, and OSError on a truncated body.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than IGRD header")
    magic, version, kind_code, _reserved, width, height, pixel_size, nodata_value = (
        _HEADER.unpack_from(data)
    )
    if magic != IGRD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != IGRD_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    try:
        kind = GridKind(kind_code)
    except ValueError as exc:
        raise SchemaError(f"{path}: unknown grid kind {kind_code}") from exc
    if width == 0 or height == 0:
        raise SchemaError(f"{path}: zero-sized grid {width}x{height}")
    itemsize = 4 if kind is GridKind.CONTINUOUS else 1
    expected = _HEADER.size + width * height * itemsize
    if len(data) != expected:
        raise OSError(f"{path}: body is {len(data) - _HEADER.size} bytes, "
                      f"expected {expected - _HEADER.size}")
    raw = data[_HEADER.size:]
    if kind is GridKind.CONTINUOUS:
        values = np.frombuffer(raw, dtype="<f4").reshape(height, width).copy()
        mask = np.isnan(values) if np.isnan(nodata_value) else values == np.float32(nodata_value)
    else:
        values = np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy()
        mask = values == np.uint8(int(nodata_value))
    return Grid(values, kind, pixel_size=float(pixel_size), nodata=mask,
                nodata_value=float(nodata_value))


def convert_geotiff(path: str | Path) -> Grid:
    """Placeholder for a GeoTIFF -> IGRD converter.

    Projection-aware ingestion is out of scope here; prepare data externally
    (e.g. GDAL: read band 1, resample to a square pixel size, export the
    array) and write it with :func:`save_grid`.
    """
    raise NotImplementedError(
        "GeoTIFF ingestion is not implemented; convert the raster to a numeric "
        "array externally and save it as IGRD via save_grid()"
    )


# ---------------------------------------------------------------------------
# Tiling

@dataclass
class TileSet:
    """Non-overlapping, axis-aligned square tiles anchored at the top-left.

    Remainder pixels that do not fill a whole tile are excluded and reported
    via ``margin_rows``/``margin_cols``.
    """

    parent_shape: tuple[int, int]
    side: int
    offsets: tuple[tuple[int, int], ...]
    nodata_fraction: tuple[float, ...]
    margin_rows: int
    margin_cols: int
    warning: str | None = None

    def __len__(self) -> int:
        return len(self.offsets)

    def extract(self, grid: Grid, index: int) -> Grid:
        if grid.shape != self.parent_shape:
            raise ShapeMismatchError(
                f"grid shape {grid.shape} does not match tile set parent {self.parent_shape}"
            )
        row, col = self.offsets[index]
        return grid.crop(row, col, self.side, self.side)


def tile(grid: Grid, side: int) -> TileSet:
    """Partition the largest top-left region divisible by ``side`` into tiles."""
    if side < 1:
        raise ValueError(f"tile side must be >= 1, got {side}")
    n_rows = grid.height // side
    n_cols = grid.width // side
    offsets = []
    fractions = []
    for r in range(n_rows):
        for c in range(n_cols):
            block = grid.nodata[r * side:(r + 1) * side, c * side:(c + 1) * side]
            offsets.append((r * side, c * side))
            fractions.append(float(block.mean()))
    warning = None
    if not offsets:
        warning = f"tile side {side} exceeds grid shape {grid.shape}; no tiles produced"
    return TileSet(
        parent_shape=grid.shape,
        side=side,
        offsets=tuple(offsets),
        nodata_fraction=tuple(fractions),
        margin_rows=grid.height - n_rows * side,
        margin_cols=grid.width - n_cols * side,
        warning=warning,
    )


# ---------------------------------------------------------------------------
# Aggregation and change

def aggregate(grid: Grid, cell: int) -> Grid:
    """Mean-aggregate a continuous grid into cell x cell blocks.

    Nodata pixels are excluded from each block mean; a block with no valid
    pixel becomes nodata. The output pixel size scales by ``cell``.
    """
    if grid.kind is not GridKind.CONTINUOUS:
        raise KindMismatchError("aggregate requires a continuous grid")
    if cell < 1:
        raise ValueError(f"cell must be >= 1, got {cell}")
    if grid.height % cell or grid.width % cell:
        raise ShapeMismatchError(
            f"cell {cell} does not divide grid shape {grid.shape}; crop via tile() first"
        )
    if cell == 1:
        out = grid.copy()
        return out
    h, w = grid.height // cell, grid.width // cell
    vals = np.where(grid.nodata, 0.0, grid.values.astype(np.float64))
    vals = vals.reshape(h, cell, w, cell)
    counts = grid.valid.reshape(h, cell, w, cell).sum(axis=(1, 3))
    sums = vals.sum(axis=(1, 3))
    empty = counts == 0
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=~empty)
    return Grid(
        means,
        GridKind.CONTINUOUS,
        pixel_size=grid.pixel_size * cell,
        nodata=empty,
        nodata_value=grid.nodata_value,
    )


def change_map(before: Grid, after: Grid) -> Grid:
    """Per-pixel signed difference ``after - before``; nodata propagates."""
    if before.shape != after.shape:
        raise ShapeMismatchError(f"shapes differ: {before.shape} vs {after.shape}")
    if before.kind is not GridKind.CONTINUOUS or after.kind is not GridKind.CONTINUOUS:
        raise KindMismatchError("change_map requires continuous grids")
    mask = before.nodata | after.nodata
    diff = after.values.astype(np.float64) - before.values.astype(np.float64)
    diff[mask] = 0.0
    return Grid(diff, GridKind.CONTINUOUS, pixel_size=before.pixel_size,
                nodata=mask)
