"""Equirectangular (ERP) tiling geometry.

Tile layout convention: tile (row, col) of a rows x cols grid covers
tilt in [90 - (row+1)*180/rows, 90 - row*180/rows) and
pan  in [-180 + col*360/cols, -180 + (col+1)*360/cols),
i.e. row 0 is the top (north) band, col 0 starts at the -180 deg seam,
matching the top-left image origin of an ERP frame. All boxes are
closed-open; viewport/tile intersection therefore requires a
positive-measure overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np


def wrap_angle(deg):
    """Wrap an angle (scalar or array) in degrees to [-180, 180)."""
    return (deg + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class ErpPlane:
    """Pixel dimensions of an equirectangular plane (width = 2 * height)."""

    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("ERP dimensions must be positive")
        if self.width != 2 * self.height:
            raise ValueError(
                f"ERP plane must be 2:1 (360x180 deg), got {self.width}x{self.height}"
            )


class TileIndex(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class TileGrid:
    """Uniform angular tiling of the ERP plane (default 4 rows x 8 cols)."""

    rows: int = 4
    cols: int = 8
    plane: ErpPlane | None = None

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.plane is not None:
            if self.plane.width % self.cols or self.plane.height % self.rows:
                raise ValueError("ERP dimensions must be divisible by the tile grid")

    @property
    def n_tiles(self) -> int:
        return self.rows * self.cols

    @property
    def pan_span(self) -> float:
        return 360.0 / self.cols

    @property
    def tilt_span(self) -> float:
        return 180.0 / self.rows

    def tiles(self) -> Iterator[TileIndex]:
        """All tile indices in row-major order."""
        for r in range(self.rows):
            for c in range(self.cols):
                yield TileIndex(r, c)

    def flat_index(self, tile: TileIndex) -> int:
        return tile.row * self.cols + tile.col


@dataclass(frozen=True)
class Viewport:
    """Angular window rendered on the HMD: center orientation plus field of view.

    fov_h may span up to the full 360 deg circle; fov_v up to 180 deg.
    """

    pan: float
    tilt: float
    fov_h: float = 90.0
    fov_v: float = 90.0

    def __post_init__(self):
        object.__setattr__(self, "pan", float(wrap_angle(self.pan)))
        if not -90.0 <= self.tilt <= 90.0:
            raise ValueError(f"viewport tilt {self.tilt} outside [-90, 90]")
        if not 0.0 < self.fov_h <= 360.0:
            raise ValueError(f"horizontal fov {self.fov_h} outside (0, 360]")
        if not 0.0 < self.fov_v <= 180.0:
            raise ValueError(f"vertical fov {self.fov_v} outside (0, 180]")


def tile_box(grid: TileGrid, tile: TileIndex) -> tuple[float, float, float, float]:
    """(pan_lo, pan_hi, tilt_lo, tilt_hi) of a tile's closed-open angular box."""
    if not (0 <= tile.row < grid.rows and 0 <= tile.col < grid.cols):
        raise ValueError(f"tile {tile} outside {grid.rows}x{grid.cols} grid")
    pan_lo = -180.0 + tile.col * grid.pan_span
    tilt_hi = 90.0 - tile.row * grid.tilt_span
    return pan_lo, pan_lo + grid.pan_span, tilt_hi - grid.tilt_span, tilt_hi


def tile_center(grid: TileGrid, tile: TileIndex) -> tuple[float, float]:
    pan_lo, pan_hi, tilt_lo, tilt_hi = tile_box(grid, tile)
    return 0.5 * (pan_lo + pan_hi), 0.5 * (tilt_lo + tilt_hi)


def _arcs_overlap(lo_a: float, width_a: float, lo_b: float, width_b: float) -> bool:
    # Half-open arcs [lo, lo+width) on the 360 deg circle.
    if width_a >= 360.0 or width_b >= 360.0:
        return True
    return ((lo_b - lo_a) % 360.0) < width_a or ((lo_a - lo_b) % 360.0) < width_b


def tiles_in_viewport(grid: TileGrid, vp: Viewport) -> set[TileIndex]:
    """Every tile whose angular box intersects the viewport box.

    Pan intersection wraps at the +-180 deg seam; tilt is clamped to
    [-90, 90] (a viewport pushed past a pole does not wrap).
    """
    vp_pan_lo = vp.pan - 0.5 * vp.fov_h
    tilt_lo = max(-90.0, vp.tilt - 0.5 * vp.fov_v)
    tilt_hi = min(90.0, vp.tilt + 0.5 * vp.fov_v)

    rows = [
        r
        for r in range(grid.rows)
        if (90.0 - (r + 1) * grid.tilt_span) < tilt_hi
        and tilt_lo < (90.0 - r * grid.tilt_span)
    ]
    cols = [
        c
        for c in range(grid.cols)
        if _arcs_overlap(vp_pan_lo, vp.fov_h, -180.0 + c * grid.pan_span, grid.pan_span)
    ]
    return {TileIndex(r, c) for r in rows for c in cols}


def tile_distance(grid: TileGrid, tile: TileIndex, viewport_tiles: set[TileIndex]) -> float:
    """Euclidean distance, in tile-grid units, from a tile to the nearest viewport tile.

    Column distance is taken modulo the grid width (shortest wrap);
    0 exactly when the tile itself belongs to the viewport set.
    """
    if not viewport_tiles:
        raise ValueError("no viewport tiles")
    if tile in viewport_tiles:
        return 0.0
    best = math.inf
    for v in viewport_tiles:
        dr = tile.row - v.row
        dc = abs(tile.col - v.col)
        dc = min(dc, grid.cols - dc)
        best = min(best, math.hypot(dr, dc))
    return best


def spherical_correction(grid: TileGrid, tile: TileIndex, radius: float = 1.0) -> float:
    """Projection-effect weight of a tile: its spherical area relative to its ERP area.

    Equals the mean of cos(tilt) over the tile's latitude band, a closed-form
    integral; the sphere radius cancels. For the default 4x8 grid this is
    (4/pi) * (sin(tilt_hi) - sin(tilt_lo)).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    _, _, tilt_lo, tilt_hi = tile_box(grid, tile)
    phi_lo = math.radians(tilt_lo)
    phi_hi = math.radians(tilt_hi)
    if phi_lo < -math.pi / 2 - 1e-12 or phi_hi > math.pi / 2 + 1e-12:
        raise ValueError("tile latitude band outside [-pi/2, pi/2]")
    return (math.sin(phi_hi) - math.sin(phi_lo)) / (phi_hi - phi_lo)


def correction_vector(grid: TileGrid, radius: float = 1.0) -> np.ndarray:
    """Spherical correction for every tile, row-major (length rows*cols)."""
    return np.array(
        [spherical_correction(grid, t, radius) for t in grid.tiles()], dtype=float
    )


def viewport_pixel_mask(plane: ErpPlane, viewports: "Viewport | list[Viewport]") -> np.ndarray:
    """Boolean ERP mask of the pixels covered by one or more viewport boxes.

    Pixel centers are tested against each viewport's angular box (pan
    wrapped, tilt clamped); the union over all viewports is returned.
    """
    if isinstance(viewports, Viewport):
        viewports = [viewports]
    if not viewports:
        raise ValueError("no viewports")
    pan_px = (np.arange(plane.width) + 0.5) / plane.width * 360.0 - 180.0
    tilt_px = 90.0 - (np.arange(plane.height) + 0.5) / plane.height * 180.0
    mask = np.zeros((plane.height, plane.width), dtype=bool)
    for vp in viewports:
        if vp.fov_h >= 360.0:
            cols = np.ones(plane.width, dtype=bool)
        else:
            cols = ((pan_px - (vp.pan - 0.5 * vp.fov_h)) % 360.0) < vp.fov_h
        lo = max(-90.0, vp.tilt - 0.5 * vp.fov_v)
        hi = min(90.0, vp.tilt + 0.5 * vp.fov_v)
        rows = (tilt_px >= lo) & (tilt_px <= hi)
        mask |= rows[:, None] & cols[None, :]
    return mask
