"""Planar rigid transforms, box footprints, and BEV grid geometry.

Conventions used everywhere in this package:

* x forward, y left, yaw counterclockwise (radians), normalized to (-pi, pi].
* Grids are indexed (row, col) with row = y and col = x; cell (0, 0) has its
  center at (origin_x, origin_y) and centers step by ``cell`` meters.
* Motion is restricted to SE(2): z is constant, roll and pitch are zero.

The rotation coefficients of a pose are computed once with ``math.cos`` /
``math.sin`` and reused for scalar and vectorized point transforms, so the
same pose applied to a batch of points or to each point individually yields
bit-identical results. Several consistency checks elsewhere rely on this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Pose2",
    "Box2",
    "BevGridSpec",
    "identity",
    "compose",
    "inverse",
    "apply",
    "points_in_box",
    "cell_center",
    "world_to_cell",
]


def _normalize_yaw(yaw: float) -> float:
    """Map an angle to (-pi, pi]."""
    r = math.remainder(yaw, math.tau)
    if r <= -math.pi:
        r += math.tau
    return r


@dataclass(frozen=True)
class Pose2:
    """Planar rigid transform: rotation by ``yaw`` followed by translation."""

    x: float
    y: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", _normalize_yaw(float(self.yaw)))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Box2:
    """Oriented rectangular footprint: ``length`` along the heading, ``width`` across."""

    center: Pose2
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"box extents must be positive, got {self.length} x {self.width}")


@dataclass(frozen=True)
class BevGridSpec:
    """Geometry of a BEV grid: cell (0, 0) center, cell size, and cell counts."""

    origin_x: float
    origin_y: float
    cell: float
    width: int
    height: int

    def __post_init__(self):
        if self.cell <= 0:
            raise ValueError(f"cell size must be positive, got {self.cell}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def cell_centers(self) -> np.ndarray:
        """All cell centers as an (height, width, 2) array of (x, y) meters."""
        xs = self.origin_x + np.arange(self.width) * self.cell
        ys = self.origin_y + np.arange(self.height) * self.cell
        out = np.empty((self.height, self.width, 2))
        out[:, :, 0] = xs[None, :]
        out[:, :, 1] = ys[:, None]
        return out


def identity() -> Pose2:
    return Pose2(0.0, 0.0, 0.0)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """Transform applying ``b`` first, then ``a``."""
    ca, sa = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(
        ca * b.x - sa * b.y + a.x,
        sa * b.x + ca * b.y + a.y,
        a.yaw + b.yaw,
    )


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return Pose2(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.yaw)


def apply(p: Pose2, pt) -> np.ndarray:
    """Rotate ``pt`` by ``p.yaw`` then translate by ``(p.x, p.y)``.

    ``pt`` may be a single (x, y) point or an (N, 2) array; the result has the
    same shape. Batched and per-point calls produce bit-identical values.
    """
    pt = np.asarray(pt, dtype=float)
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    x = pt[..., 0]
    y = pt[..., 1]
    out = np.empty_like(pt)
    out[..., 0] = c * x - s * y + p.x
    out[..., 1] = s * x + c * y + p.y
    return out


def _candidate_window(box: Box2, grid: BevGridSpec):
    """Row/col index ranges that conservatively cover the box footprint."""
    # Circumscribed radius plus one cell of slack; never excludes an inside cell.
    reach = math.hypot(box.length, box.width) / 2.0 + grid.cell
    r0 = max(0, math.floor((box.center.y - reach - grid.origin_y) / grid.cell))
    r1 = min(grid.height - 1, math.ceil((box.center.y + reach - grid.origin_y) / grid.cell))
    c0 = max(0, math.floor((box.center.x - reach - grid.origin_x) / grid.cell))
    c1 = min(grid.width - 1, math.ceil((box.center.x + reach - grid.origin_x) / grid.cell))
    return r0, r1, c0, c1


def _cells_in_box(box: Box2, grid: BevGridSpec):
    """Rows, cols, and centers (meters) of cells whose centers lie in the box.

    Boundary inclusive; row-major order. Shared by :func:`points_in_box` and
    the flow generator so both see the same containment decisions.
    """
    r0, r1, c0, c1 = _candidate_window(box, grid)
    if r0 > r1 or c0 > c1:
        empty = np.empty(0, dtype=int)
        return empty, empty, np.empty((0, 2))
    rows, cols = np.meshgrid(np.arange(r0, r1 + 1), np.arange(c0, c1 + 1), indexing="ij")
    rows = rows.ravel()
    cols = cols.ravel()
    centers = np.empty((rows.size, 2))
    centers[:, 0] = grid.origin_x + cols * grid.cell
    centers[:, 1] = grid.origin_y + rows * grid.cell
    local = apply(inverse(box.center), centers)
    inside = (np.abs(local[:, 0]) <= box.length / 2.0) & (np.abs(local[:, 1]) <= box.width / 2.0)
    return rows[inside], cols[inside], centers[inside]


def points_in_box(box: Box2, grid: BevGridSpec) -> list[tuple[int, int]]:
    """Indices (row, col) of all cells whose centers lie inside the footprint.

    Cell centers exactly on a box edge count as inside. Output is in
    deterministic row-major order.
    """
    rows, cols, _ = _cells_in_box(box, grid)
    return list(zip(rows.tolist(), cols.tolist()))


def cell_center(grid: BevGridSpec, index: tuple[int, int]) -> np.ndarray:
    """Center (x, y) in meters of the cell at (row, col)."""
    row, col = index
    if not (0 <= row < grid.height and 0 <= col < grid.width):
        raise IndexError(f"cell index {index} outside {grid.width}x{grid.height} grid")
    return np.array([grid.origin_x + col * grid.cell, grid.origin_y + row * grid.cell])


def world_to_cell(grid: BevGridSpec, pt) -> np.ndarray:
    """Fractional cell coordinates (cx, cy) of a world point; cx counts columns.

    Not bounded: points outside the grid produce out-of-range coordinates.
    Inverse of :func:`cell_center` on cell centers.
    """
    pt = np.asarray(pt, dtype=float)
    out = np.empty_like(pt)
    out[..., 0] = (pt[..., 0] - grid.origin_x) / grid.cell
    out[..., 1] = (pt[..., 1] - grid.origin_y) / grid.cell
    return out
