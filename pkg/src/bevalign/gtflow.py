"""Ego-motion-compensation flow and dense ground-truth flow from box tracks.

Both flows are per-cell 2D displacement fields over a BEV grid:

* :func:`emc_flow` encodes the known relative ego motion between two
  timestamps. A static world point moved by this field lands at its correct
  position in the target ego frame.
* :func:`dense_gt_flow` encodes the residual motion of tracked objects with
  the ego motion factored out: both the source and target box poses are
  expressed in the ego frame of the anchor timestamp, so static tracks yield
  exactly zero flow regardless of how the ego moves.

:func:`scatter_check` re-derives a dense field cell by cell with scalar
arithmetic. It intentionally evaluates the same transform expressions as the
vectorized generator (the geometry primitives produce bit-identical scalar
and batched results), so agreement is exact, not approximate; what it checks
is the scatter/overlap bookkeeping.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import (
    BevGridSpec,
    Box2,
    Pose2,
    _candidate_window,
    _cells_in_box,
    apply,
    compose,
    inverse,
)
from .scenesim import BoxTrack, EgoTrajectory

__all__ = [
    "FlowField",
    "ScatterReport",
    "emc_transform",
    "emc_flow",
    "dense_gt_flow",
    "dense_gt_flow_backward",
    "backward_warp_field",
    "scatter_check",
    "save_flow",
    "load_flow",
]

FLOW_MAGIC = b"BFLW"
FLOW_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIdddBB")
_DIRECTION_CODES = {"forward": 0, "backward": 1}
_UNIT_CODES = {"m": 0, "m_per_s": 1}


@dataclass
class FlowField:
    """Per-cell (dx, dy) displacements in meters, or m/s for velocity fields."""

    grid: BevGridSpec
    data: np.ndarray  # (height, width, 2)
    direction: str  # "forward" (t0 -> t1) or "backward" (t1 -> t0)
    unit: str = "m"

    def __post_init__(self):
        if self.direction not in _DIRECTION_CODES:
            raise ValueError(f"direction must be forward/backward, got {self.direction!r}")
        if self.unit not in _UNIT_CODES:
            raise ValueError(f"unit must be m or m_per_s, got {self.unit!r}")
        expected = (self.grid.height, self.grid.width, 2)
        if self.data.shape != expected:
            raise ValueError(f"flow data shape {self.data.shape} != {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("flow field contains non-finite values")


def zero_flow(grid: BevGridSpec, direction: str = "forward", unit: str = "m") -> FlowField:
    return FlowField(grid, np.zeros((grid.height, grid.width, 2)), direction, unit)


def emc_transform(ego_src: Pose2, ego_dst: Pose2) -> Pose2:
    """Transform taking coordinates in the source ego frame to the target ego frame."""
    return compose(inverse(ego_dst), ego_src)


def emc_flow(ego_t0: Pose2, ego_t1: Pose2, grid: BevGridSpec, direction: str) -> FlowField:
    """Ego-motion flow field between two ego poses.

    For ``direction="forward"`` the grid cells are read as coordinates in the
    t0 ego frame and the flow moves them to the t1 frame; ``"backward"``
    swaps the roles.
    """
    if direction == "forward":
        rel = emc_transform(ego_t0, ego_t1)
    elif direction == "backward":
        rel = emc_transform(ego_t1, ego_t0)
    else:
        raise ValueError(f"direction must be forward/backward, got {direction!r}")
    centers = grid.cell_centers().reshape(-1, 2)
    flow = apply(rel, centers) - centers
    return FlowField(grid, flow.reshape(grid.height, grid.width, 2), direction, "m")


def _track_motion(track: BoxTrack, t_src: float, t_dst: float, anchor_inv: Pose2):
    """Box pose at t_src and its src->dst motion, both in the anchor ego frame.

    Returns motion ``None`` when the two poses coincide bit-for-bit (static
    tracks), so callers can emit exact zeros instead of compose/inverse
    roundoff.
    """
    b_src = compose(anchor_inv, track.pose_at(t_src))
    b_dst = compose(anchor_inv, track.pose_at(t_dst))
    if b_dst == b_src:
        return b_src, None
    return b_src, compose(b_dst, inverse(b_src))


def _dense_flow(
    tracks, t_src: float, t_dst: float, ego: EgoTrajectory, grid: BevGridSpec
) -> np.ndarray:
    anchor_inv = inverse(ego.pose_at(t_src))
    data = np.zeros((grid.height, grid.width, 2))
    best_d2 = np.full((grid.height, grid.width), np.inf)
    for track in sorted(tracks, key=lambda tr: tr.track_id):
        b_src, motion = _track_motion(track, t_src, t_dst, anchor_inv)
        rows, cols, centers = _cells_in_box(Box2(b_src, track.length, track.width), grid)
        if rows.size == 0:
            continue
        # Overlap rule: nearest box center wins, ties to the lower track id.
        # Processing in id order with a strict comparison implements the tie.
        d2 = (centers[:, 0] - b_src.x) ** 2 + (centers[:, 1] - b_src.y) ** 2
        take = d2 < best_d2[rows, cols]
        if not np.any(take):
            continue
        r, c = rows[take], cols[take]
        if motion is None:
            data[r, c, :] = 0.0
        else:
            data[r, c, :] = apply(motion, centers[take]) - centers[take]
        best_d2[r, c] = d2[take]
    return data


def dense_gt_flow(
    tracks, t0: float, t1: float, ego: EgoTrajectory, grid: BevGridSpec
) -> FlowField:
    """Dense ground-truth flow of tracked boxes from t0 to t1.

    The grid represents the ego frame at t0. For every cell center P inside a
    track's t0 footprint, flow(P) = motion(P) - P where the motion composes
    the box pose change between t0 and t1, both expressed in the t0 ego
    frame. Cells outside every box are zero.
    """
    if t0 > t1:
        raise ValueError(f"need t0 <= t1, got {t0} > {t1}")
    return FlowField(grid, _dense_flow(tracks, t0, t1, ego, grid), "forward", "m")


def dense_gt_flow_backward(
    tracks, t0: float, t1: float, ego: EgoTrajectory, grid: BevGridSpec
) -> FlowField:
    """Dense ground-truth flow from t1 back to t0, anchored at the t1 ego frame.

    Generated by swapping the roles of the two timestamps, not by numerically
    inverting the forward field.
    """
    if t0 > t1:
        raise ValueError(f"need t0 <= t1, got {t0} > {t1}")
    return FlowField(grid, _dense_flow(tracks, t1, t0, ego, grid), "backward", "m")


def backward_warp_field(
    tracks, t0: float, t1: float, ego: EgoTrajectory, grid: BevGridSpec
) -> FlowField:
    """Backward flow with support extended to the source footprints, for warping.

    :func:`dense_gt_flow_backward` assigns flow only inside the t1 footprint,
    which is what the loss supervises; a gather-style warp through that field
    leaves a stale copy of each moving box at its t0 position (the trailing
    cells look up their own location). Extending each box's motion to its t0
    footprint makes those cells fetch background instead, so warping a t0
    rasterization through this field reproduces the t1 rasterization up to
    interpolation. Target-footprint assignments take priority over trailing
    cleanup; within each pass the nearest-center/lowest-id overlap rule
    applies.
    """
    if t0 > t1:
        raise ValueError(f"need t0 <= t1, got {t0} > {t1}")
    anchor_inv = inverse(ego.pose_at(t1))
    data = np.zeros((grid.height, grid.width, 2))
    best_d2 = np.full((grid.height, grid.width), np.inf)
    assigned = np.zeros((grid.height, grid.width), dtype=bool)
    ordered = sorted(tracks, key=lambda tr: tr.track_id)
    for track in ordered:
        b_src, motion = _track_motion(track, t1, t0, anchor_inv)
        rows, cols, centers = _cells_in_box(Box2(b_src, track.length, track.width), grid)
        if rows.size == 0:
            continue
        d2 = (centers[:, 0] - b_src.x) ** 2 + (centers[:, 1] - b_src.y) ** 2
        take = d2 < best_d2[rows, cols]
        if not np.any(take):
            continue
        r, c = rows[take], cols[take]
        if motion is None:
            data[r, c, :] = 0.0
        else:
            data[r, c, :] = apply(motion, centers[take]) - centers[take]
        best_d2[r, c] = d2[take]
        assigned[r, c] = True
    ghost_d2 = np.full((grid.height, grid.width), np.inf)
    for track in ordered:
        b_src, motion = _track_motion(track, t1, t0, anchor_inv)
        if motion is None:
            continue
        b_old = compose(anchor_inv, track.pose_at(t0))
        rows, cols, centers = _cells_in_box(Box2(b_old, track.length, track.width), grid)
        if rows.size == 0:
            continue
        d2 = (centers[:, 0] - b_old.x) ** 2 + (centers[:, 1] - b_old.y) ** 2
        take = (~assigned[rows, cols]) & (d2 < ghost_d2[rows, cols])
        if not np.any(take):
            continue
        r, c = rows[take], cols[take]
        data[r, c, :] = apply(motion, centers[take]) - centers[take]
        ghost_d2[r, c] = d2[take]
    return FlowField(grid, data, "backward", "m")


@dataclass
class ScatterReport:
    max_discrepancy: float
    n_cells: int
    n_occupied: int


def scatter_check(
    flow: FlowField, tracks, t0: float, t1: float, ego: EgoTrajectory, grid: BevGridSpec
) -> ScatterReport:
    """Re-derive a dense GT field point by point and report the worst mismatch.

    Every cell is accounted for: cells outside all candidate windows must be
    zero, candidate cells are recomputed with scalar per-point arithmetic
    (containment, overlap rule, and transform applied to each center
    individually, in the direction given by ``flow.direction``).
    """
    if flow.grid != grid:
        raise ValueError("flow field grid does not match the query grid")
    if flow.direction == "forward":
        t_src, t_dst = t0, t1
    else:
        t_src, t_dst = t1, t0
    anchor_inv = inverse(ego.pose_at(t_src))

    boxes = []
    covered = np.zeros((grid.height, grid.width), dtype=bool)
    for track in sorted(tracks, key=lambda tr: tr.track_id):
        b_src, motion = _track_motion(track, t_src, t_dst, anchor_inv)
        r0, r1, c0, c1 = _candidate_window(Box2(b_src, track.length, track.width), grid)
        if r0 <= r1 and c0 <= c1:
            covered[r0 : r1 + 1, c0 : c1 + 1] = True
        boxes.append((track, b_src, inverse(b_src), motion))

    max_disc = 0.0
    n_occupied = 0
    if not np.all(covered):
        background = flow.data[~covered]
        if background.size:
            max_disc = float(np.abs(background).max())

    for row, col in np.argwhere(covered):
        x = grid.origin_x + col * grid.cell
        y = grid.origin_y + row * grid.cell
        best_d2 = np.inf
        expected = (0.0, 0.0)
        occupied = False
        for track, b_src, b_src_inv, motion in boxes:
            u, v = apply(b_src_inv, (x, y))
            if abs(u) <= track.length / 2.0 and abs(v) <= track.width / 2.0:
                d2 = (x - b_src.x) ** 2 + (y - b_src.y) ** 2
                if d2 < best_d2:
                    best_d2 = d2
                    if motion is None:
                        expected = (0.0, 0.0)
                    else:
                        mx, my = apply(motion, (x, y))
                        expected = (mx - x, my - y)
                    occupied = True
        if occupied:
            n_occupied += 1
        disc = max(
            abs(flow.data[row, col, 0] - expected[0]),
            abs(flow.data[row, col, 1] - expected[1]),
        )
        if disc > max_disc:
            max_disc = disc
    return ScatterReport(max_discrepancy=max_disc, n_cells=grid.n_cells, n_occupied=n_occupied)


def save_flow(flow: FlowField, path) -> None:
    header = _HEADER.pack(
        FLOW_MAGIC,
        FLOW_FORMAT_VERSION,
        flow.grid.width,
        flow.grid.height,
        flow.grid.cell,
        flow.grid.origin_x,
        flow.grid.origin_y,
        _DIRECTION_CODES[flow.direction],
        _UNIT_CODES[flow.unit],
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(flow.data.astype("<f4").tobytes())


def load_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, width, height, cell, ox, oy, dir_code, unit_code = _HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise ValueError(f"not a flow field file (magic {magic!r})")
    if version != FLOW_FORMAT_VERSION:
        raise ValueError(f"unsupported flow format version {version}")
    grid = BevGridSpec(origin_x=ox, origin_y=oy, cell=cell, width=width, height=height)
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(float)
    direction = {v: k for k, v in _DIRECTION_CODES.items()}[dir_code]
    unit = {v: k for k, v in _UNIT_CODES.items()}[unit_code]
    return FlowField(grid, data.reshape(height, width, 2), direction, unit)
