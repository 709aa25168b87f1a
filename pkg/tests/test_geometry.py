"""Geometry tests against rotation-matrix and exhaustive-containment oracles."""

import math

import numpy as np
import pytest

from bevalign.geometry import (
    BevGridSpec,
    Box2,
    Pose2,
    apply,
    cell_center,
    compose,
    identity,
    inverse,
    points_in_box,
    world_to_cell,
)


def pose_matrix(p: Pose2) -> np.ndarray:
    """Independent 3x3 homogeneous-matrix representation."""
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    return np.array([[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]])


def brute_force_cells(box: Box2, grid: BevGridSpec) -> list[tuple[int, int]]:
    """Exhaustive containment oracle: inverse-rotate every cell center."""
    out = []
    c, s = math.cos(box.center.yaw), math.sin(box.center.yaw)
    for row in range(grid.height):
        for col in range(grid.width):
            px = grid.origin_x + col * grid.cell - box.center.x
            py = grid.origin_y + row * grid.cell - box.center.y
            u = c * px + s * py
            v = -s * px + c * py
            if abs(u) <= box.length / 2 and abs(v) <= box.width / 2:
                out.append((row, col))
    return out


class TestPose2:
    def test_yaw_normalized(self):
        assert Pose2(0, 0, 3 * math.pi).yaw == pytest.approx(math.pi)
        assert Pose2(0, 0, -math.pi).yaw == pytest.approx(math.pi)
        assert -math.pi < Pose2(0, 0, -math.pi).yaw <= math.pi

    def test_compose_identity(self):
        p = Pose2(1.5, -2.0, 0.7)
        q = compose(identity(), p)
        assert (q.x, q.y, q.yaw) == (p.x, p.y, p.yaw)

    def test_compose_pure_translation(self):
        q = compose(Pose2(1, 0, 0), Pose2(2, 0, 0))
        assert (q.x, q.y, q.yaw) == (3.0, 0.0, 0.0)

    def test_compose_quarter_turn_matrix_oracle(self):
        a = Pose2(0, 0, math.pi / 2)
        b = Pose2(1, 0, 0)
        q = compose(a, b)
        m = pose_matrix(a) @ pose_matrix(b)
        assert np.allclose([q.x, q.y], m[:2, 2], atol=1e-12)
        assert np.allclose([q.x, q.y, q.yaw], [0.0, 1.0, math.pi / 2], atol=1e-12)

    def test_compose_matches_matrix_oracle_random(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            a = Pose2(*rng.uniform(-10, 10, 2), rng.uniform(-math.pi, math.pi))
            b = Pose2(*rng.uniform(-10, 10, 2), rng.uniform(-math.pi, math.pi))
            q = compose(a, b)
            m = pose_matrix(a) @ pose_matrix(b)
            assert np.allclose(pose_matrix(q), m, atol=1e-12)

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            p = Pose2(*rng.uniform(-50, 50, 2), rng.uniform(-math.pi, math.pi))
            q = compose(p, inverse(p))
            assert abs(q.x) < 1e-9 and abs(q.y) < 1e-9 and abs(q.yaw) < 1e-9
            r = inverse(inverse(p))
            assert abs(r.x - p.x) < 1e-9 and abs(r.y - p.y) < 1e-9
            assert abs(r.yaw - p.yaw) < 1e-9

    def test_compose_associative(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a, b, c = (
                Pose2(*rng.uniform(-5, 5, 2), rng.uniform(-math.pi, math.pi)) for _ in range(3)
            )
            lhs = compose(compose(a, b), c)
            rhs = compose(a, compose(b, c))
            assert abs(lhs.x - rhs.x) < 1e-9
            assert abs(lhs.y - rhs.y) < 1e-9
            assert abs(lhs.yaw - rhs.yaw) < 1e-9


class TestApply:
    def test_identity(self):
        assert np.array_equal(apply(identity(), (3.0, 4.0)), [3.0, 4.0])

    def test_quarter_rotation(self):
        assert np.allclose(apply(Pose2(0, 0, math.pi / 2), (1, 0)), [0, 1], atol=1e-12)

    def test_half_turn_with_translation_matrix_oracle(self):
        p = Pose2(5, -2, math.pi)
        got = apply(p, (1, 1))
        expect = (pose_matrix(p) @ [1, 1, 1])[:2]
        assert np.allclose(got, expect, atol=1e-12)
        assert np.allclose(got, [4, -3], atol=1e-12)

    def test_batched_matches_per_point_bitwise(self):
        rng = np.random.default_rng(5)
        p = Pose2(1.25, -0.5, 0.9)
        pts = rng.normal(size=(40, 2)) * 20
        batch = apply(p, pts)
        for i in range(pts.shape[0]):
            single = apply(p, pts[i])
            assert batch[i, 0] == single[0] and batch[i, 1] == single[1]


class TestGrid:
    grid = BevGridSpec(origin_x=-32.0, origin_y=-32.0, cell=0.5, width=129, height=129)

    def test_cell_center_origin(self):
        assert np.array_equal(cell_center(self.grid, (0, 0)), [-32.0, -32.0])

    def test_world_to_cell_examples(self):
        assert np.array_equal(world_to_cell(self.grid, (-32.0, -32.0)), [0.0, 0.0])
        # x offset of a quarter meter is half a cell in the column direction
        assert np.array_equal(world_to_cell(self.grid, (-31.75, -32.0)), [0.5, 0.0])

    def test_roundtrip_on_centers(self):
        for idx in [(0, 0), (5, 17), (128, 128), (64, 3)]:
            cx, cy = world_to_cell(self.grid, cell_center(self.grid, idx))
            assert (cy, cx) == idx

    def test_cell_center_out_of_range(self):
        with pytest.raises(IndexError):
            cell_center(self.grid, (129, 0))
        with pytest.raises(IndexError):
            cell_center(self.grid, (0, -1))

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            BevGridSpec(0, 0, 0.0, 4, 4)
        with pytest.raises(ValueError):
            BevGridSpec(0, 0, 0.5, 0, 4)


class TestPointsInBox:
    def test_axis_aligned_neighborhood(self):
        # 2m x 2m box centered on a cell center of a 1m grid: centers with
        # |dx| <= 1 and |dy| <= 1 are inside, boundary inclusive -> 3x3 block.
        grid = BevGridSpec(origin_x=0.0, origin_y=0.0, cell=1.0, width=7, height=7)
        box = Box2(Pose2(3.0, 3.0, 0.0), length=2.0, width=2.0)
        got = points_in_box(box, grid)
        expect = [(r, c) for r in (2, 3, 4) for c in (2, 3, 4)]
        assert got == expect

    def test_box_outside_grid(self):
        grid = BevGridSpec(0.0, 0.0, 1.0, 8, 8)
        box = Box2(Pose2(100.0, 100.0, 0.3), 4.0, 2.0)
        assert points_in_box(box, grid) == []

    def test_rotated_box_brute_force_oracle(self):
        grid = BevGridSpec(-8.0, -8.0, 0.5, 33, 33)
        box = Box2(Pose2(1.0, -2.0, math.pi / 4), 5.0, 2.0)
        assert points_in_box(box, grid) == brute_force_cells(box, grid)

    def test_random_boxes_match_exhaustive_oracle(self):
        grid = BevGridSpec(-16.0, -16.0, 0.5, 64, 64)
        centers = grid.cell_centers().reshape(-1, 2)
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            box = Box2(
                Pose2(*rng.uniform(-18, 18, 2), rng.uniform(-math.pi, math.pi)),
                length=rng.uniform(0.3, 8.0),
                width=rng.uniform(0.3, 5.0),
            )
            # Vectorized containment oracle over every cell, via explicit
            # homogeneous-matrix end-to-end (independent of the prefilter path).
            m = np.linalg.inv(pose_matrix(box.center))
            local = centers @ m[:2, :2].T + m[:2, 2]
            inside = (np.abs(local[:, 0]) <= box.length / 2) & (
                np.abs(local[:, 1]) <= box.width / 2
            )
            expect = [(i // grid.width, i % grid.width) for i in np.flatnonzero(inside)]
            assert points_in_box(box, grid) == expect

    def test_full_turn_invariance(self):
        grid = BevGridSpec(-10.0, -10.0, 0.5, 41, 41)
        rng = np.random.default_rng(9)
        for _ in range(50):
            c = Pose2(*rng.uniform(-8, 8, 2), rng.uniform(-math.pi, math.pi))
            box = Box2(c, rng.uniform(0.5, 6.0), rng.uniform(0.5, 4.0))
            turned = Box2(Pose2(c.x, c.y, c.yaw + math.tau), box.length, box.width)
            assert points_in_box(box, grid) == points_in_box(turned, grid)

    def test_invalid_box(self):
        with pytest.raises(ValueError):
            Box2(identity(), 0.0, 1.0)
