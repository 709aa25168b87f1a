#!/usr/bin/env python3
"""Grid and token warpers: aligning a stale feature map to the reference time.

A moving box is rasterized at t0; the map is then aligned to t1 three ways
(no alignment, EMC only, EMC plus exact dynamic flow) and the box's
occupancy centroid error against the true t1 rasterization is printed.
Token correction is shown on the same scene.
"""

import numpy as np

from bevalign import (
    BevGridSpec,
    Pose2,
    Scene,
    SceneConfig,
    TokenSet,
    build_lut,
    dense_gt_flow,
    emc_flow,
    grid_sample,
    rasterize_bev,
    roundtrip_check,
    warp_tokens,
    zero_flow,
)
from bevalign.gtflow import backward_warp_field, dense_gt_flow_backward
from bevalign.scenesim import BoxTrack, EgoTrajectory

GRID = BevGridSpec(origin_x=-23.5, origin_y=-23.5, cell=1.0, width=48, height=48)


def centroid(fmap, threshold=0.6):
    # 0.6 rather than 0.5: a half-cell resample turns a box edge into an
    # exactly-0.5 strip, which should not count as occupied
    occ = fmap.data[:, :, 0]
    mask = occ >= threshold
    centers = fmap.grid.cell_centers()
    w = occ[mask]
    return (centers[mask] * w[:, None]).sum(axis=0) / w.sum()


def main():
    track = BoxTrack(0, 4.0, 2.0, Pose2(-4.0, 2.0, 0.0), speed=2.0, yaw_rate=0.0)
    ego = EgoTrajectory(Pose2(0, 0, 0), ((20.0, 3.0, 0.0),))
    scene = Scene(0, SceneConfig(n_objects=1, dynamic_fraction=1.0), ego, (track,))
    t0, t1 = 0.5, 1.0

    f0 = rasterize_bev(scene, t0, GRID, "lidar", noise_seed=None)
    f1 = rasterize_bev(scene, t1, GRID, "lidar", noise_seed=None)
    target = centroid(f1)

    emc_b = emc_flow(scene.ego.pose_at(t0), scene.ego.pose_at(t1), GRID, "backward")
    none_at_all = f0
    emc_only = grid_sample(f0, build_lut(GRID, emc_b, zero_flow(GRID, "backward")))
    dyn_b = backward_warp_field(scene.tracks, t0, t1, scene.ego, GRID)
    full = grid_sample(f0, build_lut(GRID, emc_b, dyn_b))

    print("occupancy-centroid error of the moving box vs. the true t1 map:")
    for name, fmap in [("no alignment", none_at_all), ("EMC only", emc_only),
                       ("EMC + dynamic flow", full)]:
        err = np.hypot(*(centroid(fmap) - target))
        print(f"  {name:20s} {err:6.2f} m")
    print("(the box moves 1.0 m and the ego 1.5 m over the offset: unaligned,"
          " the two frames disagree by their 0.5 m difference; EMC pins the"
          " static world and exposes the full 1.0 m of box motion; the dynamic"
          " flow removes that too)")

    # token warper: move sparse token coordinates instead of resampling a grid
    fwd_emc = emc_flow(scene.ego.pose_at(t0), scene.ego.pose_at(t1), GRID, "forward")
    fwd_dyn = dense_gt_flow(scene.tracks, t0, t1, scene.ego, GRID)
    from bevalign import apply, compose, inverse

    box_in_t0_frame = compose(inverse(scene.ego.pose_at(t0)), track.pose_at(t0))
    tokens = TokenSet(
        np.array([[box_in_t0_frame.x, box_in_t0_frame.y], [8.0, -6.0]]), np.array([0, 1])
    )
    moved = warp_tokens(tokens, fwd_emc, fwd_dyn)
    print("\ntoken correction (coords in the t0 ego frame -> t1 ego frame):")
    for before, after, pid in zip(tokens.coords, moved.coords, tokens.payload_ids):
        print(f"  token {pid}: ({before[0]:+.2f}, {before[1]:+.2f}) -> "
              f"({after[0]:+.2f}, {after[1]:+.2f})")

    bwd = dense_gt_flow_backward(scene.tracks, t0, t1, scene.ego, GRID)
    rep = roundtrip_check(fwd_dyn, bwd, tolerance_cells=0.5)
    print(f"\nforward/backward round trip: {rep.fraction_within:.1%} of cells "
          f"return within 0.5 cells (ego motion makes the frames differ; "
          "run with a static ego for an exact pair)")


if __name__ == "__main__":
    main()
