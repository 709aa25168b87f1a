"""Synthetic scenes, multi-rate sensor streams, and BEV rasterization.

A scene is an ego trajectory (piecewise constant velocity / yaw rate) plus a
set of box tracks, each moving with constant speed and yaw rate. Sensor
streams tick at fixed frequencies; :func:`nearest_frame` implements the
nearest-available-frame sampling used to simulate asynchrony. The rasterizer
stands in for the per-modality BEV encoders: it paints box footprints into an
occupancy channel and a per-track identity channel, expressed in the ego
frame at the requested timestamp, with modality-specific noise.

Everything is a pure function of (seed, config, t), so repeated calls are
bit-identical.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .geometry import BevGridSpec, Box2, Pose2, _cells_in_box, compose, identity, inverse

__all__ = [
    "SceneConfig",
    "EgoTrajectory",
    "BoxTrack",
    "SensorStream",
    "Scene",
    "BevFeatureMap",
    "generate_scene",
    "nearest_frame",
    "rasterize_bev",
    "save_scene",
    "load_scene",
    "MODALITY_NOISE",
    "CAMERA_BLUR_SIGMA",
]

SCENE_SCHEMA_VERSION = 1

# Noise amplitude of each supported modality tag (uniform, +/- amplitude).
# Camera maps additionally get a one-cell Gaussian blur so the two modalities
# are distinguishable while staying spatially aligned.
MODALITY_NOISE = {"lidar": 0.05, "camera": 0.15}
CAMERA_BLUR_SIGMA = 1.0  # cells

FEATURE_CHANNELS = 2  # occupancy, track identity


def _advance(pose: Pose2, speed: float, yaw_rate: float, dt: float) -> Pose2:
    """Integrate constant speed and yaw rate for ``dt`` seconds."""
    if abs(yaw_rate) < 1e-12:
        return Pose2(
            pose.x + speed * dt * math.cos(pose.yaw),
            pose.y + speed * dt * math.sin(pose.yaw),
            pose.yaw,
        )
    yaw1 = pose.yaw + yaw_rate * dt
    r = speed / yaw_rate
    return Pose2(
        pose.x + r * (math.sin(yaw1) - math.sin(pose.yaw)),
        pose.y - r * (math.cos(yaw1) - math.cos(pose.yaw)),
        yaw1,
    )


@dataclass(frozen=True)
class EgoTrajectory:
    """Piecewise constant-velocity ego motion.

    ``segments`` is a sequence of (duration_s, speed_mps, yaw_rate_rps)
    triples applied in order starting from ``initial``; the last segment's
    velocity extends past its end so the trajectory is defined for all t >= 0.
    """

    initial: Pose2
    segments: tuple[tuple[float, float, float], ...]

    def pose_at(self, t: float) -> Pose2:
        pose = self.initial
        remaining = float(t)
        for duration, speed, yaw_rate in self.segments[:-1]:
            if remaining <= duration:
                return _advance(pose, speed, yaw_rate, remaining)
            pose = _advance(pose, speed, yaw_rate, duration)
            remaining -= duration
        _, speed, yaw_rate = self.segments[-1]
        return _advance(pose, speed, yaw_rate, remaining)


@dataclass(frozen=True)
class BoxTrack:
    """A tracked object: fixed footprint, constant speed and yaw rate."""

    track_id: int
    length: float
    width: float
    pose0: Pose2
    speed: float
    yaw_rate: float

    def pose_at(self, t: float) -> Pose2:
        return _advance(self.pose0, self.speed, self.yaw_rate, t)

    def box_at(self, t: float) -> Box2:
        return Box2(self.pose_at(t), self.length, self.width)


@dataclass(frozen=True)
class SensorStream:
    """A sensor ticking at ``frequency`` Hz; frames occur at phase + k/frequency."""

    name: str
    frequency: float
    phase: float = 0.0
    modality: str = "lidar"

    def __post_init__(self):
        if self.frequency <= 0:
            raise ValueError(f"stream frequency must be positive, got {self.frequency}")


@dataclass(frozen=True)
class SceneConfig:
    # separation deliberately exceeds the longest box plus one second of
    # closing motion, so footprints stay resolvable as separate components
    n_objects: int = 6
    dynamic_fraction: float = 0.5
    speed_min_mps: float = 0.8
    speed_max_mps: float = 2.0
    yaw_rate_max_rps: float = 0.25
    length_min_m: float = 3.5
    length_max_m: float = 4.5
    width_min_m: float = 1.8
    width_max_m: float = 2.2
    ego_speed_min_mps: float = 2.0
    ego_speed_max_mps: float = 4.0
    ego_yaw_rate_max_rps: float = 0.08
    n_ego_segments: int = 4
    placement_extent_m: float = 11.0
    min_separation_m: float = 7.0
    duration_s: float = 20.0

    def __post_init__(self):
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        if not 0.0 <= self.dynamic_fraction <= 1.0:
            raise ValueError("dynamic_fraction must be in [0, 1]")
        for lo, hi, name in [
            (self.speed_min_mps, self.speed_max_mps, "speed"),
            (self.length_min_m, self.length_max_m, "length"),
            (self.width_min_m, self.width_max_m, "width"),
            (self.ego_speed_min_mps, self.ego_speed_max_mps, "ego_speed"),
        ]:
            if lo < 0 or hi < lo:
                raise ValueError(f"invalid {name} range [{lo}, {hi}]")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")


@dataclass(frozen=True)
class Scene:
    seed: int
    config: SceneConfig
    ego: EgoTrajectory
    tracks: tuple[BoxTrack, ...]

    @property
    def duration(self) -> float:
        return self.config.duration_s


@dataclass
class BevFeatureMap:
    """Per-cell feature vectors rasterized from one sensor frame."""

    grid: BevGridSpec
    channels: int
    data: np.ndarray  # (height, width, channels)
    timestamp: float
    ego_pose: Pose2

    def __post_init__(self):
        expected = (self.grid.height, self.grid.width, self.channels)
        if self.data.shape != expected:
            raise ValueError(f"feature data shape {self.data.shape} != {expected}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")


def generate_scene(seed: int, config: SceneConfig) -> Scene:
    """Deterministically generate a scene from a seed.

    Exactly round(dynamic_fraction * n_objects) tracks are dynamic; the rest
    have speed 0. Objects are placed inside the square placement extent at
    t = 0 with a minimum pairwise separation (best effort, rejection
    sampled). The ego starts at the origin heading +x.
    """
    rng = np.random.default_rng(seed)
    segments = []
    seg_duration = config.duration_s / max(1, config.n_ego_segments)
    for _ in range(max(1, config.n_ego_segments)):
        speed = rng.uniform(config.ego_speed_min_mps, config.ego_speed_max_mps)
        yaw_rate = rng.uniform(-config.ego_yaw_rate_max_rps, config.ego_yaw_rate_max_rps)
        segments.append((seg_duration, float(speed), float(yaw_rate)))
    ego = EgoTrajectory(identity(), tuple(segments))

    n_dynamic = int(round(config.dynamic_fraction * config.n_objects))
    dynamic = np.zeros(config.n_objects, dtype=bool)
    dynamic[rng.permutation(config.n_objects)[:n_dynamic]] = True

    tracks = []
    placed: list[np.ndarray] = []
    ext = config.placement_extent_m
    for i in range(config.n_objects):
        for _ in range(64):
            xy = rng.uniform(-ext, ext, 2)
            if all(np.hypot(*(xy - q)) >= config.min_separation_m for q in placed):
                break
        placed.append(xy)
        yaw = rng.uniform(-math.pi, math.pi)
        length = rng.uniform(config.length_min_m, config.length_max_m)
        width = rng.uniform(config.width_min_m, config.width_max_m)
        if dynamic[i]:
            speed = rng.uniform(config.speed_min_mps, config.speed_max_mps)
            yaw_rate = rng.uniform(-config.yaw_rate_max_rps, config.yaw_rate_max_rps)
        else:
            speed = 0.0
            yaw_rate = 0.0
        tracks.append(
            BoxTrack(
                track_id=i,
                length=float(length),
                width=float(width),
                pose0=Pose2(float(xy[0]), float(xy[1]), float(yaw)),
                speed=float(speed),
                yaw_rate=float(yaw_rate),
            )
        )
    return Scene(seed=seed, config=config, ego=ego, tracks=tuple(tracks))


def nearest_frame(stream: SensorStream, reference_t: float, offset: float) -> float:
    """Timestamp of the stream frame closest to ``reference_t - offset``.

    Ties are broken toward the earlier frame. The returned value is always an
    exact frame time, i.e. phase + k/frequency for some integer k.
    """
    if offset < 0:
        raise ValueError(f"offset must be >= 0, got {offset}")
    target = reference_t - offset
    k = math.floor((target - stream.phase) * stream.frequency)
    t_lo = stream.phase + k / stream.frequency
    t_hi = stream.phase + (k + 1) / stream.frequency
    if abs(t_hi - target) < abs(t_lo - target):
        return t_hi
    return t_lo


def track_signature(track_id: int) -> float:
    """Stable per-track identity value in (0.2, 0.8), golden-ratio spaced."""
    return 0.2 + 0.6 * ((track_id * 0.6180339887498949) % 1.0)


def rasterize_bev(
    scene: Scene,
    t: float,
    grid: BevGridSpec,
    modality: str,
    noise_seed: int | None = None,
) -> BevFeatureMap:
    """Rasterize the scene at time ``t`` into the ego frame at ``t``.

    Channel 0 is occupancy (1 inside a footprint), channel 1 a per-track
    identity signature. Camera maps are blurred by one cell before noise is
    added; noise depends only on (noise_seed, modality), so two timestamps
    with the same seed see the same noise realization. ``noise_seed=None``
    disables noise.
    """
    if not 0.0 <= t <= scene.duration:
        raise ValueError(f"t={t} outside scene duration [0, {scene.duration}]")
    if modality not in MODALITY_NOISE:
        raise ValueError(f"unknown modality {modality!r}; expected one of {sorted(MODALITY_NOISE)}")

    ego = scene.ego.pose_at(t)
    inv_ego = inverse(ego)
    data = np.zeros((grid.height, grid.width, FEATURE_CHANNELS))
    for track in scene.tracks:
        in_ego = compose(inv_ego, track.pose_at(t))
        rows, cols, _ = _cells_in_box(Box2(in_ego, track.length, track.width), grid)
        data[rows, cols, 0] = 1.0
        data[rows, cols, 1] = track_signature(track.track_id)

    if modality == "camera":
        for ch in range(FEATURE_CHANNELS):
            data[:, :, ch] = ndimage.gaussian_filter(
                data[:, :, ch], CAMERA_BLUR_SIGMA, mode="constant", truncate=2.0
            )
    if noise_seed is not None:
        amp = MODALITY_NOISE[modality]
        rng = np.random.default_rng([noise_seed, zlib.crc32(modality.encode())])
        data = data + rng.uniform(-amp, amp, size=data.shape)
    return BevFeatureMap(grid=grid, channels=FEATURE_CHANNELS, data=data, timestamp=t, ego_pose=ego)


def save_scene(scene: Scene, path) -> None:
    doc = {
        "schema_version": SCENE_SCHEMA_VERSION,
        "seed": scene.seed,
        "config": asdict(scene.config),
        "ego": {
            "x_m": scene.ego.initial.x,
            "y_m": scene.ego.initial.y,
            "yaw_rad": scene.ego.initial.yaw,
            "segments": [
                {"duration_s": d, "speed_mps": s, "yaw_rate_rps": w}
                for d, s, w in scene.ego.segments
            ],
        },
        "tracks": [
            {
                "id": tr.track_id,
                "length_m": tr.length,
                "width_m": tr.width,
                "x_m": tr.pose0.x,
                "y_m": tr.pose0.y,
                "yaw_rad": tr.pose0.yaw,
                "speed_mps": tr.speed,
                "yaw_rate_rps": tr.yaw_rate,
            }
            for tr in scene.tracks
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_scene(path) -> Scene:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCENE_SCHEMA_VERSION:
        raise ValueError(f"unsupported scene schema_version {doc.get('schema_version')}")
    ego = EgoTrajectory(
        Pose2(doc["ego"]["x_m"], doc["ego"]["y_m"], doc["ego"]["yaw_rad"]),
        tuple(
            (seg["duration_s"], seg["speed_mps"], seg["yaw_rate_rps"])
            for seg in doc["ego"]["segments"]
        ),
    )
    tracks = tuple(
        BoxTrack(
            track_id=tr["id"],
            length=tr["length_m"],
            width=tr["width_m"],
            pose0=Pose2(tr["x_m"], tr["y_m"], tr["yaw_rad"]),
            speed=tr["speed_mps"],
            yaw_rate=tr["yaw_rate_rps"],
        )
        for tr in doc["tracks"]
    )
    return Scene(seed=doc["seed"], config=SceneConfig(**doc["config"]), ego=ego, tracks=tracks)
