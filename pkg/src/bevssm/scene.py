"""Synthetic BEV scene generator.

Objects move with constant velocity (plus optional jitter) in the world
frame while the ego vehicle drives its own arc; every frame, each visible
object stamps an anisotropic Gaussian blob onto the ego-frame feature grid.
The blob is oriented by the object's yaw, scaled by its footprint, and
colored by a class-specific channel signature, with white noise on top.

Occluded objects stamp nothing that frame but stay in the ground truth, so
recalling them requires temporal context.  Velocity never appears in a
single frame's features either; it is only observable as displacement
between frames, which is the point of the benchmark.

Classes are fixed: 0 is pedestrian-like (0.5 x 0.5 m footprint, slow) and
1 is bus-like (9 m long, 3 m wide, fast).  Ground truth is expressed in the
ego frame of its own timestamp: positions and yaw relative to the ego, and
velocity as the world velocity rotated into ego axes.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .bevseq import BevGrid, EgoPose, wrap_angle
from .errors import ConfigError
from .head import Box, DetectionSet

# class id -> (nominal length, nominal width) in meters
CLASS_SIZES = {0: (0.5, 0.5), 1: (9.0, 3.0)}
NUM_CLASSES = len(CLASS_SIZES)

# peak feature magnitude of a painted blob, well above the noise floor so
# sparse attention samples that do land on an object see a strong signal
BLOB_GAIN = 2.5


@dataclass(frozen=True)
class SceneConfig:
    """World, grid and dynamics settings for one dataset."""

    range_m: float = 51.2        # world half-range; grid covers [-range, range)^2
    grid: int = 50               # cells per side
    resolution: float = 2.048    # meters per cell
    frames: int = 4              # frames per sequence
    history: int = 3             # fused history depth the models are meant to use
    channels: int = 16
    count_small: int = 2         # pedestrian-like objects per sequence
    count_large: int = 2         # bus-like objects per sequence
    small_speed: tuple = (0.0, 1.5)
    large_speed: tuple = (0.5, 8.0)
    spawn_range: float = 38.0    # objects start inside [-spawn, spawn]^2
    occlusion: float = 0.0       # per object-frame dropout probability
    ego_speed: float = 4.0       # upper bound, m/s
    ego_yaw_rate: float = 0.15   # upper bound, rad/s
    noise: float = 0.05          # white-noise level on features
    jitter: float = 0.0          # per-frame velocity perturbation, m/s std
    frame_hz: float = 2.0
    signature_seed: int = 1234   # class signatures are dataset-level, not per scene
    seed: int = 0

    def __post_init__(self):
        if self.grid < 2:
            raise ConfigError(f"grid must be at least 2, got {self.grid}")
        if abs(self.grid * self.resolution - 2.0 * self.range_m) > 1e-6:
            raise ConfigError(
                f"grid * resolution must equal 2 * range: "
                f"{self.grid} * {self.resolution} != 2 * {self.range_m}")
        if not 0.0 <= self.occlusion < 1.0:
            raise ConfigError(
                f"occlusion probability must be in [0, 1), got {self.occlusion}")
        if self.spawn_range <= 0 or self.spawn_range > self.range_m:
            raise ConfigError(
                f"spawn range {self.spawn_range} would place objects outside "
                f"the {self.range_m} m world range")
        if self.frames < 1:
            raise ConfigError(f"frames must be positive, got {self.frames}")
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.frame_hz <= 0:
            raise ConfigError(f"frame rate must be positive, got {self.frame_hz}")
        if self.count_small < 0 or self.count_large < 0:
            raise ConfigError("object counts must be non-negative")
        for lo, hi in (self.small_speed, self.large_speed):
            if not 0 <= lo <= hi:
                raise ConfigError(f"bad speed range ({lo}, {hi})")
        if self.noise < 0 or self.jitter < 0:
            raise ConfigError("noise and jitter must be non-negative")

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_hz

    @property
    def extent(self) -> float:
        return self.range_m


def class_signatures(channels: int, seed: int) -> np.ndarray:
    """Unit-norm channel patterns, one per class, fixed per dataset seed."""
    rng = np.random.default_rng(seed)
    sig = rng.normal(size=(NUM_CLASSES, channels))
    return sig / np.linalg.norm(sig, axis=1, keepdims=True)


@dataclass
class FrameSample:
    """Everything one frame contributes: features, labels, ego pose."""

    features: BevGrid
    gt: DetectionSet
    pose: EgoPose


@dataclass
class Sequence:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


@lru_cache(maxsize=8)
def _cell_centers(grid: int, resolution: float):
    """Metric (x, y) coordinates of every cell center, each (grid, grid)."""
    extent = 0.5 * grid * resolution
    coords = (np.arange(grid) + 0.5) * resolution - extent
    y = np.repeat(coords, grid).reshape(grid, grid)       # rows vary y
    x = np.tile(coords, grid).reshape(grid, grid)         # cols vary x
    return x, y


def _paint(feat, cfg: SceneConfig, cx, cy, yaw, length, width, signature):
    """Add one oriented Gaussian blob, colored by the class signature."""
    x, y = _cell_centers(cfg.grid, cfg.resolution)
    dx, dy = x - cx, y - cy
    c, s = np.cos(yaw), np.sin(yaw)
    u = c * dx + s * dy          # along the length axis
    v = -s * dx + c * dy         # along the width axis
    floor = 1.2 * cfg.resolution
    sl = max(length / 3.0, floor)
    sw = max(width / 3.0, floor)
    g = np.exp(-0.5 * ((u / sl) ** 2 + (v / sw) ** 2))
    feat += (BLOB_GAIN * g)[:, :, None] * signature[None, None, :]


def gen_scene(cfg: SceneConfig, seed=None) -> Sequence:
    """Generate one sequence of (features, ground truth, ego pose) frames."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    signatures = class_signatures(cfg.channels, cfg.signature_seed)
    dt = cfg.dt

    classes = [0] * cfg.count_small + [1] * cfg.count_large
    nobj = len(classes)
    speeds = np.empty(nobj)
    lengths = np.empty(nobj)
    widths = np.empty(nobj)
    for i, cls in enumerate(classes):
        lo, hi = cfg.small_speed if cls == 0 else cfg.large_speed
        speeds[i] = rng.uniform(lo, hi)
        nom_l, nom_w = CLASS_SIZES[cls]
        lengths[i] = nom_l * rng.uniform(0.9, 1.1)
        widths[i] = nom_w * rng.uniform(0.9, 1.1)
    pos = rng.uniform(-cfg.spawn_range, cfg.spawn_range, size=(nobj, 2))
    heading = rng.uniform(-np.pi, np.pi, size=nobj)
    vel = speeds[:, None] * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    # moving objects face their direction of travel
    yaw_w = np.where(speeds > 0.1, heading, rng.uniform(-np.pi, np.pi, nobj))

    ego_speed = rng.uniform(0.0, cfg.ego_speed)
    ego_rate = rng.uniform(-cfg.ego_yaw_rate, cfg.ego_yaw_rate)
    ego_yaw0 = rng.uniform(-np.pi, np.pi)

    jitter = (rng.normal(0.0, cfg.jitter, size=(cfg.frames, nobj, 2))
              if cfg.jitter > 0 else np.zeros((cfg.frames, nobj, 2)))
    occluded = rng.random((cfg.frames, nobj)) < cfg.occlusion

    seq = Sequence()
    ego_xy = np.zeros(2)
    ego_yaw = ego_yaw0
    for k in range(cfg.frames):
        pose = EgoPose(float(ego_xy[0]), float(ego_xy[1]), float(wrap_angle(ego_yaw)))
        frame_vel = vel + jitter[k]

        c, s = np.cos(-pose.yaw), np.sin(-pose.yaw)
        feat = np.zeros((cfg.grid, cfg.grid, cfg.channels))
        gt_boxes = []
        for i in range(nobj):
            dx, dy = pos[i, 0] - pose.x, pos[i, 1] - pose.y
            ex, ey = c * dx - s * dy, s * dx + c * dy
            if not (abs(ex) < cfg.extent and abs(ey) < cfg.extent):
                continue          # drifted out of the grid, drop this frame
            eyaw = float(wrap_angle(yaw_w[i] - pose.yaw))
            evx = c * frame_vel[i, 0] - s * frame_vel[i, 1]
            evy = s * frame_vel[i, 0] + c * frame_vel[i, 1]
            gt_boxes.append(Box(float(ex), float(ey), float(lengths[i]),
                                float(widths[i]), eyaw, float(evx), float(evy),
                                classes[i]))
            if not occluded[k, i]:
                _paint(feat, cfg, ex, ey, eyaw, lengths[i], widths[i],
                       signatures[classes[i]])
        if cfg.noise > 0:
            feat += rng.normal(0.0, cfg.noise, size=feat.shape)

        seq.samples.append(FrameSample(
            features=BevGrid(feat.astype(np.float32), cfg.resolution),
            gt=DetectionSet(k, gt_boxes),
            pose=pose))

        pos = pos + dt * frame_vel
        ego_xy = ego_xy + dt * ego_speed * np.array([np.cos(ego_yaw),
                                                     np.sin(ego_yaw)])
        ego_yaw = ego_yaw + dt * ego_rate
    return seq


def gen_dataset(cfg: SceneConfig, count: int, seed=None, workers: int = 1):
    """Generate ``count`` independent sequences.

    Each sequence gets its own child seed, so the result is identical
    whatever the worker count or completion order.
    """
    if count < 0:
        raise ConfigError(f"sequence count must be non-negative, got {count}")
    root = np.random.SeedSequence(cfg.seed if seed is None else seed)
    seeds = [int(s.generate_state(1)[0]) for s in root.spawn(count)]
    if workers <= 1:
        return [gen_scene(cfg, s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: gen_scene(cfg, s), seeds))
