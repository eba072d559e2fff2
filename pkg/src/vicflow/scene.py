"""Deterministic synthetic traffic observed by a fixed roadside LiDAR and an ego LiDAR.

The world is 2.5D: every object is a yawed box resting on a flat ground plane
and moves at constant velocity along its lane. Both sensors sit at z=0 and
sample the same world state on a shared frame grid. A sensor returns points on
the box faces it can see, with a density that falls off with squared
distance, plus ground clutter inside its range. There is no ray-traced
occlusion; the roadside/ego asymmetry comes from the sensors' different ranges
and placements.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose

INFRA = "infra"
VEHICLE = "vehicle"
WORLD = "world"
_SENSOR_CODE = {INFRA: 1, VEHICLE: 2}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PointCloud:
    frame_id: str
    timestamp: float
    points: np.ndarray  # [N, 4] float32: x, y, z, intensity

    def __len__(self) -> int:
        return len(self.points)

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.points, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, frame_id: str, timestamp: float, buf: bytes) -> "PointCloud":
        if len(buf) % 16:
            raise ValueError(f"point buffer length {len(buf)} is not a multiple of 16")
        pts = np.frombuffer(buf, dtype="<f4").reshape(-1, 4).astype(np.float32)
        return cls(frame_id, timestamp, pts)


@dataclass(frozen=True)
class GroundTruthBox:
    object_id: int
    cx: float
    cy: float
    cz: float
    w: float
    l: float
    h: float
    yaw: float
    velocity: tuple = (0.0, 0.0)

    def __post_init__(self):
        if min(self.w, self.l, self.h) <= 0:
            raise ValueError("box dimensions must be positive")

    def in_frame(self, frame_to_world: Pose) -> "GroundTruthBox":
        """Express this world-frame box in the frame described by ``frame_to_world``."""
        inv = frame_to_world.inverse()
        c = inv.apply(np.array([self.cx, self.cy, self.cz]))
        v = inv.rotation[:2, :2] @ np.asarray(self.velocity)
        yaw = _wrap(self.yaw - frame_to_world.yaw)
        return replace(self, cx=float(c[0]), cy=float(c[1]), cz=float(c[2]), yaw=yaw,
                       velocity=(float(v[0]), float(v[1])))

    def corners_bev(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.array([1, 1, -1, -1]) * self.l / 2
        dy = np.array([1, -1, -1, 1]) * self.w / 2
        return np.stack([self.cx + c * dx - s * dy, self.cy + s * dx + c * dy], axis=1)

    def contains(self, pts: np.ndarray, tol: float = 1e-3) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = pts[:, 0] - self.cx, pts[:, 1] - self.cy
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        dz = pts[:, 2] - self.cz
        return (np.abs(lx) <= self.l / 2 + tol) & (np.abs(ly) <= self.w / 2 + tol) & (np.abs(dz) <= self.h / 2 + tol)


def _wrap(a: float) -> float:
    return float((a + math.pi) % (2 * math.pi) - math.pi)


@dataclass
class WorldConfig:
    seed: int = 0
    frame_interval: float = 0.1
    duration: float = 2.0
    n_objects: int = 28
    object_speed_range: tuple = (2.0, 8.0)
    # fraction of lanes queued at a signal (speed 0)
    stopped_lane_prob: float = 0.5
    # roadside sensor pose in the world: x, y, yaw
    infra_pose: tuple = (42.0, 0.0, math.pi)
    vehicle_waypoints: tuple = ((0.0, 0.0), (120.0, 0.0))
    vehicle_speed: float = 5.0
    sensor_range_infra: float = 45.0
    sensor_range_vehicle: float = 16.0
    points_per_object: int = 160
    ground_noise_points: int = 1200
    density_ref_range: float = 15.0
    lane_offsets: tuple = (-14.0, -10.5, -7.0, -3.5, 3.5, 7.0, 10.5, 14.0)
    min_gap: float = 8.0
    world_x_range: tuple = (-40.0, 100.0)
    world_y_range: tuple = (-20.0, 20.0)
    ground_z: float = -2.56

    @property
    def n_frames(self) -> int:
        return int(round(self.duration / self.frame_interval)) + 1

    def validate(self) -> None:
        if self.frame_interval <= 0 or self.duration <= 0:
            raise ConfigError("frame_interval and duration must be positive")
        if self.sensor_range_infra <= 0 or self.sensor_range_vehicle <= 0:
            raise ConfigError("sensor ranges must be positive")
        lo, hi = self.object_speed_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad object_speed_range {self.object_speed_range}")
        if not 0.0 <= self.stopped_lane_prob <= 1.0:
            raise ConfigError(f"stopped_lane_prob {self.stopped_lane_prob} outside [0, 1]")
        if self.n_objects < 0 or self.points_per_object < 0 or self.ground_noise_points < 0:
            raise ConfigError("counts must be non-negative")
        if self.n_objects == 0 and self.ground_noise_points == 0:
            raise ConfigError("degenerate world: no objects and no ground points")
        if self.n_objects and not self.lane_offsets:
            raise ConfigError("objects need at least one lane")
        x0, x1 = self.world_x_range
        y0, y1 = self.world_y_range
        for t in (0.0, self.duration):
            x, y, _ = vehicle_state(self, t)
            if not (x0 <= x <= x1 and y0 <= y <= y1):
                raise ConfigError(f"vehicle path leaves world bounds at t={t}")


@dataclass(frozen=True)
class ObjectTrack:
    object_id: int
    x0: float
    y0: float
    vx: float
    vy: float
    w: float
    l: float
    h: float
    yaw: float
    intensity: float

    def box(self, t: float, ground_z: float) -> GroundTruthBox:
        return GroundTruthBox(self.object_id, self.x0 + self.vx * t, self.y0 + self.vy * t,
                              ground_z + self.h / 2, self.w, self.l, self.h, self.yaw, (self.vx, self.vy))


@dataclass(frozen=True)
class FrameData:
    index: int
    timestamp: float
    infra_cloud: PointCloud
    vehicle_cloud: PointCloud
    infra_pose: Pose
    vehicle_pose: Pose
    boxes: tuple  # GroundTruthBox in world frame


@dataclass
class Scenario:
    config: WorldConfig
    tracks: list
    frames: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    def time(self, index: int) -> float:
        return self.frames[index].timestamp

    def boxes_in_vehicle_frame(self, index: int) -> list:
        f = self.frames[index]
        return [b.in_frame(f.vehicle_pose) for b in f.boxes]

    def boxes_in_infra_frame(self, index: int) -> list:
        f = self.frames[index]
        return [b.in_frame(f.infra_pose) for b in f.boxes]


def vehicle_state(cfg: WorldConfig, t: float) -> tuple:
    """Position and heading along the piecewise-linear path at time ``t``.

    The vehicle stops at the last waypoint.
    """
    pts = np.asarray(cfg.vehicle_waypoints, dtype=np.float64)
    if len(pts) < 2:
        raise ConfigError("vehicle path needs at least two waypoints")
    dist = cfg.vehicle_speed * t
    n_seg = len(pts) - 1
    for i in range(n_seg):
        a, b = pts[i], pts[i + 1]
        seg = float(np.linalg.norm(b - a))
        if dist <= seg or i == n_seg - 1:
            frac = min(dist / seg, 1.0) if seg > 0 else 0.0
            p = a + frac * (b - a)
            return float(p[0]), float(p[1]), math.atan2(b[1] - a[1], b[0] - a[0])
        dist -= seg
    raise AssertionError("unreachable")


def _spawn_tracks(cfg: WorldConfig) -> list:
    rng = np.random.default_rng([cfg.seed, 0x0B])
    lanes = list(cfg.lane_offsets)
    n_lanes = len(lanes)
    lane_dir = rng.choice([-1.0, 1.0], size=n_lanes)
    lane_speed = rng.uniform(*cfg.object_speed_range, size=n_lanes)
    lane_speed[rng.random(n_lanes) < cfg.stopped_lane_prob] = 0.0
    counts = rng.multinomial(cfg.n_objects, np.full(n_lanes, 1.0 / n_lanes)) if cfg.n_objects else np.zeros(n_lanes, int)
    x_lo, x_hi = cfg.world_x_range
    tracks = []
    oid = 0
    for li in range(n_lanes):
        xs: list[float] = []
        for _ in range(int(counts[li])):
            for _attempt in range(200):
                x = float(rng.uniform(x_lo, x_hi))
                if all(abs(x - o) >= cfg.min_gap for o in xs):
                    xs.append(x)
                    break
        for x in sorted(xs):
            w = float(rng.uniform(1.5, 1.9))
            l = float(rng.uniform(3.6, 4.6))
            h = float(rng.uniform(1.4, 1.7))
            inten = float(rng.uniform(0.3, 0.9))
            d = lane_dir[li]
            tracks.append(ObjectTrack(oid, x, lanes[li], d * lane_speed[li], 0.0, w, l, h,
                                      0.0 if d > 0 else math.pi, inten))
            oid += 1
    return tracks


def _faces(box: GroundTruthBox):
    """(center, normal, u-axis, v-axis, half-extents) for 4 sides + top, world frame."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    fwd = np.array([c, s, 0.0])
    left = np.array([-s, c, 0.0])
    up = np.array([0.0, 0.0, 1.0])
    ctr = np.array([box.cx, box.cy, box.cz])
    hl, hw, hh = box.l / 2, box.w / 2, box.h / 2
    return [
        (ctr + fwd * hl, fwd, left, up, (hw, hh)),
        (ctr - fwd * hl, -fwd, left, up, (hw, hh)),
        (ctr + left * hw, left, fwd, up, (hl, hh)),
        (ctr - left * hw, -left, fwd, up, (hl, hh)),
        (ctr + up * hh, up, fwd, left, (hl, hw)),
    ]


def _surface_pattern(track: ObjectTrack, cfg: WorldConfig, sensor: str) -> list:
    """Per-face sample points fixed in the object's own frame.

    A real scanner returns the same points off a rigid body that has not
    moved, so the pattern is drawn once per object and sensor and travels
    with the box. Each point carries a keep threshold for range dropout.
    """
    rng = np.random.default_rng([cfg.seed, 0x0C, track.object_id, _SENSOR_CODE[sensor]])
    halves = [(track.w / 2, track.h / 2)] * 2 + [(track.l / 2, track.h / 2)] * 2 + [(track.l / 2, track.w / 2)]
    areas = np.array([4 * hu * hv for hu, hv in halves])
    out = []
    for (hu, hv), area in zip(halves, areas):
        n = int(round(cfg.points_per_object * area / areas.sum()))
        out.append((rng.uniform(-hu, hu, n), rng.uniform(-hv, hv, n), rng.random(n),
                    np.clip(track.intensity + rng.normal(0, 0.02, n), 0.0, 1.0)))
    return out


def _sample_object(box: GroundTruthBox, sensor_xyz: np.ndarray, max_range: float, cfg: WorldConfig,
                   pattern: list) -> np.ndarray:
    d = float(np.hypot(box.cx - sensor_xyz[0], box.cy - sensor_xyz[1]))
    if d > max_range + box.l:
        return np.zeros((0, 4))
    atten = min(1.0, (cfg.density_ref_range / max(d, 1e-3)) ** 2)
    chunks = []
    for (fc, normal, u, v, _), (a, b, keep, inten) in zip(_faces(box), pattern):
        if normal @ (sensor_xyz - fc) <= 0:
            continue
        m = keep < atten
        pts = fc + a[m, None] * u + b[m, None] * v
        chunks.append(np.column_stack([pts, inten[m]]))
    pts = np.concatenate(chunks) if chunks else np.zeros((0, 4))
    pts = pts[np.hypot(pts[:, 0] - sensor_xyz[0], pts[:, 1] - sensor_xyz[1]) <= max_range]
    if len(pts) == 0 and d <= max_range:
        pts = np.array([[box.cx, box.cy, box.cz + box.h / 2, float(np.mean(pattern[-1][3]) if len(pattern[-1][3]) else 0.5)]])
    return pts


def _ground_clutter(sensor: str, centers: np.ndarray, max_range: float, cfg: WorldConfig) -> np.ndarray:
    """World-fixed ground returns around every position the sensor visits.

    Density is chosen so that one sensor disc holds ``ground_noise_points``
    points on average.
    """
    rng = np.random.default_rng([cfg.seed, 0x6D, _SENSOR_CODE[sensor]])
    lo = centers.min(axis=0) - max_range
    hi = centers.max(axis=0) + max_range
    area = float(np.prod(hi - lo))
    n = rng.poisson(cfg.ground_noise_points * area / (math.pi * max_range ** 2))
    xy = rng.uniform(lo, hi, (n, 2))
    z = cfg.ground_z + rng.normal(0, 0.04, n)
    return np.column_stack([xy, z, rng.uniform(0.0, 0.15, n)])


def _capture(sensor: str, pose: Pose, max_range: float, boxes: Sequence[GroundTruthBox], patterns: Sequence[list],
             clutter: Optional[np.ndarray], cfg: WorldConfig, t: float) -> PointCloud:
    sensor_xyz = pose.translation
    parts = [_sample_object(b, sensor_xyz, max_range, cfg, pat) for b, pat in zip(boxes, patterns)]
    if clutter is not None:
        near = np.hypot(clutter[:, 0] - sensor_xyz[0], clutter[:, 1] - sensor_xyz[1]) <= max_range
        parts.append(clutter[near])
    world = np.concatenate(parts) if parts else np.zeros((0, 4))
    local = pose.inverse().apply(world[:, :3]) if len(world) else np.zeros((0, 3))
    pts = np.column_stack([local, world[:, 3]]).astype(np.float32) if len(world) else np.zeros((0, 4), np.float32)
    return PointCloud(sensor, t, pts)


def simulate(config: WorldConfig) -> Scenario:
    """Render every frame of the world described by ``config``."""
    config.validate()
    tracks = _spawn_tracks(config)
    ix, iy, iyaw = config.infra_pose
    infra_pose = Pose.from_planar(ix, iy, iyaw)
    scen = Scenario(config, tracks)
    times = [round(k * config.frame_interval, 9) for k in range(config.n_frames)]
    path = np.array([vehicle_state(config, t)[:2] for t in times])
    patterns = {s: [_surface_pattern(tr, config, s) for tr in tracks] for s in (INFRA, VEHICLE)}
    clutter = {s: None for s in (INFRA, VEHICLE)}
    if config.ground_noise_points:
        clutter[INFRA] = _ground_clutter(INFRA, np.array([[ix, iy]]), config.sensor_range_infra, config)
        clutter[VEHICLE] = _ground_clutter(VEHICLE, path, config.sensor_range_vehicle, config)
    for k, t in enumerate(times):
        vx, vy, vyaw = vehicle_state(config, t)
        vehicle_pose = Pose.from_planar(vx, vy, vyaw)
        boxes = tuple(tr.box(t, config.ground_z) for tr in tracks)
        infra = _capture(INFRA, infra_pose, config.sensor_range_infra, boxes, patterns[INFRA], clutter[INFRA],
                         config, t)
        veh = _capture(VEHICLE, vehicle_pose, config.sensor_range_vehicle, boxes, patterns[VEHICLE],
                       clutter[VEHICLE], config, t)
        scen.frames.append(FrameData(k, t, infra, veh, infra_pose, vehicle_pose, boxes))
    return scen


def transform_cloud(cloud: PointCloud, pose: Pose, frame_id: Optional[str] = None) -> PointCloud:
    """Apply ``pose`` to every point; intensity is carried through."""
    if len(cloud.points) == 0:
        return PointCloud(frame_id or cloud.frame_id, cloud.timestamp, cloud.points.copy())
    xyz = pose.apply(cloud.points[:, :3].astype(np.float64))
    pts = np.column_stack([xyz, cloud.points[:, 3]]).astype(np.float32)
    return PointCloud(frame_id or cloud.frame_id, cloud.timestamp, pts)


# --------------------------------------------------------------------------
# on-disk layout: <frame>_<sensor>.bin (f32 x,y,z,i) + index.json
# --------------------------------------------------------------------------


def _pose_json(p: Pose) -> list:
    return p.matrix3x4().tolist()


def scenario_files(scen: Scenario, meta: Optional[dict] = None) -> dict:
    """Relative path -> bytes for every file of the scenario directory."""
    files: dict[str, bytes] = {}
    frames = []
    for f in scen.frames:
        for sensor, cloud in ((INFRA, f.infra_cloud), (VEHICLE, f.vehicle_cloud)):
            files[f"{f.index:04d}_{sensor}.bin"] = cloud.to_bytes()
        frames.append({
            "index": f.index,
            "timestamp": f.timestamp,
            "infra_pose": _pose_json(f.infra_pose),
            "vehicle_pose": _pose_json(f.vehicle_pose),
            "boxes": [asdict(b) for b in f.boxes],
        })
    cfg = asdict(scen.config)
    index = {"meta": meta or {}, "config": cfg, "tracks": [asdict(t) for t in scen.tracks], "frames": frames}
    files["index.json"] = json.dumps(index, indent=1, sort_keys=True).encode()
    return files


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def load_scenario(directory) -> Scenario:
    from pathlib import Path

    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    cfg = WorldConfig(**{k: _tuplify(v) for k, v in index["config"].items()})
    tracks = [ObjectTrack(**t) for t in index["tracks"]]
    scen = Scenario(cfg, tracks)
    for fr in index["frames"]:
        k, t = fr["index"], fr["timestamp"]
        infra = PointCloud.from_bytes(INFRA, t, (d / f"{k:04d}_{INFRA}.bin").read_bytes())
        veh = PointCloud.from_bytes(VEHICLE, t, (d / f"{k:04d}_{VEHICLE}.bin").read_bytes())
        boxes = tuple(GroundTruthBox(**{**b, "velocity": tuple(b["velocity"])}) for b in fr["boxes"])
        scen.frames.append(FrameData(k, t, infra, veh, Pose.from_matrix(np.vstack([fr["infra_pose"], [0, 0, 0, 1]])),
                                     Pose.from_matrix(np.vstack([fr["vehicle_pose"], [0, 0, 0, 1]])), boxes))
    return scen
