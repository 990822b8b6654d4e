"""Scenes / frames / agents world model, a deterministic synthetic generator,
the ego-centric BEV rasterizer, and bit-exact on-disk formats.

Index discipline is half-open everywhere: a scene owns frames
[frame_start_index, frame_end_index), a frame owns agent records
[agent_start_index, agent_end_index). Numeric fields on disk are decimal text
with 9 significant digits; the generator canonicalizes every stored float
through that formatter, so write -> read round trips are value-exact and
re-serialization is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IndexRangeError, InsufficientFutureError, TruncationError, ValidationError
from .geometry import Obb, obb_overlap, points_in_obb, rot2d, wrap_angle

FRAME_DT = 0.1  # seconds; 250 frames = 25 s per scene
AGENT_LABELS = ("vehicle", "cyclist", "pedestrian")

EGO_EXTENT = (4.5, 2.0)          # meters, shared with the collision evaluator
ROAD_HALF_WIDTH = 5.5            # meters of drivable surface either side of the logged path
ROAD_SUBSAMPLE = 5               # logged poses per road-polyline vertex
HISTORY_INTENSITIES = (1.0, 0.8, 0.6, 0.4, 0.2)  # most recent first

RASTER_MAGIC = b"BEVR"
RASTER_VERSION = 1


def canon(x: float) -> float:
    """Canonical float value: what survives the 9-significant-digit format."""
    return float(f"{float(x):.9g}")


def fmt9(x: float) -> str:
    return f"{float(x):.9g}"


@dataclass
class Scene:
    scene_id: int
    host: str
    frame_start_index: int
    frame_end_index: int

    @property
    def n_frames(self) -> int:
        return self.frame_end_index - self.frame_start_index


@dataclass
class Frame:
    timestamp: float
    ego_pose: np.ndarray  # (3,) x, y, yaw in the world frame
    agent_start_index: int
    agent_end_index: int


@dataclass
class Agent:
    track_id: int
    centroid: np.ndarray  # (2,) world frame
    yaw: float
    extent: tuple[float, float]   # (length, width), meters
    velocity: tuple[float, float]  # (vx, vy), m/s world frame
    label: str

    def obb(self) -> Obb:
        return Obb(float(self.centroid[0]), float(self.centroid[1]), self.yaw,
                   self.extent[0], self.extent[1])


@dataclass
class Dataset:
    scenes: list[Scene] = field(default_factory=list)
    frames: list[Frame] = field(default_factory=list)
    agents: list[Agent] = field(default_factory=list)

    def scene_of_frame(self, frame_index: int) -> Scene:
        for sc in self.scenes:
            if sc.frame_start_index <= frame_index < sc.frame_end_index:
                return sc
        raise IndexRangeError(f"frame index {frame_index} belongs to no scene")

    def frame_agents(self, frame_index: int) -> list[Agent]:
        fr = self.frames[frame_index]
        return self.agents[fr.agent_start_index:fr.agent_end_index]


@dataclass
class RasterConfig:
    """Ego-centric BEV raster: S x S pixels, ego anchored at (col S/2, row 3S/4)
    facing raster +x (up, toward row 0)."""

    size: int = 64
    resolution: float = 0.5  # meters per pixel

    def validate(self) -> None:
        if self.size <= 0 or self.size % 8 != 0:
            raise ValidationError(f"raster size must be a positive multiple of 8, got {self.size}")
        if not (self.resolution > 0):
            raise ValidationError(f"raster resolution must be positive, got {self.resolution}")

    @property
    def anchor_row(self) -> int:
        return (3 * self.size) // 4

    @property
    def anchor_col(self) -> int:
        return self.size // 2


@dataclass
class WorldConfig:
    """Synthetic world knobs. Logged traffic is constructed collision-free;
    the mix guarantees trailing and oncoming agents so a policy that stalls
    or drifts gets hit in closed loop."""

    frames_per_scene: int = 250
    min_agents: int = 2
    max_agents: int = 8
    ego_speed: tuple[float, float] = (5.0, 11.0)
    arc_radius: tuple[float, float] = (80.0, 200.0)
    lane_offset: float = 3.5
    safety_margin: float = 0.4


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

class _Path:
    """Arc-length parameterized centerline with signed lateral offsets
    (positive offsets to the left of travel)."""

    def __init__(self, kind: str, anchor: np.ndarray, heading: float, radius: float = 0.0, turn: int = 0):
        self.kind = kind
        self.anchor = anchor          # start point (straight) or circle center (arc)
        self.heading = heading        # start heading
        self.radius = radius
        self.turn = turn              # +1 left / ccw, -1 right / cw
        if kind == "arc":
            # angle of the start point as seen from the center
            self.phi0 = heading - turn * np.pi / 2.0

    @classmethod
    def sample(cls, rng: np.random.Generator, cfg: WorldConfig) -> "_Path":
        start = rng.uniform(-120.0, 120.0, size=2)
        heading = rng.uniform(-np.pi, np.pi)
        if rng.random() < 0.5:
            return cls("straight", start, heading)
        radius = rng.uniform(*cfg.arc_radius)
        turn = 1 if rng.random() < 0.5 else -1
        center = start + radius * np.array([np.cos(heading + turn * np.pi / 2.0),
                                            np.sin(heading + turn * np.pi / 2.0)])
        p = cls("arc", center, heading, radius=radius, turn=turn)
        p._start = start
        return p

    def pose(self, s: float, offset: float = 0.0) -> np.ndarray:
        """World (x, y, yaw) at centerline arc length s, shifted laterally."""
        if self.kind == "straight":
            u = np.array([np.cos(self.heading), np.sin(self.heading)])
            n = np.array([-u[1], u[0]])
            p = self.anchor + s * u + offset * n
            return np.array([p[0], p[1], self.heading])
        phi = self.phi0 + self.turn * s / self.radius
        r = self.radius - self.turn * offset
        p = self.anchor + r * np.array([np.cos(phi), np.sin(phi)])
        return np.array([p[0], p[1], wrap_angle(phi + self.turn * np.pi / 2.0)])


def _agent_extent(rng: np.random.Generator, label: str) -> tuple[float, float]:
    if label == "vehicle":
        return (canon(rng.uniform(4.0, 5.2)), canon(rng.uniform(1.8, 2.2)))
    if label == "cyclist":
        return (canon(rng.uniform(1.6, 2.0)), canon(rng.uniform(0.5, 0.8)))
    return (canon(rng.uniform(0.5, 0.8)), canon(rng.uniform(0.5, 0.8)))


class _AgentPlan:
    """Closed-form motion for one synthetic agent."""

    def __init__(self, kind, path, label, extent, s0=0.0, speed=0.0, offset=0.0,
                 direction=1, cross_point=None, cross_dir=None, cross_time=0.0):
        self.kind = kind
        self.path = path
        self.label = label
        self.extent = extent
        self.s0 = s0
        self.speed = speed
        self.offset = offset
        self.direction = direction
        self.cross_point = cross_point
        self.cross_dir = cross_dir
        self.cross_time = cross_time

    def state(self, t: float) -> tuple[np.ndarray, float, tuple[float, float]]:
        """(centroid, yaw, velocity) at scene time t."""
        if self.kind == "crosser":
            p = self.cross_point + (t - self.cross_time) * self.speed * self.cross_dir
            yaw = float(np.arctan2(self.cross_dir[1], self.cross_dir[0]))
            v = self.speed * self.cross_dir
            return p, yaw, (float(v[0]), float(v[1]))
        s = self.s0 + self.direction * self.speed * t
        pose = self.path.pose(s, self.offset)
        yaw = pose[2] if self.direction > 0 else float(wrap_angle(pose[2] + np.pi))
        heading = yaw
        v = self.speed * np.array([np.cos(heading), np.sin(heading)])
        return pose[:2], float(yaw), (float(v[0]), float(v[1]))


def _sample_plan(rng, cfg, path, ego_speed, kind) -> _AgentPlan:
    if kind == "lead":
        label = "vehicle"
        return _AgentPlan("lane", path, label, _agent_extent(rng, label),
                          s0=rng.uniform(15.0, 40.0), speed=ego_speed, direction=1)
    if kind == "trail":
        label = "vehicle"
        return _AgentPlan("lane", path, label, _agent_extent(rng, label),
                          s0=-rng.uniform(18.0, 40.0), speed=ego_speed * rng.uniform(0.6, 0.8),
                          direction=1)
    if kind == "oncoming":
        label = "vehicle"
        return _AgentPlan("lane", path, label, _agent_extent(rng, label),
                          s0=rng.uniform(30.0, 160.0), speed=rng.uniform(4.0, 9.0),
                          offset=cfg.lane_offset, direction=-1)
    label = "pedestrian" if rng.random() < 0.6 else "cyclist"
    speed = rng.uniform(0.8, 1.6) if label == "pedestrian" else rng.uniform(2.0, 5.0)
    s_c = rng.uniform(30.0, 120.0)
    ego_arrival = s_c / ego_speed
    delta = rng.uniform(3.0, 8.0) * (1 if rng.random() < 0.5 else -1)
    cross_time = ego_arrival + delta
    if not (1.0 <= cross_time <= 24.0):
        cross_time = ego_arrival - delta
    cross_time = float(np.clip(cross_time, 1.0, 24.0))
    center = path.pose(s_c, 0.0)
    ang = center[2] + rng.uniform(np.pi / 3, 2 * np.pi / 3) * (1 if rng.random() < 0.5 else -1)
    cross_dir = np.array([np.cos(ang), np.sin(ang)])
    return _AgentPlan("crosser", path, label, _agent_extent(rng, label), speed=speed,
                      cross_point=center[:2], cross_dir=cross_dir, cross_time=cross_time)


def _log_safe(plan: _AgentPlan, ego_poses: np.ndarray, times: np.ndarray, margin: float) -> bool:
    """True when the logged agent never overlaps the logged ego (with margin)."""
    half_span = 0.5 * np.hypot(*EGO_EXTENT) + 0.5 * np.hypot(*plan.extent) + margin
    for t, ep in zip(times, ego_poses):
        c, yaw, _ = plan.state(t)
        if np.hypot(c[0] - ep[0], c[1] - ep[1]) > half_span:
            continue
        ego_box = Obb(ep[0], ep[1], ep[2], EGO_EXTENT[0] + 2 * margin, EGO_EXTENT[1] + 2 * margin)
        if obb_overlap(ego_box, Obb(c[0], c[1], yaw, plan.extent[0], plan.extent[1])):
            return False
    return True


def generate_synthetic_scenes(seed: int, n_scenes: int, cfg: WorldConfig | None = None) -> Dataset:
    """Deterministic synthetic dataset: per scene, an ego driving a straight or
    constant-curvature road plus 2-8 agents (leading, trailing, oncoming,
    crossing) whose logged motion never collides with the logged ego."""
    if n_scenes < 1:
        raise ValidationError(f"n_scenes must be >= 1, got {n_scenes}")
    cfg = cfg or WorldConfig()
    ds = Dataset()
    kinds = ("lead", "trail", "oncoming", "crosser")
    for si in range(n_scenes):
        rng = np.random.default_rng([int(seed), si])
        path = _Path.sample(rng, cfg)
        ego_speed = rng.uniform(*cfg.ego_speed)
        n_frames = cfg.frames_per_scene
        times = np.arange(n_frames) * FRAME_DT
        ego_poses = np.stack([path.pose(ego_speed * t, 0.0) for t in times])

        n_agents = int(rng.integers(cfg.min_agents, cfg.max_agents + 1))
        plans: list[_AgentPlan] = []
        for ai in range(n_agents):
            kind = "trail" if ai == 0 else "oncoming" if ai == 1 else kinds[int(rng.integers(0, 4))]
            plan = _sample_plan(rng, cfg, path, ego_speed, kind)
            for _ in range(8):
                if _log_safe(plan, ego_poses, times, cfg.safety_margin):
                    break
                plan = _sample_plan(rng, cfg, path, ego_speed, kind)
            else:
                continue  # could not place safely; skip this agent
            plans.append(plan)

        frame_base = len(ds.frames)
        ds.scenes.append(Scene(scene_id=si, host=f"host-{si % 4:02d}",
                               frame_start_index=frame_base,
                               frame_end_index=frame_base + n_frames))
        for fi in range(n_frames):
            t = times[fi]
            agent_base = len(ds.agents)
            for tid, plan in enumerate(plans):
                c, yaw, vel = plan.state(t)
                ds.agents.append(Agent(
                    track_id=tid,
                    centroid=np.array([canon(c[0]), canon(c[1])]),
                    yaw=canon(wrap_angle(yaw)),
                    extent=plan.extent,
                    velocity=(canon(vel[0]), canon(vel[1])),
                    label=plan.label,
                ))
            ep = ego_poses[fi]
            ds.frames.append(Frame(
                timestamp=canon((frame_base + fi) * FRAME_DT),
                ego_pose=np.array([canon(ep[0]), canon(ep[1]), canon(wrap_angle(ep[2]))]),
                agent_start_index=agent_base,
                agent_end_index=len(ds.agents),
            ))
    return ds


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

_GRID_CACHE: dict[tuple[int, float], tuple[np.ndarray, float]] = {}


def _pixel_centers(rcfg: RasterConfig) -> tuple[np.ndarray, float]:
    """Ego-frame (x, y) pixel centers (row-major) and their max norm."""
    key = (rcfg.size, rcfg.resolution)
    cached = _GRID_CACHE.get(key)
    if cached is None:
        rows = (rcfg.anchor_row - np.arange(rcfg.size)) * rcfg.resolution   # forward
        cols = (rcfg.anchor_col - np.arange(rcfg.size)) * rcfg.resolution   # left
        gx = np.repeat(rows, rcfg.size)
        gy = np.tile(cols, rcfg.size)
        grid = np.stack([gx, gy], axis=1)
        cached = (grid, float(np.hypot(gx, gy).max()))
        _GRID_CACHE[key] = cached
    return cached


def _road_mask(points: np.ndarray, verts: np.ndarray, half_width: float, view_radius: float) -> np.ndarray:
    """Pixels within half_width of the polyline. Segments that provably cannot
    come within half_width of any pixel (all pixels lie inside view_radius of
    the origin) are skipped; the skip bound is conservative, so the mask is
    exactly the unfiltered one."""
    px = points[:, 0:1]
    py = points[:, 1:2]
    if len(verts) == 1:
        d2 = ((px - verts[0, 0]) ** 2 + (py - verts[0, 1]) ** 2)[:, 0]
        return d2 <= half_width * half_width
    a = verts[:-1]
    b = verts[1:]
    seg = b - a
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    far = np.maximum(np.hypot(a[:, 0], a[:, 1]), np.hypot(b[:, 0], b[:, 1]))
    keep = (far - seg_len) <= (view_radius + half_width)
    if not keep.any():
        return np.zeros(len(points), dtype=bool)
    ax = a[keep, 0][None, :]
    ay = a[keep, 1][None, :]
    dx = seg[keep, 0][None, :]
    dy = seg[keep, 1][None, :]
    dd = dx * dx + dy * dy
    dd[dd == 0.0] = 1.0
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / dd, 0.0, 1.0)
    ex = px - (ax + t * dx)
    ey = py - (ay + t * dy)
    d2 = (ex * ex + ey * ey).min(axis=1)
    return d2 <= half_width * half_width


def _paint_obb(channel: np.ndarray, rcfg: RasterConfig, box: Obb, value: float) -> None:
    """Paint pixels whose centers fall inside the ego-frame box, testing only
    the axis-aligned pixel window that can contain it."""
    s = rcfg.size
    res = rcfg.resolution
    half_diag = 0.5 * np.hypot(box.length, box.width)
    r_lo = max(0, int(np.floor(rcfg.anchor_row - (box.cx + half_diag) / res)))
    r_hi = min(s, int(np.ceil(rcfg.anchor_row - (box.cx - half_diag) / res)) + 1)
    c_lo = max(0, int(np.floor(rcfg.anchor_col - (box.cy + half_diag) / res)))
    c_hi = min(s, int(np.ceil(rcfg.anchor_col - (box.cy - half_diag) / res)) + 1)
    if r_lo >= r_hi or c_lo >= c_hi:
        return
    xs = (rcfg.anchor_row - np.arange(r_lo, r_hi)) * res
    ys = (rcfg.anchor_col - np.arange(c_lo, c_hi)) * res
    window = np.stack([np.repeat(xs, len(ys)), np.tile(ys, len(xs))], axis=1)
    mask = points_in_obb(window, box).reshape(len(xs), len(ys))
    patch = channel[r_lo:r_hi, c_lo:c_hi]
    patch[mask] = np.maximum(patch[mask], value)


def rasterize(dataset: Dataset, frame_index: int, rcfg: RasterConfig,
              ego_pose: np.ndarray | None = None,
              ego_history: list[np.ndarray] | None = None) -> np.ndarray:
    """Render the (3, S, S) ego-centric BEV raster for one frame.

    Channel 0: drivable road (within ROAD_HALF_WIDTH of the scene's logged ego
    path). Channel 1: agent boxes at this frame. Channel 2: up to five previous
    ego poses painted with decaying intensity. ``ego_pose``/``ego_history``
    override the logged ego state for closed-loop simulation; every painted
    value is an exact constant, so rasters are invariant under global rigid
    transforms of all world poses.
    """
    if not (0 <= frame_index < len(dataset.frames)):
        raise IndexRangeError(f"frame index {frame_index} out of range [0, {len(dataset.frames)})")
    scene = dataset.scene_of_frame(frame_index)
    frame = dataset.frames[frame_index]
    pose = np.asarray(ego_pose, dtype=np.float64) if ego_pose is not None else frame.ego_pose
    pts, view_radius = _pixel_centers(rcfg)
    s = rcfg.size
    raster = np.zeros((3, s, s))

    # channel 0: road mask from the logged ego polyline (static world geometry)
    idxs = list(range(scene.frame_start_index, scene.frame_end_index, ROAD_SUBSAMPLE))
    if idxs[-1] != scene.frame_end_index - 1:
        idxs.append(scene.frame_end_index - 1)
    world_pts = np.stack([dataset.frames[i].ego_pose[:2] for i in idxs])
    rel = (world_pts - pose[:2]) @ rot2d(-pose[2]).T
    road = _road_mask(pts, rel, ROAD_HALF_WIDTH, view_radius)
    raster[0].reshape(-1)[road] = 1.0

    # channel 1: agent occupancy at this frame
    for agent in dataset.frame_agents(frame_index):
        rc = (agent.centroid - pose[:2]) @ rot2d(-pose[2]).T
        box = Obb(rc[0], rc[1], agent.yaw - pose[2], agent.extent[0], agent.extent[1])
        _paint_obb(raster[1], rcfg, box, 1.0)

    # channel 2: ego motion history, most recent brightest
    if ego_history is None:
        ego_history = []
        for k in range(1, len(HISTORY_INTENSITIES) + 1):
            j = frame_index - k
            if j < scene.frame_start_index:
                break
            ego_history.append(dataset.frames[j].ego_pose)
    for k, past in enumerate(ego_history[:len(HISTORY_INTENSITIES)]):
        past = np.asarray(past, dtype=np.float64)
        rc = (past[:2] - pose[:2]) @ rot2d(-pose[2]).T
        box = Obb(rc[0], rc[1], past[2] - pose[2], EGO_EXTENT[0], EGO_EXTENT[1])
        _paint_obb(raster[2], rcfg, box, HISTORY_INTENSITIES[k])

    return raster


def ego_targets(dataset: Dataset, frame_index: int, k: int) -> np.ndarray:
    """Ground-truth future waypoints: the next k logged ego poses expressed in
    the current ego frame, yaw differences wrapped to (-pi, pi]."""
    scene = dataset.scene_of_frame(frame_index)
    if frame_index + k >= scene.frame_end_index:
        raise InsufficientFutureError(
            f"frame {frame_index} has fewer than {k} future frames in scene {scene.scene_id}")
    base = dataset.frames[frame_index].ego_pose
    rot = rot2d(-base[2])
    out = np.empty((k, 3))
    for j in range(1, k + 1):
        fut = dataset.frames[frame_index + j].ego_pose
        rel = rot @ (fut[:2] - base[:2])
        out[j - 1] = (rel[0], rel[1], wrap_angle(fut[2] - base[2]))
    return out


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

def _scene_line(s: Scene) -> str:
    return (f'{{"scene_id": {s.scene_id}, "host": "{s.host}", '
            f'"frame_start_index": {s.frame_start_index}, "frame_end_index": {s.frame_end_index}}}')


def _frame_line(f: Frame) -> str:
    ep = f.ego_pose
    return (f'{{"timestamp": {fmt9(f.timestamp)}, '
            f'"ego_pose": [{fmt9(ep[0])}, {fmt9(ep[1])}, {fmt9(ep[2])}], '
            f'"agent_start_index": {f.agent_start_index}, "agent_end_index": {f.agent_end_index}}}')


def _agent_line(a: Agent) -> str:
    return (f'{{"track_id": {a.track_id}, '
            f'"centroid": [{fmt9(a.centroid[0])}, {fmt9(a.centroid[1])}], '
            f'"yaw": {fmt9(a.yaw)}, '
            f'"extent": [{fmt9(a.extent[0])}, {fmt9(a.extent[1])}], '
            f'"velocity": [{fmt9(a.velocity[0])}, {fmt9(a.velocity[1])}], '
            f'"label": "{a.label}"}}')


def write_dataset(dataset: Dataset, directory) -> None:
    """Write scenes.jsonl / frames.jsonl / agents.jsonl (bit-exact layout)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "scenes.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for s in dataset.scenes:
            fh.write(_scene_line(s) + "\n")
    with open(d / "frames.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for f in dataset.frames:
            fh.write(_frame_line(f) + "\n")
    with open(d / "agents.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for a in dataset.agents:
            fh.write(_agent_line(a) + "\n")


def _load_jsonl(path: Path) -> list[dict]:
    if not path.is_file():
        raise FormatError(f"missing dataset file {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path.name}:{lineno}: malformed record: {e}") from e
            if not isinstance(rec, dict):
                raise FormatError(f"{path.name}:{lineno}: record is not an object")
            records.append(rec)
    return records


def _get(rec: dict, key: str, path: str):
    try:
        return rec[key]
    except KeyError:
        raise FormatError(f"{path}: missing field {key!r}") from None


def read_dataset(directory) -> Dataset:
    """Read and validate a dataset directory written by write_dataset."""
    d = Path(directory)
    ds = Dataset()
    for rec in _load_jsonl(d / "scenes.jsonl"):
        ds.scenes.append(Scene(
            scene_id=int(_get(rec, "scene_id", "scenes.jsonl")),
            host=str(_get(rec, "host", "scenes.jsonl")),
            frame_start_index=int(_get(rec, "frame_start_index", "scenes.jsonl")),
            frame_end_index=int(_get(rec, "frame_end_index", "scenes.jsonl")),
        ))
    for rec in _load_jsonl(d / "frames.jsonl"):
        pose = _get(rec, "ego_pose", "frames.jsonl")
        if not (isinstance(pose, list) and len(pose) == 3):
            raise FormatError("frames.jsonl: ego_pose must be [x, y, yaw]")
        ds.frames.append(Frame(
            timestamp=float(_get(rec, "timestamp", "frames.jsonl")),
            ego_pose=np.array([float(v) for v in pose]),
            agent_start_index=int(_get(rec, "agent_start_index", "frames.jsonl")),
            agent_end_index=int(_get(rec, "agent_end_index", "frames.jsonl")),
        ))
    for rec in _load_jsonl(d / "agents.jsonl"):
        extent = _get(rec, "extent", "agents.jsonl")
        velocity = _get(rec, "velocity", "agents.jsonl")
        centroid = _get(rec, "centroid", "agents.jsonl")
        label = str(_get(rec, "label", "agents.jsonl"))
        if label not in AGENT_LABELS:
            raise FormatError(f"agents.jsonl: unknown label {label!r}")
        ds.agents.append(Agent(
            track_id=int(_get(rec, "track_id", "agents.jsonl")),
            centroid=np.array([float(v) for v in centroid]),
            yaw=float(_get(rec, "yaw", "agents.jsonl")),
            extent=(float(extent[0]), float(extent[1])),
            velocity=(float(velocity[0]), float(velocity[1])),
            label=label,
        ))
    _validate_dataset(ds)
    return ds


def _validate_dataset(ds: Dataset) -> None:
    n_frames, n_agents = len(ds.frames), len(ds.agents)
    prev_end = 0
    for sc in ds.scenes:
        if not (0 <= sc.frame_start_index < sc.frame_end_index <= n_frames):
            raise IndexRangeError(
                f"scene {sc.scene_id}: frame range [{sc.frame_start_index}, {sc.frame_end_index}) "
                f"invalid for {n_frames} frames")
        if sc.frame_start_index != prev_end:
            raise IndexRangeError(f"scene {sc.scene_id}: frame ranges must tile the frame array")
        prev_end = sc.frame_end_index
        ts = [ds.frames[i].timestamp for i in range(sc.frame_start_index, sc.frame_end_index)]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise FormatError(f"scene {sc.scene_id}: timestamps must strictly increase")
    if prev_end != n_frames:
        raise IndexRangeError("frames beyond the last scene")
    prev_end = 0
    for i, fr in enumerate(ds.frames):
        if not (0 <= fr.agent_start_index <= fr.agent_end_index <= n_agents):
            raise IndexRangeError(f"frame {i}: agent range invalid for {n_agents} agents")
        if fr.agent_start_index != prev_end:
            raise IndexRangeError(f"frame {i}: agent ranges must tile the agent array")
        prev_end = fr.agent_end_index
    if prev_end != n_agents:
        raise IndexRangeError("agents beyond the last frame")
    for i, a in enumerate(ds.agents):
        if a.extent[0] <= 0 or a.extent[1] <= 0:
            raise FormatError(f"agent record {i}: extent must be positive")


def build_raster_cache(dataset: Dataset, rcfg: RasterConfig) -> np.ndarray:
    """Rasterize every frame into a (N, 3, S, S) float32 array."""
    out = np.empty((len(dataset.frames), 3, rcfg.size, rcfg.size), dtype=np.float32)
    for i in range(len(dataset.frames)):
        out[i] = rasterize(dataset, i, rcfg).astype(np.float32)
    return out


def write_raster_cache(path, rasters: np.ndarray) -> None:
    """rasters.bin: magic BEVR, u32 version/count/channels/height/width (LE),
    then count*C*H*W little-endian float32 values."""
    arr = np.ascontiguousarray(rasters, dtype="<f4")
    if arr.ndim != 4:
        raise ValidationError(f"raster cache must be (N, C, H, W), got {arr.shape}")
    n, c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<5I", RASTER_VERSION, n, c, h, w))
        fh.write(arr.tobytes())


def read_raster_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 20:
        raise TruncationError(f"{path}: raster cache shorter than its header")
    if blob[:4] != RASTER_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {RASTER_MAGIC!r}")
    version, n, c, h, w = struct.unpack("<5I", blob[4:24])
    if version != RASTER_VERSION:
        raise FormatError(f"{path}: unsupported raster cache version {version}")
    expected = n * c * h * w * 4
    payload = blob[24:]
    if len(payload) < expected:
        raise TruncationError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w).copy()
