"""Closed-loop unrolling, oriented-box collision detection, and the
front/side/rear collision report normalized per 10,000 frames and per
1,000 miles."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError, ValidationError
from .geometry import Obb, compose_pose, obb_overlap, rot2d, wrap_angle
from .scenes import Dataset, EGO_EXTENT, RasterConfig, Scene, rasterize

METERS_PER_MILE = 1609.344
CATEGORIES = ("front", "side", "rear")

REPORT_COLUMNS = ("model", "front_10k", "side_10k", "rear_10k", "total_per_1000mi", "frames", "meters")
EVENT_COLUMNS = ("scene_id", "frame", "track_id", "theta", "category")


@dataclass
class CollisionEvent:
    scene_id: int
    frame_index: int
    track_id: int
    theta: float  # contact bearing in the ego frame, (-pi, pi]
    category: str


@dataclass
class CollisionReport:
    front: int = 0
    side: int = 0
    rear: int = 0
    frames: int = 0
    meters: float = 0.0

    @property
    def total(self) -> int:
        return self.front + self.side + self.rear

    def rate_10k(self, category: str) -> float:
        count = getattr(self, category)
        return count * 10000.0 / self.frames if self.frames else 0.0

    @property
    def total_per_1000mi(self) -> float | None:
        """Total collisions per 1000 miles; None when no distance was driven."""
        if self.meters <= 0.0:
            return None
        return self.total * 1000.0 / (self.meters / METERS_PER_MILE)


def classify_collision(ego_pose, other_box: Obb, ego_extent: tuple[float, float] = EGO_EXTENT) -> tuple[str, float]:
    """Category and contact bearing for an overlapping pair. The bearing is the
    direction of the other centroid in the ego frame; |theta| <= pi/4 is front,
    |theta| >= 3pi/4 is rear, anything else is side (boundaries inclusive
    toward front/rear)."""
    ego_box = Obb(float(ego_pose[0]), float(ego_pose[1]), float(ego_pose[2]), ego_extent[0], ego_extent[1])
    if not obb_overlap(ego_box, other_box):
        raise UsageError("classify_collision: boxes do not overlap")
    rel = rot2d(-float(ego_pose[2])) @ np.array([other_box.cx - ego_box.cx, other_box.cy - ego_box.cy])
    theta = float(wrap_angle(np.arctan2(rel[1], rel[0])))
    a = abs(theta)
    if a <= np.pi / 4:
        return "front", theta
    if a >= 3 * np.pi / 4:
        return "rear", theta
    return "side", theta


def _as_predictor(model):
    if hasattr(model, "predict"):
        return model.predict
    if callable(model):
        return model
    raise UsageError("model must expose predict(raster) or be callable")


def unroll_closed_loop(model, dataset: Dataset, scene: Scene, rcfg: RasterConfig) -> np.ndarray:
    """Simulate the ego through one scene: agents replay their logs, the ego
    starts at the logged first pose and each frame executes the first predicted
    waypoint as an ego-frame step. Returns one pose per frame."""
    predict = _as_predictor(model)
    n = scene.n_frames
    poses = np.empty((n, 3))
    poses[0] = dataset.frames[scene.frame_start_index].ego_pose
    for t in range(n - 1):
        frame_index = scene.frame_start_index + t
        history = [poses[t - k] for k in range(1, min(t, 5) + 1)]
        raster = rasterize(dataset, frame_index, rcfg, ego_pose=poses[t], ego_history=history)
        pred = predict(raster)
        poses[t + 1] = compose_pose(poses[t], pred.waypoints[0])
    return poses


def _scan_scene(model, dataset: Dataset, scene: Scene, rcfg: RasterConfig):
    poses = unroll_closed_loop(model, dataset, scene, rcfg)
    events: list[CollisionEvent] = []
    overlapping: dict[int, bool] = {}
    for t in range(scene.n_frames):
        frame_index = scene.frame_start_index + t
        pose = poses[t]
        ego_box = Obb(pose[0], pose[1], pose[2], EGO_EXTENT[0], EGO_EXTENT[1])
        for agent in dataset.frame_agents(frame_index):
            hit = obb_overlap(ego_box, agent.obb())
            was = overlapping.get(agent.track_id, False)
            if hit and not was:
                category, theta = classify_collision(pose, agent.obb())
                events.append(CollisionEvent(scene.scene_id, frame_index, agent.track_id, theta, category))
            overlapping[agent.track_id] = hit
    meters = float(np.hypot(np.diff(poses[:, 0]), np.diff(poses[:, 1])).sum())
    return scene.n_frames, meters, events


def evaluate(model, dataset: Dataset, rcfg: RasterConfig) -> tuple[CollisionReport, list[CollisionEvent]]:
    """Unroll every scene closed-loop and aggregate first-contact collision
    events (a continuous overlap episode counts once; separation re-arms it).
    Scenes fan out over SSN_THREADS workers; results merge in scene_id order."""
    if not dataset.scenes:
        raise ValidationError("evaluate: dataset has no scenes")
    scenes = sorted(dataset.scenes, key=lambda s: s.scene_id)
    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda sc: _scan_scene(model, dataset, sc, rcfg), scenes))
    else:
        results = [_scan_scene(model, dataset, sc, rcfg) for sc in scenes]

    report = CollisionReport()
    all_events: list[CollisionEvent] = []
    for frames, meters, events in results:
        report.frames += frames
        report.meters += meters
        all_events.extend(events)
        for ev in events:
            setattr(report, ev.category, getattr(report, ev.category) + 1)
    return report, all_events


def _worker_count() -> int:
    raw = os.environ.get("SSN_THREADS", "")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"SSN_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# CSV emission / ingestion
# ---------------------------------------------------------------------------

def write_events_csv(path, events: list[CollisionEvent]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(EVENT_COLUMNS) + "\n")
        for ev in events:
            fh.write(f"{ev.scene_id},{ev.frame_index},{ev.track_id},{ev.theta:.9g},{ev.category}\n")


def report_row(tag: str, report: CollisionReport) -> str:
    mi = report.total_per_1000mi
    mi_text = "" if mi is None else f"{mi:.9g}"
    return (f"{tag},{report.rate_10k('front'):.9g},{report.rate_10k('side'):.9g},"
            f"{report.rate_10k('rear'):.9g},{mi_text},{report.frames},{report.meters:.9g}")


def write_report_csv(path, rows: list[tuple[str, CollisionReport]]) -> None:
    """One row per model tag, mirroring the Front/Side/Rear comparison shape."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for tag, report in rows:
            fh.write(report_row(tag, report) + "\n")


def read_report_csv(path) -> list[dict]:
    """Parse a report CSV back into row dicts with numeric rate fields."""
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"missing report file {path}")
    with open(p, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty report") from None
        if tuple(header) != REPORT_COLUMNS:
            raise FormatError(f"{path}: bad header {header}, expected {list(REPORT_COLUMNS)}")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(REPORT_COLUMNS):
                raise FormatError(f"{path}:{lineno}: expected {len(REPORT_COLUMNS)} fields, got {len(row)}")
            try:
                rows.append({
                    "model": row[0],
                    "front_10k": float(row[1]),
                    "side_10k": float(row[2]),
                    "rear_10k": float(row[3]),
                    "total_per_1000mi": float(row[4]) if row[4] else None,
                    "frames": int(row[5]),
                    "meters": float(row[6]),
                })
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return rows
