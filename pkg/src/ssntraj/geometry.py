"""Planar pose and oriented-box geometry shared by the world model and the
collision evaluator. Poses are (x, y, yaw) arrays; yaw wraps to (-pi, pi]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def wrap_angle(x):
    """Wrap an angle (scalar or array) to the interval (-pi, pi].

    Values already inside the interval pass through bit-identically, so
    composing a zero yaw delta is an exact identity.
    """
    x = np.asarray(x, dtype=np.float64)
    outside = (x > np.pi) | (x <= -np.pi)
    if not outside.any():
        return x
    wrapped = np.pi - np.mod(np.pi - x, 2.0 * np.pi)
    return np.where(outside, wrapped, x)


def rot2d(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]])


def world_to_ego(points: np.ndarray, ego_pose) -> np.ndarray:
    """Map world points (N, 2) or (2,) into the frame of ego_pose (x, y, yaw)."""
    p = np.asarray(points, dtype=np.float64)
    rel = p - np.asarray(ego_pose[:2], dtype=np.float64)
    return rel @ rot2d(-float(ego_pose[2])).T


def ego_to_world(points: np.ndarray, ego_pose) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p @ rot2d(float(ego_pose[2])).T + np.asarray(ego_pose[:2], dtype=np.float64)


def compose_pose(base_pose, delta) -> np.ndarray:
    """World pose reached by applying an ego-frame delta (dx, dy, dyaw) to base."""
    bx, by, byaw = (float(v) for v in base_pose)
    dx, dy, dyaw = (float(v) for v in delta)
    c, s = np.cos(byaw), np.sin(byaw)
    return np.array([bx + c * dx - s * dy, by + s * dx + c * dy, wrap_angle(byaw + dyaw)])


def relative_pose(base_pose, target_pose) -> np.ndarray:
    """Express target_pose in the frame of base_pose (inverse of compose_pose)."""
    rel = world_to_ego(np.asarray(target_pose[:2], dtype=np.float64), base_pose)
    return np.array([rel[0], rel[1], wrap_angle(float(target_pose[2]) - float(base_pose[2]))])


@dataclass(frozen=True)
class Obb:
    """Oriented rectangle: center, heading, full length (along heading), full width."""

    cx: float
    cy: float
    yaw: float
    length: float
    width: float

    def corners(self) -> np.ndarray:
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        return local @ rot2d(self.yaw).T + np.array([self.cx, self.cy])

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([c, s]), np.array([-s, c])


def points_in_obb(points: np.ndarray, box: Obb) -> np.ndarray:
    """Boolean mask of points (N, 2) inside (or exactly on) the rectangle."""
    d = np.asarray(points, dtype=np.float64) - np.array([box.cx, box.cy])
    u, v = box.axes()
    return (np.abs(d @ u) <= 0.5 * box.length) & (np.abs(d @ v) <= 0.5 * box.width)


def obb_overlap(a: Obb, b: Obb) -> bool:
    """Separating-axis overlap test over the four box axes; touching counts."""
    if min(a.length, a.width, b.length, b.width) <= 0:
        raise ValueError("obb_overlap: extents must be positive")
    ua, va = a.axes()
    ub, vb = b.axes()
    delta = np.array([b.cx - a.cx, b.cy - a.cy])
    for axis in (ua, va, ub, vb):
        ra = 0.5 * a.length * abs(float(ua @ axis)) + 0.5 * a.width * abs(float(va @ axis))
        rb = 0.5 * b.length * abs(float(ub @ axis)) + 0.5 * b.width * abs(float(vb @ axis))
        if abs(float(delta @ axis)) > ra + rb:
            return False
    return True


def obb_separation_margin(a: Obb, b: Obb) -> float:
    """Largest projected gap over the four axes (negative when overlapping);
    a magnitude near zero means the pair sits on the overlap boundary."""
    ua, va = a.axes()
    ub, vb = b.axes()
    delta = np.array([b.cx - a.cx, b.cy - a.cy])
    best = -np.inf
    for axis in (ua, va, ub, vb):
        ra = 0.5 * a.length * abs(float(ua @ axis)) + 0.5 * a.width * abs(float(va @ axis))
        rb = 0.5 * b.length * abs(float(ub @ axis)) + 0.5 * b.width * abs(float(vb @ axis))
        best = max(best, abs(float(delta @ axis)) - (ra + rb))
    return best
