"""Waypoint tracking and wheel-speed shaping for the differential platform:
path following, heading-to-wheel-speed conversion, and command clamping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .config import NavConfig, SimConfig
from .geometry import Pose2D, wrap_angle


@dataclass(frozen=True)
class WheelSpeeds:
    left: float
    right: float


@dataclass
class Path:
    waypoints: list               # of (x, y)
    arrival_tolerance: float = 0.25
    current_index: int = 0

    def __post_init__(self):
        if self.arrival_tolerance <= 0.0:
            raise ValueError("arrival tolerance must be positive")

    @property
    def target(self):
        return self.waypoints[min(self.current_index, len(self.waypoints) - 1)]


def path_step(path: Path, pose: Pose2D):
    """Advance the path against the pose estimate.  Returns (target heading,
    distance to the current waypoint, finished).  The waypoint index only ever
    moves forward."""
    if not path.waypoints:
        raise ValueError("empty path")
    while True:
        wx, wy = path.target
        dx, dy = wx - pose.x, wy - pose.y
        distance = math.hypot(dx, dy)
        if distance >= path.arrival_tolerance:
            break
        if path.current_index >= len(path.waypoints) - 1:
            return math.atan2(dy, dx), distance, True
        path.current_index += 1
    return math.atan2(dy, dx), distance, False


def trajectory_step(target_heading: float, distance: float, pose: Pose2D,
                    nav: NavConfig, sim: SimConfig) -> WheelSpeeds:
    """Turn-then-drive law: large heading errors rotate in place, otherwise
    speed scales with remaining distance."""
    if distance < 0.0:
        raise ValueError("distance must be non-negative")
    error = wrap_angle(target_heading - pose.yaw)
    omega = nav.komega * error
    if abs(error) > nav.turn_threshold:
        v = 0.0
    else:
        v = min(sim.wheel_speed_max, nav.kv * distance)
    half = 0.5 * omega * sim.wheelbase
    vl, vr = v - half, v + half
    peak = max(abs(vl), abs(vr))
    if peak > sim.wheel_speed_max:
        scale = sim.wheel_speed_max / peak
        vl, vr = vl * scale, vr * scale
    return WheelSpeeds(vl, vr)


def motion_clamp(cmd: WheelSpeeds, prev: WheelSpeeds, dt: float,
                 nav: NavConfig, sim: SimConfig) -> WheelSpeeds:
    """Per-wheel acceleration limit toward the command, then a joint magnitude
    clamp that preserves the left:right ratio."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    max_dv = nav.wheel_accel_max * dt
    vl = prev.left + min(max_dv, max(-max_dv, cmd.left - prev.left))
    vr = prev.right + min(max_dv, max(-max_dv, cmd.right - prev.right))
    peak = max(abs(vl), abs(vr))
    if peak > sim.wheel_speed_max:
        scale = sim.wheel_speed_max / peak
        vl, vr = vl * scale, vr * scale
    return WheelSpeeds(vl, vr)
