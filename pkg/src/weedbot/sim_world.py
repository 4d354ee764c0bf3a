"""Deterministic fixed-step pasture simulation standing in for all hardware:
differential-drive platform, rate-limited arm joints, spring-law ground
contact, and noisy GNSS/IMU/force sensors.

All state lives in immutable `WorldState` snapshots; sensor noise is derived
from (seed, step index, stream) so identical seeds and command sequences give
bit-identical trajectories regardless of sampling call order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .arm_kinematics import KinematicChain, default_chain
from .config import GroundConfig, ScenarioConfig, SensorNoiseConfig, WeedDefaults
from .force_control import Wrench, wrench_from_array
from .geometry import Pose2D, wrap_angle

# Noise stream identifiers mixed into the per-step generator seed.
_STREAM_GNSS = 1
_STREAM_IMU = 2
_STREAM_FORCE = 3
_STREAM_RENDER = 4
_STREAM_WEEDS = 5


class InvalidCommandError(ValueError):
    """Non-finite or malformed actuator command."""


class ToolJamError(RuntimeError):
    """Tool driven deeper than the ground can yield; the arm is not strong enough."""


@dataclass(frozen=True)
class Weed:
    id: int
    root_position: np.ndarray          # (3,) m, ENU world frame
    leaves: tuple                      # of (azimuth rad, length m, width m)
    extraction_force: float            # N held during the lever phase to extract
    removed: bool = False


@dataclass(frozen=True)
class GnssFix:
    x: float
    y: float
    sigma: float


@dataclass(frozen=True)
class ImuReading:
    yaw_rate: float
    compass_heading: float


@dataclass(frozen=True)
class WorldState:
    time: float
    step_index: int
    platform_pose: Pose2D
    wheel_speeds: tuple                # (left, right) m/s actually applied
    arm_joints: np.ndarray             # (6,) rad
    weeds: tuple                       # of Weed
    removed_ids: frozenset
    rng_seed: int


class GroundModel:
    """Spring-law ground: zero force above the surface, linear in penetration."""

    def __init__(self, cfg: GroundConfig):
        if cfg.spring_constant <= 0.0:
            raise ValueError("spring constant must be positive")
        self.spring_constant = cfg.spring_constant
        self.max_penetration = cfg.max_penetration
        self.height = cfg.height

    def surface_height(self, x, y):
        return np.broadcast_to(self.height, np.shape(x)).astype(float) \
            if np.ndim(x) else self.height


def _rng(seed: int, step_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng((seed, step_index, stream))


def make_weeds(entries, defaults: WeedDefaults, seed: int) -> tuple:
    """Instantiate weeds at the given (id, x, y) map entries; leaf geometry is
    generated deterministically from the scenario seed."""
    weeds = []
    for entry in entries:
        wid = int(entry["id"])
        rng = _rng(seed, wid, _STREAM_WEEDS)
        count = int(rng.integers(defaults.leaf_count[0], defaults.leaf_count[1] + 1))
        base = rng.uniform(0.0, 2.0 * math.pi)
        leaves = []
        for k in range(count):
            azimuth = wrap_angle(base + k * 2.0 * math.pi / count
                                 + rng.uniform(-0.25, 0.25))
            length = rng.uniform(*defaults.leaf_length)
            leaves.append((azimuth, length, length / defaults.leaf_aspect))
        weeds.append(Weed(
            id=wid,
            root_position=np.array([float(entry["x"]), float(entry["y"]), 0.0]),
            leaves=tuple(leaves),
            extraction_force=float(entry.get("extraction_force",
                                             defaults.extraction_force)),
        ))
    return tuple(weeds)


class Simulator:
    """Owns the static world description (ground, noise, limits); stepping and
    sampling are pure functions of the WorldState value passed in."""

    def __init__(self, scenario: ScenarioConfig, chain: KinematicChain | None = None):
        self.cfg = scenario
        self.dt = scenario.sim.dt
        self.wheelbase = scenario.sim.wheelbase
        self.wheel_speed_max = scenario.sim.wheel_speed_max
        self.ground = GroundModel(scenario.ground)
        self.noise: SensorNoiseConfig = scenario.noise
        self.chain = chain if chain is not None else default_chain()

    def initial_state(self, weeds=(), pose: Pose2D = Pose2D(0.0, 0.0, 0.0),
                      arm_joints=None) -> WorldState:
        q = np.zeros(6) if arm_joints is None else np.asarray(arm_joints, float).copy()
        return WorldState(
            time=0.0, step_index=0, platform_pose=pose,
            wheel_speeds=(0.0, 0.0), arm_joints=q,
            weeds=tuple(weeds), removed_ids=frozenset(),
            rng_seed=self.cfg.seed)

    # -- dynamics ----------------------------------------------------------

    def step(self, world: WorldState, wheel_cmd, arm_cmd, dt: float) -> WorldState:
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        if abs(dt - self.dt) > 1e-12:
            raise ValueError(f"step must use the configured dt ({self.dt} s)")
        vl, vr = float(wheel_cmd[0]), float(wheel_cmd[1])
        if not (math.isfinite(vl) and math.isfinite(vr)):
            raise InvalidCommandError("non-finite wheel command")
        arm_cmd = np.asarray(arm_cmd, dtype=float)
        if arm_cmd.shape != (6,) or not np.all(np.isfinite(arm_cmd)):
            raise InvalidCommandError("arm command must be 6 finite joint targets")

        lim = self.wheel_speed_max
        vl = min(lim, max(-lim, vl))
        vr = min(lim, max(-lim, vr))
        v = 0.5 * (vl + vr)
        omega = (vr - vl) / self.wheelbase
        pose = world.platform_pose
        # Midpoint heading keeps constant-speed arcs second-order accurate.
        yaw_mid = pose.yaw + 0.5 * omega * dt
        new_pose = Pose2D(
            x=pose.x + v * math.cos(yaw_mid) * dt,
            y=pose.y + v * math.sin(yaw_mid) * dt,
            yaw=wrap_angle(pose.yaw + omega * dt))

        target = np.clip(arm_cmd, self.chain.lower, self.chain.upper)
        max_dq = self.chain.vel_limit * dt
        dq = np.clip(target - world.arm_joints, -max_dq, max_dq)

        return replace(
            world,
            time=world.time + dt,
            step_index=world.step_index + 1,
            platform_pose=new_pose,
            wheel_speeds=(vl, vr),
            arm_joints=world.arm_joints + dq)

    def mark_removed(self, world: WorldState, weed_id: int) -> WorldState:
        weeds = tuple(replace(w, removed=True) if w.id == weed_id else w
                      for w in world.weeds)
        return replace(world, weeds=weeds,
                       removed_ids=world.removed_ids | {weed_id})

    def weed_near(self, world: WorldState, point_world, radius: float = 0.15):
        """Closest weed within radius of a world-frame point, or None."""
        best, best_d = None, radius
        p = np.asarray(point_world, dtype=float)[:2]
        for w in world.weeds:
            d = float(np.linalg.norm(w.root_position[:2] - p))
            if d <= best_d:
                best, best_d = w, d
        return best

    # -- sensing -----------------------------------------------------------

    def true_contact_fz(self, world: WorldState, tool_tip) -> float:
        tip = np.asarray(tool_tip, dtype=float)
        surface = float(self.ground.surface_height(tip[0], tip[1]))
        penetration = surface - tip[2]
        if penetration > self.ground.max_penetration:
            raise ToolJamError(
                f"tool driven {penetration * 1000:.1f} mm into ground "
                f"(limit {self.ground.max_penetration * 1000:.0f} mm)")
        return self.ground.spring_constant * max(0.0, penetration)

    def contact_force(self, world: WorldState, tool_tip) -> Wrench:
        tip = np.asarray(tool_tip, dtype=float)
        if not np.all(np.isfinite(tip)):
            raise InvalidCommandError("non-finite tool tip")
        fz = self.true_contact_fz(world, tip)
        if self.noise.force_sigma > 0.0:
            fz += _rng(world.rng_seed, world.step_index, _STREAM_FORCE).normal(
                0.0, self.noise.force_sigma)
        return wrench_from_array([0.0, 0.0, fz, 0.0, 0.0, 0.0])

    def sample_gnss(self, world: WorldState) -> GnssFix:
        pose = world.platform_pose
        sigma = self.noise.gnss_sigma
        if sigma > 0.0:
            dx, dy = _rng(world.rng_seed, world.step_index,
                          _STREAM_GNSS).normal(0.0, sigma, size=2)
        else:
            dx = dy = 0.0
        return GnssFix(x=pose.x + dx, y=pose.y + dy, sigma=sigma)

    def sample_imu(self, world: WorldState) -> ImuReading:
        vl, vr = world.wheel_speeds
        yaw_rate = (vr - vl) / self.wheelbase
        heading = world.platform_pose.yaw
        if self.noise.gyro_sigma > 0.0 or self.noise.compass_sigma > 0.0:
            rng = _rng(world.rng_seed, world.step_index, _STREAM_IMU)
            yaw_rate += rng.normal(0.0, self.noise.gyro_sigma)
            heading += rng.normal(0.0, self.noise.compass_sigma)
        return ImuReading(yaw_rate=yaw_rate, compass_heading=wrap_angle(heading))

    def render_rng(self, world: WorldState) -> np.random.Generator:
        return _rng(world.rng_seed, world.step_index, _STREAM_RENDER)
