"""Weeding tool action: approach above the root, guarded descent to contact,
force-maintained press and lever phases, extraction check, and retreat.

The executable sequence is a generator that advances one control step per
iteration so the mission loop can interleave telemetry and estop handling;
`execute_weeding` drives it to completion.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .arm_kinematics import UnreachableTargetError, plan_ptp, pose_error
from .config import DATA_DIR
from .force_control import ComplianceState, NoContactError, compliant_step, descent_steps
from .geometry import Pose3D, roty, rotz
from .sim_world import ToolJamError

DEG = math.pi / 180.0

STATUS_REMOVED = "removed"
STATUS_TOOL_JAM = "tool_jam"
STATUS_NO_CONTACT = "no_contact"
STATUS_IK_FAILURE = "ik_failure"
STATUS_FORCE_SATURATION = "force_saturation"


class ProfileError(ValueError):
    """Malformed weeding profile."""


@dataclass(frozen=True)
class Keyframe:
    label: str
    offset: tuple          # (x, y, z) m relative to the approach anchor
    angle: float           # rad lever rotation
    force: float           # N contact force setpoint
    duration: float        # s to reach this keyframe from the previous one


@dataclass(frozen=True)
class WeedingProfile:
    keyframes: tuple
    approach_height: float = 0.10

    def __post_init__(self):
        if not self.keyframes:
            raise ProfileError("profile needs at least one keyframe")
        angles = [0.0]
        for kf in self.keyframes:
            if kf.duration <= 0.0:
                raise ProfileError(f"keyframe '{kf.label}': duration must be > 0")
            if not 0.0 <= kf.force <= 150.0:
                raise ProfileError(f"keyframe '{kf.label}': force outside [0, 150] N")
            angles.append(kf.angle)
        lever = [kf.angle for kf in self.keyframes if kf.label == "lever"]
        if lever and any(b < a - 1e-12 for a, b in zip(lever, lever[1:])):
            raise ProfileError("lever rotation must be monotone")

    @property
    def max_force(self) -> float:
        return max(kf.force for kf in self.keyframes)


def profile_from_dict(data: dict) -> WeedingProfile:
    keyframes = tuple(
        Keyframe(label=str(kf.get("label", f"phase{i}")),
                 offset=tuple(kf.get("offset", (0.0, 0.0, 0.0))),
                 angle=float(kf.get("angle_deg", 0.0)) * DEG,
                 force=float(kf.get("force", 0.0)),
                 duration=float(kf["duration"]))
        for i, kf in enumerate(data["keyframes"]))
    return WeedingProfile(keyframes=keyframes,
                          approach_height=float(data.get("approach_height", 0.10)))


def load_profile(path=None) -> WeedingProfile:
    p = Path(path) if path else DATA_DIR / "weeding_profile.json"
    return profile_from_dict(json.loads(p.read_text()))


@dataclass(frozen=True)
class CartesianPath:
    times: np.ndarray       # (N,)
    positions: np.ndarray   # (N, 3) flange positions, platform frame
    rotations: tuple        # of (3, 3) flange rotations
    forces: np.ndarray      # (N,) contact-force setpoints
    angles: np.ndarray      # (N,) lever angles
    labels: tuple           # of str, phase per sample


def tool_down_rotation(yaw: float, angle: float = 0.0) -> np.ndarray:
    """Tool-z-down orientation with the tool x axis at the given yaw; the
    lever angle tilts the tool away from that radial direction.  Pure pitch in
    the yawed frame, which every wrist configuration of the arm can follow."""
    return rotz(yaw) @ roty(math.pi + angle)


def _flange_for(tip: np.ndarray, angle: float, tool_length: float,
                yaw: float) -> Pose3D:
    rot = tool_down_rotation(yaw, angle)
    return Pose3D(rot, tip - rot @ np.array([0.0, 0.0, tool_length]))


def generate_tool_path(root, profile: WeedingProfile, dt: float,
                       tool_length: float, approach_yaw: float = 0.0,
                       ik_probe=None) -> CartesianPath:
    """Time-sampled flange poses anchored at the approach point above the
    root; positions interpolate linearly and the lever angle sweeps linearly
    between keyframes.  With an ik_probe, every keyframe pose is checked for
    reachability up front."""
    root = np.asarray(root, dtype=float)
    anchor = root + np.array([0.0, 0.0, profile.approach_height])
    if ik_probe is not None:
        ik_probe(_flange_for(anchor, 0.0, tool_length, approach_yaw))
        for kf in profile.keyframes:
            ik_probe(_flange_for(anchor + np.asarray(kf.offset), kf.angle,
                                 tool_length, approach_yaw))

    times, positions, rotations, forces, angles, labels = [], [], [], [], [], []
    t0 = 0.0
    prev_offset = np.zeros(3)
    prev_angle = 0.0
    prev_force = profile.keyframes[0].force
    for kf in profile.keyframes:
        offset = np.asarray(kf.offset, dtype=float)
        n = max(1, int(round(kf.duration / dt)))
        for i in range(1, n + 1):
            a = i / n
            tip = anchor + prev_offset + a * (offset - prev_offset)
            angle = prev_angle + a * (kf.angle - prev_angle)
            flange = _flange_for(tip, angle, tool_length, approach_yaw)
            times.append(t0 + i * dt)
            positions.append(flange.position)
            rotations.append(flange.rotation)
            forces.append(prev_force + a * (kf.force - prev_force))
            angles.append(angle)
            labels.append(kf.label)
        t0 += n * dt
        prev_offset, prev_angle, prev_force = offset, kf.angle, kf.force
    return CartesianPath(times=np.array(times), positions=np.array(positions),
                         rotations=tuple(rotations), forces=np.array(forces),
                         angles=np.array(angles), labels=tuple(labels))


@dataclass
class WeedingOutcome:
    status: str
    peak_force: float = 0.0
    duration: float = 0.0
    weed_id: int | None = None
    saturated: bool = False
    trace: dict = field(default_factory=dict)


class _Trace:
    def __init__(self):
        self.rows = {k: [] for k in
                     ("time", "x", "y", "z", "angle", "fz", "f_set", "phase")}

    def add(self, t, flange_pos, angle, fz, f_set, phase):
        r = self.rows
        r["time"].append(t)
        r["x"].append(float(flange_pos[0]))
        r["y"].append(float(flange_pos[1]))
        r["z"].append(float(flange_pos[2]))
        r["angle"].append(float(angle))
        r["fz"].append(float(fz))
        r["f_set"].append(float(f_set))
        r["phase"].append(phase)

    def done(self):
        out = {k: (v if k == "phase" else np.array(v))
               for k, v in self.rows.items()}
        return out


def weeding_steps(rig, root, profile: WeedingProfile, hold_time: float = 0.5):
    """Generator running the full weeding action one control step per
    iteration; returns a WeedingOutcome."""
    if any(abs(w) > 1e-9 for w in rig.wheel_speeds):
        raise ValueError("platform must be stationary for a weeding action")
    dt = rig.dt
    t_start = rig.time
    trace = _Trace()
    root = np.asarray(root, dtype=float)
    base = rig.arm_base_xy
    yaw = math.atan2(root[1] - base[1], root[0] - base[0])

    try:
        path = generate_tool_path(root, profile, dt, rig.tool_length,
                                  approach_yaw=yaw, ik_probe=rig.ik)
        anchor = root + np.array([0.0, 0.0, profile.approach_height])
        q_approach = rig.ik(_flange_for(anchor, 0.0, rig.tool_length, yaw))
    except UnreachableTargetError:
        return WeedingOutcome(status=STATUS_IK_FAILURE,
                              duration=rig.time - t_start, trace=trace.done())

    for q in plan_ptp(rig.current_q, q_approach, rig.chain, dt).positions:
        rig.command_joints(q)
        yield

    weed = rig.weed_near(root)
    if weed is not None and weed.removed:
        return WeedingOutcome(status=STATUS_REMOVED, weed_id=weed.id,
                              duration=rig.time - t_start, trace=trace.done())

    force_cfg = rig.force_cfg
    peak = 0.0
    try:
        descent = descent_steps(rig, force_cfg.descend_speed,
                                force_cfg.contact_threshold,
                                force_cfg.max_guard_depth)
        guard_depth = None
        while guard_depth is None:
            try:
                next(descent)
            except StopIteration as fin:
                guard_depth = fin.value
                break
            peak = max(peak, abs(rig.filtered_fz))
            trace.add(rig.time, rig.flange_pose.position, 0.0,
                      rig.filtered_fz, force_cfg.contact_threshold, "descent")
            yield
    except NoContactError:
        return WeedingOutcome(status=STATUS_NO_CONTACT, peak_force=peak,
                              duration=rig.time - t_start, trace=trace.done())
    except ToolJamError:
        return WeedingOutcome(status=STATUS_TOOL_JAM, peak_force=peak,
                              duration=rig.time - t_start, trace=trace.done())

    comp = ComplianceState(guard_depth=guard_depth, f_set=path.forces[0],
                           kp=force_cfg.kp, clamp=force_cfg.accum_clamp)
    removed = False
    hold = 0.0
    saturated = False
    for i in range(len(path.times)):
        comp = replace(comp, f_set=float(path.forces[i]))
        nominal = Pose3D(path.rotations[i], path.positions[i])
        target, comp = compliant_step(nominal, comp, rig.filtered_fz)
        saturated = saturated or comp.saturated
        twist = pose_error(target, rig.flange_pose)
        try:
            rig.step_twist(twist)
        except ToolJamError:
            return WeedingOutcome(status=STATUS_TOOL_JAM, peak_force=peak,
                                  weed_id=weed.id if weed else None,
                                  duration=rig.time - t_start,
                                  trace=trace.done())
        fz = rig.filtered_fz
        peak = max(peak, abs(fz))
        if path.labels[i] == "lever" and weed is not None and not removed:
            if abs(fz) >= weed.extraction_force:
                hold += dt
                if hold >= hold_time:
                    removed = True
                    rig.remove_weed(weed.id)
            else:
                hold = 0.0
        trace.add(rig.time, rig.flange_pose.position, path.angles[i],
                  fz, comp.f_set, path.labels[i])
        yield

    for q in plan_ptp(rig.current_q, q_approach, rig.chain, dt).positions:
        rig.command_joints(q)
        yield

    status = STATUS_REMOVED if removed else STATUS_FORCE_SATURATION
    return WeedingOutcome(status=status, peak_force=peak,
                          weed_id=weed.id if weed else None,
                          duration=rig.time - t_start, saturated=saturated,
                          trace=trace.done())


def execute_weeding(rig, root, profile: WeedingProfile,
                    hold_time: float = 0.5) -> WeedingOutcome:
    """Run the weeding action to completion and return its outcome."""
    gen = weeding_steps(rig, root, profile, hold_time)
    while True:
        try:
            next(gen)
        except StopIteration as fin:
            return fin.value
