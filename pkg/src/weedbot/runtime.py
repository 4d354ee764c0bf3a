"""The 100 Hz control loop: binds the simulator, EKF, platform controllers,
arm rig and mission executive into one steppable robot instance.

`RobotRuntime.step()` advances exactly one fixed control period.  External
commands (console or CLI) go through small methods guarded by the owning
thread; the network service serializes access with a lock.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import localization as loc
from . import mission_control as mc
from .arm_kinematics import (KinematicChain, cartesian_increment, default_chain,
                             forward_kinematics, inverse_kinematics, load_chain)
from .config import ScenarioConfig
from .force_control import (CalibrationMatrix, Wrench, decode_wrench,
                            filter_step, make_filter)
from .geometry import Pose2D, Pose3D, pose2d_to_pose3d, wrap_angle
from .platform_control import Path, WheelSpeeds, motion_clamp, path_step, trajectory_step
from .sim_camera import camera_mount, camera_pose_world, render_scene
from .sim_world import Simulator, make_weeds
from .weed_detection import (CameraModel, InsufficientEvidenceError, NoDepthError,
                             detect_weed)
from .weeding_action import STATUS_REMOVED, load_profile, weeding_steps

# Non-singular parked arm configuration: tool down over a mid-workspace point
# 0.20 m ahead of the arm base, flange 0.40 m above the ground plane.
HOME_Q = np.array([0.0, -0.2137256775, 2.2820417910, 0.0, 1.0732765400, 0.0])

JOG_DEADMAN = 0.5          # s without a fresh jog command before zeroing
CAPTURE_SETTLE = 0.3       # s of standstill before taking a picture


class InvariantBreach(RuntimeError):
    """A runtime contract was violated; headless runs exit with code 3."""


class WeedingRig:
    """Arm, force sensing and world-stepping bundle.  All world mutation of a
    runtime flows through this object so snapshots stay consistent."""

    def __init__(self, sim: Simulator, world, chain: KinematicChain,
                 arm_mount_xyz, tool_length: float, cal: CalibrationMatrix,
                 force_cfg):
        self.sim = sim
        self.world = world
        self.chain = chain
        self.mount = Pose3D(np.eye(3), np.asarray(arm_mount_xyz, dtype=float))
        self.mount_inv = self.mount.inverse()
        self.tool_length = tool_length
        self.cal = cal
        self.cal_inv = np.linalg.inv(cal.matrix)
        self.force_cfg = force_cfg
        self.filter = make_filter(force_cfg.cutoff_hz, force_cfg.sample_hz)
        self.filtered_fz = 0.0
        self.last_wrench = Wrench()
        self._sense()

    # -- views ---------------------------------------------------------------

    @property
    def dt(self) -> float:
        return self.sim.dt

    @property
    def time(self) -> float:
        return self.world.time

    @property
    def wheel_speeds(self):
        return self.world.wheel_speeds

    @property
    def current_q(self) -> np.ndarray:
        return self.world.arm_joints

    @property
    def platform_pose3d(self) -> Pose3D:
        return pose2d_to_pose3d(self.world.platform_pose)

    @property
    def arm_base_xy(self):
        return (float(self.mount.position[0]), float(self.mount.position[1]))

    @property
    def flange_pose(self) -> Pose3D:
        """Flange pose in the platform frame."""
        return self.mount.compose(forward_kinematics(self.chain, self.current_q))

    def tool_tip_platform(self) -> np.ndarray:
        return self.flange_pose.transform_point([0.0, 0.0, self.tool_length])

    def tool_tip_world(self) -> np.ndarray:
        return self.platform_pose3d.transform_point(self.tool_tip_platform())

    def ik(self, flange_platform: Pose3D) -> np.ndarray:
        target = self.mount_inv.compose(flange_platform)
        return inverse_kinematics(self.chain, target, self.current_q)

    def weed_near(self, root_platform):
        root_world = self.platform_pose3d.transform_point(root_platform)
        return self.sim.weed_near(self.world, root_world)

    def remove_weed(self, weed_id: int) -> None:
        self.world = self.sim.mark_removed(self.world, weed_id)

    # -- stepping ------------------------------------------------------------

    def advance(self, wheel_cmd, arm_cmd) -> None:
        self._advance(wheel_cmd, arm_cmd)

    def drive(self, wheel_cmd) -> None:
        """One step with the platform moving and the arm holding position."""
        self._advance(wheel_cmd, self.current_q)

    def command_joints(self, q) -> None:
        self._advance((0.0, 0.0), q)

    def step_twist(self, twist) -> None:
        """One step realizing a small Cartesian flange motion."""
        twist = np.asarray(twist, dtype=float)
        lin = float(np.linalg.norm(twist[:3]))
        ang = float(np.linalg.norm(twist[3:]))
        if lin > 0.01:
            twist = twist.copy()
            twist[:3] *= 0.01 / lin
        if ang > 0.02:
            twist = twist.copy()
            twist[3:] *= 0.02 / ang
        dq = cartesian_increment(self.chain, self.current_q, twist)
        q = np.clip(self.current_q + dq, self.chain.lower, self.chain.upper)
        self._advance((0.0, 0.0), q)

    def _advance(self, wheel_cmd, arm_cmd) -> None:
        self.world = self.sim.step(self.world, wheel_cmd, arm_cmd, self.dt)
        self._sense()

    def _sense(self) -> None:
        wrench = self.sim.contact_force(self.world, self.tool_tip_world())
        signals = self.cal_inv @ wrench.as_array()
        self.last_wrench = decode_wrench(signals, self.cal)
        self.filter, self.filtered_fz = filter_step(self.filter,
                                                    self.last_wrench.fz)


@dataclass
class TransferState:
    path: Path
    target_yaw: float
    weed_id: int
    deadline: float
    phase: str = "drive"       # drive -> align


class RobotRuntime:
    """One robot instance over a simulated pasture."""

    def __init__(self, scenario: ScenarioConfig, weed_entries=(),
                 start_pose: Pose2D = Pose2D(0.0, 0.0, 0.0),
                 record_trace: bool = True):
        cfg = scenario
        self.cfg = cfg
        self.chain = (load_chain(cfg.arm.chain_file) if cfg.arm.chain_file
                      else default_chain())
        self.sim = Simulator(cfg, self.chain)
        self.profile = load_profile(cfg.mission.weeding_profile_file)
        cal = (CalibrationMatrix.from_file(cfg.force.calibration_file)
               if cfg.force.calibration_file else CalibrationMatrix.identity())
        weeds = make_weeds(weed_entries, cfg.weeds, cfg.seed)
        world = self.sim.initial_state(weeds=weeds, pose=start_pose,
                                       arm_joints=HOME_Q)
        self.rig = WeedingRig(self.sim, world, self.chain, cfg.arm.mount_xyz,
                              cfg.arm.tool_length, cal, cfg.force)

        fix = self.sim.sample_gnss(world)
        imu = self.sim.sample_imu(world)
        self.est = loc.initial_state(fix.x, fix.y, imu.compass_heading, cfg.ekf)
        self._gnss_every = max(1, round(1.0 / (cfg.ekf.gnss_rate * self.sim.dt)))
        self._compass_every = max(
            1, round(1.0 / (cfg.ekf.compass_rate * self.sim.dt)))

        self.mode = mc.MODE_IDLE
        self.mission: mc.Mission | None = None
        self.mission_started = False
        self._mission_cmd = None
        self._transfer: TransferState | None = None
        self._capture_until: float | None = None
        self._weeding = None
        self._coordinate: TransferState | None = None
        self.prev_cmd = WheelSpeeds(0.0, 0.0)
        self._jog = (0.0, 0.0, -math.inf)     # v, omega, stamp
        self._arm_jog = (np.zeros(6), -math.inf)
        self.last_detection = None
        self.mission_log: list = []
        self.metrics = {"platform": [], "detection": [], "tool": [],
                        "force": [], "outcomes": {}}
        self.weeding_traces: dict = {}
        self.record_trace = record_trace
        self.trace_rows: list = []

    # -- convenience views ----------------------------------------------------

    @property
    def world(self):
        return self.rig.world

    @property
    def est_pose(self) -> Pose2D:
        m = self.est.mean
        return Pose2D(float(m[0]), float(m[1]), float(m[2]))

    @property
    def platform_moving(self) -> bool:
        return any(abs(w) > 1e-6 for w in self.world.wheel_speeds)

    @property
    def arm_moving(self) -> bool:
        return self._weeding is not None

    @property
    def mission_complete(self) -> bool:
        return (self.mission is not None and self.mission_started
                and self.mission.complete)

    def _log(self, event: str, **fields) -> None:
        self.mission_log.append({"time": round(self.world.time, 4),
                                 "event": event, **fields})

    # -- external commands ------------------------------------------------------

    def request_mode(self, requested: str) -> bool:
        new = mc.set_mode(self.mode, requested, self.arm_moving,
                          self.platform_moving)
        if new != self.mode:
            self._log("mode", mode=new)
        self.mode = new
        return new == requested

    def estop(self) -> None:
        self.mode = mc.MODE_ESTOP
        self._log("estop")

    def reset(self) -> bool:
        return self.request_mode(mc.MODE_IDLE)

    def load_mission(self, weed_map) -> mc.Mission:
        if self.mission_started and not self.mission.complete:
            raise mc.ProtocolError("mission already running")
        mission = (weed_map if isinstance(weed_map, mc.Mission)
                   else mc.load_weed_map(weed_map))
        self.mission = mission
        self.mission_started = False
        self._mission_cmd = None
        entries = [{"id": t.weed_id, "x": t.params["x"], "y": t.params["y"],
                    } for t in mission.tasks if t.kind == mc.TRANSFER]
        weeds = make_weeds(entries, self.cfg.weeds, self.cfg.seed)
        # Plant the mapped weeds into the running world; the clock keeps going.
        self.rig.world = dataclasses.replace(
            self.rig.world, weeds=weeds, removed_ids=frozenset())
        self._log("mission_loaded", weeds=len(entries), source=mission.source)
        return mission

    def start_mission(self) -> bool:
        if self.mission is None:
            return False
        if self.mode != mc.MODE_MISSION:
            if not self.request_mode(mc.MODE_MISSION):
                return False
        if not self.mission_started:
            self.mission_started = True
            _, cmd = mc.dispatch(self.mission, mc.TaskEvent("start"),
                                 self.cfg.mission.image_retries)
            self._on_command(cmd)
        return True

    def pause(self) -> bool:
        return self.request_mode(mc.MODE_IDLE)

    def jog_platform(self, v: float, omega: float) -> None:
        lim_v = self.cfg.sim.wheel_speed_max
        lim_w = 2.0 * lim_v / self.cfg.sim.wheelbase
        if not (math.isfinite(v) and math.isfinite(omega)):
            raise ValueError("non-finite jog")
        if abs(v) > lim_v or abs(omega) > lim_w:
            raise ValueError("jog outside limits")
        self._jog = (v, omega, self.world.time)

    def jog_arm(self, joint_rates) -> None:
        rates = np.asarray(joint_rates, dtype=float)
        if rates.shape != (6,) or not np.all(np.isfinite(rates)):
            raise ValueError("arm jog needs 6 finite joint rates")
        if np.any(np.abs(rates) > self.chain.vel_limit + 1e-12):
            raise ValueError("arm jog outside joint velocity limit")
        self._arm_jog = (rates, self.world.time)

    def coordinate_drive(self, x: float, y: float) -> None:
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ValueError("non-finite coordinate target")
        est = self.est_pose
        self._coordinate = TransferState(
            path=Path([(x, y)], self.cfg.nav.arrival_tolerance),
            target_yaw=math.atan2(y - est.y, x - est.x), weed_id=-1,
            deadline=self.world.time + self.cfg.mission.transfer_timeout)
        self._log("coordinate_drive", x=x, y=y)

    # -- mission plumbing -------------------------------------------------------

    def _on_command(self, cmd) -> None:
        self._mission_cmd = cmd
        self._transfer = None
        self._capture_until = None
        self._weeding = None
        if cmd is None:
            return
        if isinstance(cmd, mc.NavigateTo):
            est = self.est_pose
            yaw = math.atan2(cmd.y - est.y, cmd.x - est.x)
            cam = self.cfg.camera.mount_xyz
            wx = cmd.x - (math.cos(yaw) * cam[0] - math.sin(yaw) * cam[1])
            wy = cmd.y - (math.sin(yaw) * cam[0] + math.cos(yaw) * cam[1])
            self._transfer = TransferState(
                path=Path([(wx, wy)], self.cfg.nav.arrival_tolerance),
                target_yaw=yaw, weed_id=cmd.weed_id,
                deadline=self.world.time + self.cfg.mission.transfer_timeout)
        elif isinstance(cmd, mc.CaptureImage):
            self._capture_until = self.world.time + CAPTURE_SETTLE
        elif isinstance(cmd, mc.WeedAt):
            self._weeding = weeding_steps(self.rig, np.asarray(cmd.root),
                                          self.profile,
                                          self.cfg.mission.hold_time)
        elif isinstance(cmd, mc.StopPlatform):
            self._log("mission_complete", counts=self.mission.counts())

    def _emit_event(self, kind: str, payload=None) -> None:
        idx = self.mission.running_index
        task = self.mission.tasks[idx]
        self._log(kind, task=idx, kind_name=task.kind, weed=task.weed_id,
                  **({"detail": payload.get("reason", "")} if payload else {}))
        _, cmd = mc.dispatch(self.mission,
                             mc.TaskEvent(kind, idx, payload or {}),
                             self.cfg.mission.image_retries)
        self._on_command(cmd)

    def _true_root_platform(self, weed) -> np.ndarray:
        return self.rig.platform_pose3d.inverse().transform_point(
            weed.root_position)

    def _camera_model(self) -> CameraModel:
        c = self.cfg.camera
        return CameraModel(fx=c.fx, fy=c.fy, cx=c.cx, cy=c.cy,
                           extrinsic=camera_mount(c))

    def capture_and_detect(self, clutter: float | None = None):
        """Render the camera view at the current world state and run the
        detector.  Raises the detector's errors unchanged."""
        c = self.cfg.camera
        cam_pose = camera_pose_world(self.world.platform_pose, c)
        color, depth = render_scene(self.world, self.sim.ground, c, cam_pose,
                                    self.sim.render_rng(self.world),
                                    clutter=c.clutter if clutter is None
                                    else clutter)
        return detect_weed(color, depth, self._camera_model(),
                           self.cfg.detection)

    # -- per-mode stepping -------------------------------------------------------

    def _drive_command(self, ws: WheelSpeeds) -> None:
        cmd = motion_clamp(ws, self.prev_cmd, self.sim.dt, self.cfg.nav,
                           self.cfg.sim)
        self.prev_cmd = cmd
        self.rig.drive((cmd.left, cmd.right))

    def _step_transfer_like(self, state: TransferState):
        """Shared waypoint-then-align logic.  Returns 'running'|'done'|'timeout'."""
        if self.world.time > state.deadline:
            self._drive_command(WheelSpeeds(0.0, 0.0))
            return "timeout"
        est = self.est_pose
        if state.phase == "drive":
            heading, dist, finished = path_step(state.path, est)
            if finished:
                state.phase = "align"
            else:
                self._drive_command(trajectory_step(heading, dist, est,
                                                    self.cfg.nav, self.cfg.sim))
                return "running"
        err = wrap_angle(state.target_yaw - est.yaw)
        if abs(err) > self.cfg.nav.align_tolerance:
            ws = trajectory_step(est.yaw + err, 0.0, est, self.cfg.nav,
                                 self.cfg.sim)
            self._drive_command(ws)
            return "running"
        self._drive_command(WheelSpeeds(0.0, 0.0))
        if self.platform_moving:
            return "running"
        return "done"

    def _step_mission(self) -> None:
        if self.mission is None or not self.mission_started \
                or self.mission.complete or self._mission_cmd is None:
            self._drive_command(WheelSpeeds(0.0, 0.0))
            return
        if self._transfer is not None:
            state = self._transfer
            result = self._step_transfer_like(state)
            if result == "done":
                pose = self.world.platform_pose
                wx, wy = state.path.target
                self.metrics["platform"].append({
                    "weed_id": state.weed_id,
                    "commanded": [wx, wy],
                    "stop_error_m": math.hypot(pose.x - wx, pose.y - wy)})
                self._emit_event("task_done")
            elif result == "timeout":
                self._emit_event("task_failed", {"reason": "transfer timeout"})
            return
        if self._capture_until is not None:
            self._drive_command(WheelSpeeds(0.0, 0.0))
            if self.world.time < self._capture_until or self.platform_moving:
                return
            task = self.mission.tasks[self.mission.running_index]
            try:
                hyp = self.capture_and_detect()
            except (InsufficientEvidenceError, NoDepthError) as exc:
                self._emit_event("task_failed", {"reason": str(exc)})
                return
            root = [float(v) for v in hyp.root_platform]
            weed = self.rig.weed_near(hyp.root_platform)
            error = None
            if weed is not None:
                error = float(np.linalg.norm(
                    self._true_root_platform(weed) - hyp.root_platform))
            self.metrics["detection"].append({
                "weed_id": task.weed_id, "error_m": error,
                "confidence": hyp.confidence})
            self.last_detection = {"weed_id": task.weed_id, "root": root,
                                   "confidence": hyp.confidence,
                                   "time": self.world.time}
            self._emit_event("task_done", {"root": root})
            return
        if self._weeding is not None:
            task = self.mission.tasks[self.mission.running_index]
            try:
                next(self._weeding)
                return
            except StopIteration as fin:
                outcome = fin.value
            self._drive_command(WheelSpeeds(0.0, 0.0))
            self._record_weeding(task, outcome)
            if outcome.status == STATUS_REMOVED:
                self._emit_event("task_done", {"detail": outcome.status})
            else:
                self._emit_event("task_failed", {"reason": outcome.status})
            return
        # StopPlatform or nothing actionable: hold still.
        self._drive_command(WheelSpeeds(0.0, 0.0))

    def _record_weeding(self, task, outcome) -> None:
        self.weeding_traces[task.weed_id] = outcome.trace
        self.metrics["outcomes"][outcome.status] = (
            self.metrics["outcomes"].get(outcome.status, 0) + 1)
        entry = {"weed_id": task.weed_id, "status": outcome.status,
                 "peak_N": outcome.peak_force,
                 "duration_s": outcome.duration}
        trace = outcome.trace
        phases = trace.get("phase", [])
        if "descent" in phases:
            i = len(phases) - 1 - phases[::-1].index("descent")
            root = task.params.get("root")
            if root is not None:
                entry["approach_error_m"] = math.hypot(
                    trace["x"][i] - root[0], trace["y"][i] - root[1])
                self.metrics["tool"].append({
                    "weed_id": task.weed_id,
                    "approach_error_m": entry["approach_error_m"]})
        if "press" in phases:
            t = trace["time"]
            press = np.array([p == "press" for p in phases])
            t_press0 = t[press][0]
            settled = press & (t >= t_press0 + 2.0)
            if settled.any():
                err = np.abs(trace["fz"][settled] - trace["f_set"][settled])
                entry["steady_state_err_N"] = float(err.max())
        self.metrics["force"].append(entry)
        self._log("weeding_outcome", **{k: v for k, v in entry.items()})

    def _step_joystick(self) -> None:
        v, omega, stamp = self._jog
        if self.world.time - stamp > JOG_DEADMAN:
            v = omega = 0.0
        half = 0.5 * omega * self.cfg.sim.wheelbase
        cmd = motion_clamp(WheelSpeeds(v - half, v + half), self.prev_cmd,
                           self.sim.dt, self.cfg.nav, self.cfg.sim)
        self.prev_cmd = cmd
        rates, astamp = self._arm_jog
        q = self.rig.current_q
        if self.world.time - astamp <= JOG_DEADMAN:
            q = np.clip(q + rates * self.sim.dt,
                        self.chain.lower, self.chain.upper)
        self.rig.advance((cmd.left, cmd.right), q)

    # -- the loop ------------------------------------------------------------------

    def step(self) -> None:
        """Advance exactly one control period (one world step)."""
        if self.mode in (mc.MODE_ESTOP, mc.MODE_IDLE):
            self.prev_cmd = WheelSpeeds(0.0, 0.0)
            self.rig.drive((0.0, 0.0))
        elif self.mode == mc.MODE_JOYSTICK:
            self._step_joystick()
        elif self.mode == mc.MODE_COORDINATE:
            if self._coordinate is None:
                self._drive_command(WheelSpeeds(0.0, 0.0))
            else:
                result = self._step_transfer_like(self._coordinate)
                if result != "running":
                    self._log("coordinate_drive_finished", result=result)
                    self._coordinate = None
                    self.request_mode(mc.MODE_IDLE)
        elif self.mode == mc.MODE_MISSION:
            self._step_mission()
        else:
            self.rig.drive((0.0, 0.0))

        self._step_estimator()
        if self.record_trace:
            self._append_trace()

    def _step_estimator(self) -> None:
        vl, vr = self.world.wheel_speeds
        u = (0.5 * (vl + vr), (vr - vl) / self.cfg.sim.wheelbase)
        self.est = loc.ekf_predict(self.est, u, self.sim.dt, self.cfg.ekf)
        idx = self.world.step_index
        if idx % self._gnss_every == 0:
            self.est, _ = loc.ekf_update_gnss(
                self.est, self.sim.sample_gnss(self.world), self.cfg.ekf)
        if idx % self._compass_every == 0:
            imu = self.sim.sample_imu(self.world)
            self.est, _ = loc.ekf_update_compass(
                self.est, imu.compass_heading, self.cfg.ekf)

    def _append_trace(self) -> None:
        w = self.world
        m = self.est.mean
        task = self.mission.running_index if self.mission else None
        self.trace_rows.append((
            w.time, w.platform_pose.x, w.platform_pose.y, w.platform_pose.yaw,
            float(m[0]), float(m[1]), float(m[2]), float(m[3]),
            self.mode, -1 if task is None else task,
            w.wheel_speeds[0], w.wheel_speeds[1],
            *[float(q) for q in w.arm_joints],
            self.rig.filtered_fz))

    def run_until_mission_complete(self, max_sim_time: float = 600.0) -> bool:
        while not self.mission_complete and self.world.time < max_sim_time:
            self.step()
        return self.mission_complete


TRACE_HEADER = ("time_s,true_x_m,true_y_m,true_yaw_rad,est_x_m,est_y_m,"
                "est_yaw_rad,est_v_mps,mode,task_index,wheel_left_mps,"
                "wheel_right_mps,q1_rad,q2_rad,q3_rad,q4_rad,q5_rad,q6_rad,"
                "filtered_fz_N")
