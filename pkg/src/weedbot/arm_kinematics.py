"""6-DoF serial arm model: forward/inverse/differential kinematics and
velocity-synchronized point-to-point trajectories.

The chain is fully config-driven (per-joint axis, fixed link transform,
limits); the shipped default is a three-ball arm of paired perpendicular
axes with 0.3/0.3/0.2 m links.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Pose3D, matrix_to_rotvec, rotation_about_axis, rotx, roty, rotz

DEG = math.pi / 180.0


class JointLimitError(ValueError):
    """A joint angle outside its configured range."""


class UnreachableTargetError(RuntimeError):
    def __init__(self, pos_residual: float, rot_residual: float):
        super().__init__(
            f"IK did not converge (best residual {pos_residual:.2e} m, "
            f"{rot_residual:.2e} rad)")
        self.pos_residual = pos_residual
        self.rot_residual = rot_residual


class SingularityError(RuntimeError):
    """Jacobian too close to singular for a Cartesian increment."""


@dataclass(frozen=True)
class JointSpec:
    axis: np.ndarray       # unit rotation axis in the local frame
    origin: Pose3D         # fixed transform applied before the joint rotation


@dataclass(frozen=True)
class KinematicChain:
    joints: tuple
    flange: Pose3D         # fixed transform after the last joint
    lower: np.ndarray      # rad, per joint
    upper: np.ndarray
    vel_limit: float       # rad/s
    acc_limit: float       # rad/s^2

    @property
    def dof(self) -> int:
        return len(self.joints)


def _rpy_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    return rotz(y) @ roty(p) @ rotx(r)


def default_chain() -> KinematicChain:
    """Three paired-perpendicular-axis modules, links 0.3/0.3/0.2 m."""
    axes = ["z", "y", "y", "z", "y", "z"]
    lifts = [0.0, 0.0, 0.3, 0.0, 0.3, 0.0]
    unit = {"x": np.array([1.0, 0.0, 0.0]),
            "y": np.array([0.0, 1.0, 0.0]),
            "z": np.array([0.0, 0.0, 1.0])}
    joints = tuple(
        JointSpec(axis=unit[a], origin=Pose3D(np.eye(3), np.array([0.0, 0.0, z])))
        for a, z in zip(axes, lifts))
    limits = np.full(6, 170.0 * DEG)
    limits[2] = 156.5 * DEG
    return KinematicChain(
        joints=joints,
        flange=Pose3D(np.eye(3), np.array([0.0, 0.0, 0.2])),
        lower=-limits,
        upper=limits.copy(),
        vel_limit=72.0 * DEG,
        acc_limit=150.0 * DEG,
    )


def chain_from_dict(data: dict) -> KinematicChain:
    joints = []
    for j in data["joints"]:
        axis = np.asarray(j["axis"], dtype=float)
        n = np.linalg.norm(axis)
        if n < 1e-9:
            raise ValueError("joint axis must be non-zero")
        origin = Pose3D(_rpy_matrix(j.get("rpy", (0.0, 0.0, 0.0))),
                        np.asarray(j.get("xyz", (0.0, 0.0, 0.0)), dtype=float))
        joints.append(JointSpec(axis=axis / n, origin=origin))
    fl = data.get("flange", {})
    flange = Pose3D(_rpy_matrix(fl.get("rpy", (0.0, 0.0, 0.0))),
                    np.asarray(fl.get("xyz", (0.0, 0.0, 0.0)), dtype=float))
    limits_deg = np.asarray(data["limits_deg"], dtype=float)
    return KinematicChain(
        joints=tuple(joints),
        flange=flange,
        lower=limits_deg[:, 0] * DEG,
        upper=limits_deg[:, 1] * DEG,
        vel_limit=float(data.get("vel_limit_deg", 72.0)) * DEG,
        acc_limit=float(data.get("acc_limit_deg", 150.0)) * DEG,
    )


def load_chain(path) -> KinematicChain:
    return chain_from_dict(json.loads(Path(path).read_text()))


def check_limits(chain: KinematicChain, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (chain.dof,):
        raise ValueError(f"expected {chain.dof} joint angles")
    for i, (qi, lo, hi) in enumerate(zip(q, chain.lower, chain.upper)):
        if not (lo - 1e-9 <= qi <= hi + 1e-9):
            raise JointLimitError(
                f"joint {i + 1} at {qi / DEG:.1f} deg outside "
                f"[{lo / DEG:.1f}, {hi / DEG:.1f}] deg")
    return q


def _frames(chain: KinematicChain, q):
    """World-frame joint origins and axes plus the flange pose."""
    rot = np.eye(3)
    pos = np.zeros(3)
    origins = []
    axes = []
    for spec, qi in zip(chain.joints, q):
        pos = rot @ spec.origin.position + pos
        rot = rot @ spec.origin.rotation
        origins.append(pos)
        axes.append(rot @ spec.axis)
        rot = rot @ rotation_about_axis(spec.axis, qi)
    flange = Pose3D(rot @ chain.flange.rotation, rot @ chain.flange.position + pos)
    return origins, axes, flange


def forward_kinematics(chain: KinematicChain, q) -> Pose3D:
    q = check_limits(chain, q)
    return _frames(chain, q)[2]


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    """Geometric Jacobian, linear rows on top of angular rows."""
    q = check_limits(chain, q)
    origins, axes, flange = _frames(chain, q)
    j = np.zeros((6, chain.dof))
    tip = flange.position
    for i in range(chain.dof):
        j[:3, i] = np.cross(axes[i], tip - origins[i])
        j[3:, i] = axes[i]
    return j


def pose_error(target: Pose3D, current: Pose3D) -> np.ndarray:
    """6-vector (position error, rotation-vector error) in the base frame."""
    return np.concatenate([
        target.position - current.position,
        matrix_to_rotvec(target.rotation @ current.rotation.T),
    ])


def _cap(v: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n > limit:
        return v * (limit / n)
    return v


def _ik_attempt(chain: KinematicChain, target: Pose3D, q0: np.ndarray,
                pos_tol: float, rot_tol: float, max_iter: int,
                damping: float):
    q = q0.copy()
    best = (math.inf, math.inf)
    for _ in range(max_iter + 1):
        flange = _frames(chain, q)[2]
        e_pos = target.position - flange.position
        e_rot = matrix_to_rotvec(target.rotation @ flange.rotation.T)
        np_err, nr_err = float(np.linalg.norm(e_pos)), float(np.linalg.norm(e_rot))
        if np_err < pos_tol and nr_err < rot_tol:
            return q, best
        best = min(best, (np_err, nr_err))
        e = np.concatenate([_cap(e_pos, 0.1), _cap(e_rot, 0.5)])
        j = jacobian(chain, q)
        dq = j.T @ np.linalg.solve(j @ j.T + damping**2 * np.eye(6), e)
        q = np.clip(q + _cap(dq, 0.5), chain.lower, chain.upper)
    return None, best


def inverse_kinematics(chain: KinematicChain, target: Pose3D, q0,
                       pos_tol: float = 1e-4, rot_tol: float = 1e-3,
                       max_iter: int = 200, damping: float = 0.01,
                       restarts: int = 4) -> np.ndarray:
    """Damped-least-squares IK from q0; joint limits are clamped per
    iteration.  A seed that walks into the limits and stalls is retried from
    deterministic perturbed configurations before giving up."""
    q0 = check_limits(chain, q0)
    best = (math.inf, math.inf)
    for attempt in range(restarts + 1):
        if attempt == 0:
            seed = q0
        else:
            rng = np.random.default_rng(attempt)
            span = chain.upper - chain.lower
            seed = np.clip(q0 + rng.uniform(-0.35, 0.35, chain.dof) * span,
                           chain.lower, chain.upper)
        q, attempt_best = _ik_attempt(chain, target, seed, pos_tol, rot_tol,
                                      max_iter, damping)
        if q is not None:
            return q
        best = min(best, attempt_best)
    raise UnreachableTargetError(*best)


def cartesian_increment(chain: KinematicChain, q, twist,
                        sigma_damp: float = 0.05,
                        lambda_max: float = 0.05) -> np.ndarray:
    """Joint-space increment realizing a small flange twist (m, rad), using a
    damped pseudo-inverse whose damping grows as the arm nears a singularity."""
    twist = np.asarray(twist, dtype=float)
    j = jacobian(chain, q)
    u, s, vt = np.linalg.svd(j)
    if s[-1] < 1e-8:
        raise SingularityError(f"sigma_min {s[-1]:.2e} below hard floor")
    lam = 0.0 if s[-1] >= sigma_damp else lambda_max * (1.0 - s[-1] / sigma_damp)
    gains = s / (s**2 + lam**2)
    return vt.T @ (gains * (u.T @ twist))


@dataclass(frozen=True)
class JointTrajectory:
    positions: np.ndarray   # (N, dof) sampled at fixed dt
    dt: float
    duration: float


def plan_ptp(q_from, q_to, chain: KinematicChain, dt: float = 0.01) -> JointTrajectory:
    """Synchronized trapezoidal point-to-point move: all joints start and stop
    together; the leading joint saturates the velocity or acceleration limit."""
    q_from = check_limits(chain, q_from)
    q_to = check_limits(chain, q_to)
    delta = q_to - q_from
    dist = float(np.max(np.abs(delta)))
    if dist < 1e-12:
        return JointTrajectory(positions=q_from[None, :].copy(), dt=dt, duration=0.0)
    v, a = chain.vel_limit, chain.acc_limit
    if dist >= v * v / a:
        t_acc = v / a
        total = dist / v + v / a
        v_peak = v
    else:
        t_acc = math.sqrt(dist / a)
        total = 2.0 * t_acc
        v_peak = a * t_acc

    n = int(math.ceil(total / dt - 1e-12))
    t = np.arange(n + 1) * dt
    s = np.empty_like(t)
    accel = t <= t_acc
    decel = t >= total - t_acc
    cruise = ~accel & ~decel
    s[accel] = 0.5 * a * t[accel] ** 2
    s[cruise] = 0.5 * a * t_acc**2 + v_peak * (t[cruise] - t_acc)
    td = np.minimum(total - t[decel], t_acc)
    s[decel] = dist - 0.5 * a * td**2
    s = np.clip(s / dist, 0.0, 1.0)
    s[-1] = 1.0
    positions = q_from[None, :] + s[:, None] * delta[None, :]
    return JointTrajectory(positions=positions, dt=dt, duration=total)
