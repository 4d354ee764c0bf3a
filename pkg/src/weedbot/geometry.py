"""Planar and spatial frame helpers shared by the whole stack (ENU, right-handed)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TAU = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = a % TAU
    if a > math.pi:
        a -= TAU
    return a


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    yaw: float

    def transform_point(self, px: float, py: float) -> tuple[float, float]:
        """Map a point from this pose's local frame into the parent frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return self.x + c * px - s * py, self.y + s * px + c * py

    def inverse_transform_point(self, px: float, py: float) -> tuple[float, float]:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx, dy = px - self.x, py - self.y
        return c * dx + s * dy, -s * dx + c * dy


def rotx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def roty(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v: np.ndarray) -> np.ndarray:
    return np.array(
        [[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]]
    )


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = skew(axis)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotvec_to_matrix(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    angle = float(np.linalg.norm(v))
    if angle < 1e-12:
        return np.eye(3)
    return rotation_about_axis(v / angle, angle)


def matrix_to_rotvec(r: np.ndarray) -> np.ndarray:
    """Log map of a rotation matrix (axis * angle, angle in [0, pi])."""
    cos_a = (float(np.trace(r)) - 1.0) * 0.5
    cos_a = min(1.0, max(-1.0, cos_a))
    angle = math.acos(cos_a)
    if angle < 1e-12:
        return np.zeros(3)
    if math.pi - angle < 1e-6:
        # Antipodal case: recover the axis from R + I, sign from off-diagonals.
        b = (r + np.eye(3)) * 0.5
        k = int(np.argmax(np.diagonal(b)))
        axis = b[:, k] / math.sqrt(max(b[k, k], 1e-18))
        axis = axis / np.linalg.norm(axis)
        return angle * axis
    w = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    return (angle / (2.0 * math.sin(angle))) * w


@dataclass(frozen=True)
class Pose3D:
    """Rigid transform: rotation matrix plus translation, both numpy arrays."""

    rotation: np.ndarray
    position: np.ndarray

    @staticmethod
    def identity() -> "Pose3D":
        return Pose3D(np.eye(3), np.zeros(3))

    @staticmethod
    def from_rt(rotation: np.ndarray, position) -> "Pose3D":
        return Pose3D(np.asarray(rotation, dtype=float), np.asarray(position, dtype=float))

    def compose(self, other: "Pose3D") -> "Pose3D":
        return Pose3D(self.rotation @ other.rotation,
                      self.rotation @ other.position + self.position)

    def inverse(self) -> "Pose3D":
        rt = self.rotation.T
        return Pose3D(rt, -rt @ self.position)

    def transform_point(self, p: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.position


def pose2d_to_pose3d(pose: Pose2D) -> Pose3D:
    """Lift a planar platform pose to a 3D transform (z = 0)."""
    return Pose3D(rotz(pose.yaw), np.array([pose.x, pose.y, 0.0]))
