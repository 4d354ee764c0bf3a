"""EKF pose estimation over [x, y, yaw, v], fusing wheel odometry as the
control input with GNSS position and compass heading measurements."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import EkfConfig
from .geometry import wrap_angle


class NonPsdCovarianceError(ValueError):
    """Covariance matrix lost positive semi-definiteness."""


@dataclass(frozen=True)
class EstimatorState:
    mean: np.ndarray          # [x m, y m, yaw rad, v m/s]
    cov: np.ndarray           # 4x4 symmetric PSD


def make_noise(cfg: EkfConfig):
    q = np.diag(cfg.q_diag)
    r_gnss = np.eye(2) * cfg.gnss_sigma**2
    r_compass = np.array([[cfg.compass_sigma**2]])
    return q, r_gnss, r_compass


def initial_state(x: float, y: float, yaw: float, cfg: EkfConfig) -> EstimatorState:
    cov = np.diag([cfg.gnss_sigma**2, cfg.gnss_sigma**2,
                   cfg.compass_sigma**2, 0.01])
    return EstimatorState(mean=np.array([x, y, wrap_angle(yaw), 0.0]), cov=cov)


def _check_psd(cov: np.ndarray) -> None:
    if float(np.min(np.linalg.eigvalsh(cov))) < -1e-9:
        raise NonPsdCovarianceError("covariance has negative eigenvalues")


def _symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + cov.T)


def ekf_predict(s: EstimatorState, u, dt: float, cfg: EkfConfig) -> EstimatorState:
    """Propagate with the unicycle motion model; odometry (v, omega) enters as
    the control input and the speed state is overwritten by it."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    _check_psd(s.cov)
    v, omega = float(u[0]), float(u[1])
    x, y, yaw, _ = s.mean
    c, si = math.cos(yaw), math.sin(yaw)
    mean = np.array([
        x + v * c * dt,
        y + v * si * dt,
        wrap_angle(yaw + omega * dt),
        v,
    ])
    # Exact Jacobian of the map above: the new speed is the input, so the
    # last row is zero.
    f = np.array([
        [1.0, 0.0, -v * si * dt, 0.0],
        [0.0, 1.0, v * c * dt, 0.0],
        [0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ])
    q, _, _ = make_noise(cfg)
    cov = _symmetrize(f @ s.cov @ f.T + q)
    return EstimatorState(mean=mean, cov=cov)


def _update(s: EstimatorState, h: np.ndarray, innovation: np.ndarray,
            r: np.ndarray, gate: float):
    p = s.cov
    sm = h @ p @ h.T + r
    d2 = float(innovation @ np.linalg.solve(sm, innovation))
    if d2 > gate:
        return s, False
    k = p @ h.T @ np.linalg.inv(sm)
    mean = s.mean + k @ innovation
    mean[2] = wrap_angle(mean[2])
    ikh = np.eye(4) - k @ h
    cov = _symmetrize(ikh @ p @ ikh.T + k @ r @ k.T)   # Joseph form
    return EstimatorState(mean=mean, cov=cov), True


def ekf_update_gnss(s: EstimatorState, fix, cfg: EkfConfig):
    """Position update; gated on the innovation chi-square.  Returns the new
    state and whether the measurement was accepted."""
    _, r_gnss, _ = make_noise(cfg)
    _check_psd(r_gnss)
    h = np.zeros((2, 4))
    h[0, 0] = 1.0
    h[1, 1] = 1.0
    innovation = np.array([fix.x - s.mean[0], fix.y - s.mean[1]])
    return _update(s, h, innovation, r_gnss, cfg.gnss_gate)


def ekf_update_compass(s: EstimatorState, heading: float, cfg: EkfConfig):
    """Heading update with the innovation wrapped to (-pi, pi]."""
    if not -math.pi < heading <= math.pi + 1e-12:
        raise ValueError("heading must be wrapped to (-pi, pi]")
    _, _, r_compass = make_noise(cfg)
    h = np.zeros((1, 4))
    h[0, 2] = 1.0
    innovation = np.array([wrap_angle(heading - s.mean[2])])
    return _update(s, h, innovation, r_compass, cfg.compass_gate)
