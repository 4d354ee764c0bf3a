"""Force sensing and compliant motion: wrench decoding, low-pass filtering,
guarded descent to contact, and the force-corrected path offset loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal

# Sensor range limits (N, N*m); readings beyond these are flagged invalid.
FORCE_XY_MAX = 200.0
FORCE_Z_MAX = 500.0
TORQUE_MAX = 10.0


class NoContactError(RuntimeError):
    """Guarded descent ran out of travel without reaching the contact force."""


@dataclass(frozen=True)
class Wrench:
    fx: float = 0.0
    fy: float = 0.0
    fz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    valid: bool = True

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.fz, self.tx, self.ty, self.tz])


def wrench_from_array(values, valid: bool | None = None) -> Wrench:
    v = np.asarray(values, dtype=float)
    if valid is None:
        valid = bool(
            np.all(np.isfinite(v))
            and abs(v[0]) <= FORCE_XY_MAX
            and abs(v[1]) <= FORCE_XY_MAX
            and abs(v[2]) <= FORCE_Z_MAX
            and np.all(np.abs(v[3:]) <= TORQUE_MAX)
        )
    return Wrench(*(float(x) for x in v), valid=valid)


@dataclass(frozen=True)
class CalibrationMatrix:
    """Maps the six raw sensor signals to forces and torques."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (6, 6):
            raise ValueError("calibration matrix must be 6x6")
        if np.linalg.cond(m) >= 1e6:
            raise ValueError("calibration matrix is ill-conditioned")
        object.__setattr__(self, "matrix", m)

    @staticmethod
    def identity() -> "CalibrationMatrix":
        return CalibrationMatrix(np.eye(6))

    @staticmethod
    def from_file(path) -> "CalibrationMatrix":
        return CalibrationMatrix(np.loadtxt(path).reshape(6, 6))


def decode_wrench(signals, cal: CalibrationMatrix) -> Wrench:
    """Convert raw sensor signals to a Wrench; out-of-range readings are
    returned with the validity flag cleared rather than raised."""
    s = np.asarray(signals, dtype=float)
    if s.shape != (6,) or not np.all(np.isfinite(s)):
        raise ValueError("expected 6 finite sensor signals")
    return wrench_from_array(cal.matrix @ s)


# ---------------------------------------------------------------------------
# 3rd-order low-pass Butterworth, stepped one sample at a time.

@dataclass(frozen=True)
class FilterState:
    """Second-order-section coefficients plus per-section DF2T delay states."""

    sos: np.ndarray
    z: np.ndarray
    cutoff_hz: float
    sample_hz: float


def make_filter(cutoff_hz: float = 10.0, sample_hz: float = 100.0) -> FilterState:
    sos = signal.butter(3, cutoff_hz, btype="low", fs=sample_hz, output="sos")
    return FilterState(sos=sos, z=np.zeros((sos.shape[0], 2)),
                       cutoff_hz=cutoff_hz, sample_hz=sample_hz)


def filter_step(state: FilterState, sample: float) -> tuple[FilterState, float]:
    """Advance the IIR filter by one sample (direct form II transposed)."""
    if not math.isfinite(sample):
        raise ValueError("non-finite filter input")
    z = state.z.copy()
    x = sample
    for i, (b0, b1, b2, _, a1, a2) in enumerate(state.sos):
        y = b0 * x + z[i, 0]
        z[i, 0] = b1 * x - a1 * y + z[i, 1]
        z[i, 1] = b2 * x - a2 * y
        x = y
    return replace(state, z=z), float(x)


def filter_poles(state: FilterState) -> np.ndarray:
    poles = []
    for section in state.sos:
        poles.extend(np.roots(section[3:]))
    return np.array(poles)


def filter_gain(state: FilterState, freq_hz: float) -> float:
    """Magnitude response of the discrete filter at one frequency."""
    w = 2.0 * math.pi * freq_hz / state.sample_hz
    _, h = signal.sosfreqz(state.sos, worN=[w])
    return float(np.abs(h[0]))


# ---------------------------------------------------------------------------
# Compliant motion.

@dataclass(frozen=True)
class ComplianceState:
    guard_depth: float            # m lowered during guarded descent
    f_set: float                  # N desired contact force
    kp: float = 2e-5              # m/N proportional gain
    accum: float = 0.0            # m accumulated force correction
    clamp: float = 0.05           # m safety clamp on accum
    saturated: bool = False

    def __post_init__(self):
        if self.kp <= 0.0:
            raise ValueError("compliance gain must be positive")


def compliant_step(nominal_point, comp: ComplianceState, filtered_fz: float):
    """One cycle of the force-corrected path: the nominal flange pose is pushed
    along the tool z axis by the saved descent depth plus the accumulated
    proportional correction.  Returns (target pose, new compliance state)."""
    error = comp.f_set - filtered_fz
    accum = comp.accum + comp.kp * error
    saturated = abs(accum) >= comp.clamp
    accum = min(comp.clamp, max(-comp.clamp, accum))
    offset = comp.guard_depth + accum
    tool_z = nominal_point.rotation @ np.array([0.0, 0.0, 1.0])
    target = type(nominal_point)(nominal_point.rotation,
                                 nominal_point.position + tool_z * offset)
    return target, replace(comp, accum=accum, saturated=saturated)


def descent_steps(rig, v_descend: float, f_contact: float,
                  max_guard_depth: float = 0.3):
    """Generator form of the guarded descent: lowers the tool along its z axis
    one control step per iteration until the filtered force reaches f_contact.
    Yields after each step; the return value is the distance lowered."""
    if v_descend <= 0.0:
        raise ValueError("descent velocity must be positive")
    if f_contact <= 0.0 or f_contact > FORCE_Z_MAX:
        raise ValueError("contact force outside sensor range")
    if rig.filtered_fz >= f_contact:
        return 0.0
    start = rig.flange_pose.position.copy()
    step = v_descend * rig.dt
    lowered = 0.0
    # Twice the nominal step count covers filter lag; beyond that the arm has
    # stalled (e.g. workspace edge) and there is no contact to find.
    max_steps = int(2 * max_guard_depth / step) + 10
    for _ in range(max_steps):
        if lowered >= max_guard_depth:
            break
        tool_z = rig.flange_pose.rotation @ np.array([0.0, 0.0, 1.0])
        rig.step_twist(np.concatenate([tool_z * step, np.zeros(3)]))
        lowered = float(np.linalg.norm(rig.flange_pose.position - start))
        yield
        if rig.filtered_fz >= f_contact:
            return lowered
    raise NoContactError(
        f"no contact within {max_guard_depth} m (filtered fz "
        f"{rig.filtered_fz:.2f} N < {f_contact} N)")


def guarded_descent(rig, v_descend: float, f_contact: float,
                    max_guard_depth: float = 0.3) -> float:
    """Run the guarded descent to completion and return the lowered distance."""
    gen = descent_steps(rig, v_descend, f_contact, max_guard_depth)
    while True:
        try:
            next(gen)
        except StopIteration as done:
            return done.value
