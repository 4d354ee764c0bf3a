"""Scenario configuration: every tunable of the sim and the control stack in one place.

A scenario JSON file holds partial overrides per section; anything omitted keeps
the defaults below.  `load_scenario` resolves a file (or a bare dict) into a
fully populated `ScenarioConfig`.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

DATA_DIR = Path(__file__).parent / "data"


class ConfigError(ValueError):
    """Malformed scenario or config file."""


@dataclass
class SimConfig:
    dt: float = 0.01
    wheelbase: float = 0.6
    wheel_speed_max: float = 1.0


@dataclass
class GroundConfig:
    spring_constant: float = 10000.0   # N/m
    max_penetration: float = 0.06      # m, beyond this the tool jams
    height: float = 0.0                # flat pasture surface z


@dataclass
class SensorNoiseConfig:
    gnss_sigma: float = 0.02       # m, RTK-grade
    gyro_sigma: float = 0.005      # rad/s
    compass_sigma: float = 0.02    # rad
    force_sigma: float = 0.2       # N


@dataclass
class CameraConfig:
    fx: float = 600.0
    fy: float = 600.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    # Camera mounted on the platform looking straight down at the ground ahead.
    mount_xyz: tuple = (0.48, 0.0, 0.70)
    clutter: float = 0.0           # fraction of pixels overwritten with random RGB


@dataclass
class ArmConfig:
    # Pose of the arm base in the platform frame.
    mount_xyz: tuple = (0.32, 0.0, 0.45)
    tool_length: float = 0.25      # flange to tool tip, along flange +z
    chain_file: str | None = None  # defaults to the shipped 6-DoF chain


@dataclass
class NavConfig:
    kv: float = 0.8                # m/s per m of distance
    komega: float = 1.5            # rad/s per rad of heading error
    turn_threshold: float = 0.5    # rad, above this turn in place
    arrival_tolerance: float = 0.15
    align_tolerance: float = 0.05  # rad, final heading alignment
    wheel_accel_max: float = 1.0   # m/s^2 per wheel


@dataclass
class EkfConfig:
    q_diag: tuple = (1e-4, 1e-4, 1e-4, 1e-2)  # per-step process noise
    gnss_sigma: float = 0.02
    compass_sigma: float = 0.05
    gnss_gate: float = 13.8        # chi-square, 2 dof @ 0.999
    compass_gate: float = 10.83    # chi-square, 1 dof @ 0.999
    gnss_rate: float = 5.0         # Hz
    compass_rate: float = 10.0     # Hz


@dataclass
class ForceConfig:
    cutoff_hz: float = 10.0
    sample_hz: float = 100.0
    kp: float = 2e-5               # m/N compliant proportional gain
    accum_clamp: float = 0.05      # m safety clamp on accumulated correction
    contact_threshold: float = 10.0  # N, guarded-descent stop force
    descend_speed: float = 0.02    # m/s
    max_guard_depth: float = 0.3   # m
    calibration_file: str | None = None  # 6x6 plain-text matrix, identity if unset


@dataclass
class DetectionConfig:
    min_area: int = 150
    min_elongation: float = 2.0
    parallel_sin: float = 0.05
    outlier_tau: float = 20.0      # px distance to median
    min_lines: int = 2
    # Color rule: strongly green pixels are weed leaves (see sim_camera palette).
    green_min: int = 80
    green_over_red: int = 40
    green_over_blue: int = 40


@dataclass
class WeedDefaults:
    extraction_force: float = 50.0  # N held during the lever phase to extract
    leaf_count: tuple = (3, 6)
    leaf_length: tuple = (0.07, 0.13)   # m
    leaf_aspect: float = 4.0            # length / width


@dataclass
class MissionConfig:
    weeding_profile_file: str | None = None  # defaults to shipped profile
    hold_time: float = 0.5          # s of sustained extraction force
    transfer_timeout: float = 120.0  # simulated s per transfer task
    image_retries: int = 1


@dataclass
class ScenarioConfig:
    seed: int = 0
    sim: SimConfig = field(default_factory=SimConfig)
    ground: GroundConfig = field(default_factory=GroundConfig)
    noise: SensorNoiseConfig = field(default_factory=SensorNoiseConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    arm: ArmConfig = field(default_factory=ArmConfig)
    nav: NavConfig = field(default_factory=NavConfig)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    force: ForceConfig = field(default_factory=ForceConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    weeds: WeedDefaults = field(default_factory=WeedDefaults)
    mission: MissionConfig = field(default_factory=MissionConfig)


_SECTIONS = {
    "sim": SimConfig,
    "ground": GroundConfig,
    "noise": SensorNoiseConfig,
    "camera": CameraConfig,
    "arm": ArmConfig,
    "nav": NavConfig,
    "ekf": EkfConfig,
    "force": ForceConfig,
    "detection": DetectionConfig,
    "weeds": WeedDefaults,
    "mission": MissionConfig,
}


def _build_section(cls, overrides: dict, section: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(overrides) - valid
    if unknown:
        raise ConfigError(f"unknown keys in section '{section}': {sorted(unknown)}")
    coerced = {}
    for key, value in overrides.items():
        if isinstance(value, list):
            value = tuple(value)
        if isinstance(value, (int, float)) and not math.isfinite(value):
            raise ConfigError(f"non-finite value for {section}.{key}")
        coerced[key] = value
    return cls(**coerced)


def scenario_from_dict(data: dict) -> ScenarioConfig:
    if not isinstance(data, dict):
        raise ConfigError("scenario must be a JSON object")
    unknown = set(data) - set(_SECTIONS) - {"seed", "name"}
    if unknown:
        raise ConfigError(f"unknown scenario sections: {sorted(unknown)}")
    kwargs = {"seed": int(data.get("seed", 0))}
    for section, cls in _SECTIONS.items():
        kwargs[section] = _build_section(cls, data.get(section, {}), section)
    return ScenarioConfig(**kwargs)


def scenario_to_dict(cfg: ScenarioConfig) -> dict:
    out = {"seed": cfg.seed}
    for section in _SECTIONS:
        out[section] = dataclasses.asdict(getattr(cfg, section))
    return out


def default_scenario(seed: int = 0) -> ScenarioConfig:
    return ScenarioConfig(seed=seed)


def load_scenario(path) -> ScenarioConfig:
    """Load a scenario JSON file; shipped scenarios resolve by bare name too."""
    p = Path(path)
    if not p.exists():
        shipped = DATA_DIR / f"scenario_{p.stem}.json"
        if shipped.exists():
            p = shipped
        else:
            raise ConfigError(f"scenario file not found: {path}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from exc
    return scenario_from_dict(data)
