"""Synthetic downward-looking camera: rasterized pasture scenes with weeds as
leaf ellipses radiating from the root, plus a metric depth image from the
pinhole model.  Pixel-deterministic given the world seed."""
from __future__ import annotations

import math

import numpy as np
from PIL import Image

from .config import CameraConfig
from .geometry import Pose2D, Pose3D, pose2d_to_pose3d
from .sim_world import GroundModel, WorldState

# Palette chosen so the detector's green-dominance rule separates weed leaves
# from grass under brightness noise (see DetectionConfig thresholds).
GRASS_RGB = (130, 150, 95)
WEED_RGB = (25, 115, 40)

# Leaves attach to the root through a short bare petiole, so rendered leaves
# stay separate connected components whose axes still meet at the root.
LEAF_GAP = 0.015

# Camera optical frame in the platform frame: x right (+u), y down (+v),
# z along the optical axis.  Nadir mount: z points straight down.
NADIR_ROTATION = np.array([[1.0, 0.0, 0.0],
                           [0.0, -1.0, 0.0],
                           [0.0, 0.0, -1.0]])

_ray_cache: dict = {}


def camera_mount(cfg: CameraConfig) -> Pose3D:
    """Camera pose in the platform frame (nadir view over the mount point)."""
    return Pose3D(NADIR_ROTATION.copy(), np.asarray(cfg.mount_xyz, dtype=float))


def camera_pose_world(platform_pose: Pose2D, cfg: CameraConfig) -> Pose3D:
    return pose2d_to_pose3d(platform_pose).compose(camera_mount(cfg))


def project_point(cam_pose: Pose3D, cfg: CameraConfig, point_world):
    """World point -> (u, v, depth along the optical axis)."""
    p = cam_pose.rotation.T @ (np.asarray(point_world, dtype=float) - cam_pose.position)
    if p[2] <= 1e-9:
        raise ValueError("point behind the camera")
    return (cfg.fx * p[0] / p[2] + cfg.cx,
            cfg.fy * p[1] / p[2] + cfg.cy,
            float(p[2]))


def _ray_grid(cfg: CameraConfig) -> np.ndarray:
    key = (cfg.fx, cfg.fy, cfg.cx, cfg.cy, cfg.width, cfg.height)
    grid = _ray_cache.get(key)
    if grid is None:
        u = (np.arange(cfg.width) - cfg.cx) / cfg.fx
        v = (np.arange(cfg.height) - cfg.cy) / cfg.fy
        uu, vv = np.meshgrid(u, v)
        grid = np.stack([uu, vv, np.ones_like(uu)])  # (3, H, W), cam frame
        _ray_cache[key] = grid
    return grid


def render_scene(world: WorldState, ground: GroundModel, cfg: CameraConfig,
                 cam_pose: Pose3D, rng: np.random.Generator,
                 clutter: float = 0.0):
    """Rasterize the pasture under the camera.  Returns (color uint8 HxWx3,
    depth float64 HxW in metres; 0 marks pixels with no ground hit)."""
    h, w = cfg.height, cfg.width
    surface = ground.surface_height(cam_pose.position[0], cam_pose.position[1])
    if cam_pose.position[2] <= surface:
        raise ValueError("camera at or below the ground surface")
    optical = cam_pose.rotation @ np.array([0.0, 0.0, 1.0])
    if optical @ np.array([0.0, 0.0, -1.0]) < math.cos(math.radians(60.0)):
        raise ValueError("camera must look within 60 degrees of nadir")

    rays = _ray_grid(cfg)
    dirs = np.tensordot(cam_pose.rotation, rays, axes=1)       # (3, H, W) world
    dz = dirs[2]
    hit = dz < -1e-9
    depth = np.zeros((h, w))
    s = np.where(hit, (surface - cam_pose.position[2]) / np.where(hit, dz, -1.0), 0.0)
    depth[hit] = s[hit]
    gx = cam_pose.position[0] + s * dirs[0]
    gy = cam_pose.position[1] + s * dirs[1]

    brightness = rng.integers(-18, 19, size=(h, w), dtype=np.int16)
    tint = rng.integers(-5, 6, size=(h, w, 3), dtype=np.int16)
    color = np.empty((h, w, 3), dtype=np.int16)
    color[:] = np.array(GRASS_RGB, dtype=np.int16)
    color += brightness[:, :, None] + tint

    for weed in world.weeds:
        if weed.removed:
            continue
        root = weed.root_position
        for azimuth, length, width in weed.leaves:
            a, b = 0.5 * length, 0.5 * width
            ca, sa = math.cos(azimuth), math.sin(azimuth)
            center = root[:2] + (LEAF_GAP + a) * np.array([ca, sa])
            try:
                cu, cv, cdepth = project_point(
                    cam_pose, cfg, [center[0], center[1], surface])
            except ValueError:
                continue
            r_px = length * max(cfg.fx, cfg.fy) / cdepth + 4.0
            u0, u1 = max(0, int(cu - r_px)), min(w, int(cu + r_px) + 1)
            v0, v1 = max(0, int(cv - r_px)), min(h, int(cv + r_px) + 1)
            if u0 >= u1 or v0 >= v1:
                continue
            px = gx[v0:v1, u0:u1] - center[0]
            py = gy[v0:v1, u0:u1] - center[1]
            lp = ca * px + sa * py
            lq = -sa * px + ca * py
            inside = hit[v0:v1, u0:u1] & ((lp / a) ** 2 + (lq / b) ** 2 <= 1.0)
            if not inside.any():
                continue
            texture = rng.integers(-6, 7, size=(inside.sum(), 3), dtype=np.int16)
            color[v0:v1, u0:u1][inside] = np.array(WEED_RGB, np.int16) + texture

    if clutter > 0.0:
        mask = rng.random((h, w)) < clutter
        color[mask] = rng.integers(0, 256, size=(int(mask.sum()), 3), dtype=np.int16)

    return np.clip(color, 0, 255).astype(np.uint8), depth


# -- PNG round trip (color 8-bit, depth 16-bit millimetres) -----------------

def save_color_png(path, image: np.ndarray) -> None:
    Image.fromarray(image, mode="RGB").save(path)


def load_color_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def save_depth_png(path, depth_m: np.ndarray) -> None:
    mm = np.clip(np.round(depth_m * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0
