import numpy as np
import pytest

from weedbot.config import default_scenario
from weedbot.geometry import Pose2D, Pose3D, rotx
from weedbot.sim_camera import (camera_pose_world, load_color_png, load_depth_png,
                                project_point, render_scene, save_color_png,
                                save_depth_png)
from weedbot.sim_world import Simulator, make_weeds
from weedbot.weed_detection import weed_mask


def scene_setup(seed=5, weeds=(), pose=Pose2D(0.0, 0.0, 0.0)):
    cfg = default_scenario(seed=seed)
    sim = Simulator(cfg)
    entries = [{"id": i + 1, "x": x, "y": y} for i, (x, y) in enumerate(weeds)]
    world = sim.initial_state(weeds=make_weeds(entries, cfg.weeds, cfg.seed),
                              pose=pose)
    cam_pose = camera_pose_world(pose, cfg.camera)
    return cfg, sim, world, cam_pose


def test_no_weeds_no_weed_pixels():
    cfg, sim, world, cam_pose = scene_setup()
    color, depth = render_scene(world, sim.ground, cfg.camera, cam_pose,
                                sim.render_rng(world))
    assert color.shape == (480, 640, 3)
    assert not weed_mask(color, cfg.detection).any()


def test_root_on_optical_axis_projects_to_principal_point():
    cfg, _, _, cam_pose = scene_setup()
    ground_under_camera = [cfg.camera.mount_xyz[0], cfg.camera.mount_xyz[1], 0.0]
    u, v, d = project_point(cam_pose, cfg.camera, ground_under_camera)
    assert u == pytest.approx(cfg.camera.cx, abs=1.0)
    assert v == pytest.approx(cfg.camera.cy, abs=1.0)


def test_depth_at_principal_point_is_camera_height():
    cfg, sim, world, cam_pose = scene_setup()
    _, depth = render_scene(world, sim.ground, cfg.camera, cam_pose,
                            sim.render_rng(world))
    assert depth[int(cfg.camera.cy), int(cfg.camera.cx)] == pytest.approx(
        cfg.camera.mount_xyz[2], abs=1e-6)


def test_rendered_root_consistent_with_projection():
    """Ground truth consistency: the projected root pixel touches the drawn
    weed within rasterization tolerance."""
    cfg, sim, world, cam_pose = scene_setup(
        weeds=[(cfg_x, cfg_y) for cfg_x, cfg_y in [(0.48, 0.0)]])
    color, _ = render_scene(world, sim.ground, cfg.camera, cam_pose,
                            sim.render_rng(world))
    u, v, _ = project_point(cam_pose, cfg.camera, world.weeds[0].root_position)
    mask = weed_mask(color, cfg.detection)
    vs, us = np.nonzero(mask)
    d = np.sqrt((us - u) ** 2 + (vs - v) ** 2)
    # leaves start one petiole gap (0.015 m ~ 13 px at 0.7 m) from the root
    assert d.min() <= 0.025 * cfg.camera.fx / cfg.camera.mount_xyz[2]


def test_render_deterministic_per_step():
    cfg, sim, world, cam_pose = scene_setup(weeds=[(0.5, 0.1)])
    a, da = render_scene(world, sim.ground, cfg.camera, cam_pose,
                         sim.render_rng(world))
    b, db = render_scene(world, sim.ground, cfg.camera, cam_pose,
                         sim.render_rng(world))
    assert np.array_equal(a, b) and np.array_equal(da, db)


def test_removed_weed_not_drawn():
    cfg, sim, world, cam_pose = scene_setup(weeds=[(0.48, 0.0)])
    world = sim.mark_removed(world, 1)
    color, _ = render_scene(world, sim.ground, cfg.camera, cam_pose,
                            sim.render_rng(world))
    assert not weed_mask(color, cfg.detection).any()


def test_camera_below_ground_rejected():
    cfg, sim, world, _ = scene_setup()
    bad = Pose3D(camera_pose_world(Pose2D(0, 0, 0), cfg.camera).rotation,
                 np.array([0.0, 0.0, -0.1]))
    with pytest.raises(ValueError):
        render_scene(world, sim.ground, cfg.camera, bad, sim.render_rng(world))


def test_camera_tilt_limit():
    cfg, sim, world, cam_pose = scene_setup()
    tilted = Pose3D(cam_pose.rotation @ rotx(np.radians(70)), cam_pose.position)
    with pytest.raises(ValueError):
        render_scene(world, sim.ground, cfg.camera, tilted,
                     sim.render_rng(world))


def test_png_round_trip(tmp_path):
    cfg, sim, world, cam_pose = scene_setup(weeds=[(0.5, 0.0)])
    color, depth = render_scene(world, sim.ground, cfg.camera, cam_pose,
                                sim.render_rng(world))
    save_color_png(tmp_path / "c.png", color)
    save_depth_png(tmp_path / "d.png", depth)
    assert np.array_equal(load_color_png(tmp_path / "c.png"), color)
    # depth survives to millimetre quantization
    assert np.abs(load_depth_png(tmp_path / "d.png") - depth).max() <= 5e-4 + 1e-9
