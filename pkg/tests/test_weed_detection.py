import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weedbot.config import default_scenario
from weedbot.geometry import Pose2D, Pose3D
from weedbot.sim_camera import (WEED_RGB, camera_mount, camera_pose_world,
                                render_scene)
from weedbot.sim_world import Simulator, make_weeds
from weedbot.weed_detection import (AmbiguousDirectionError, CameraModel,
                                    InsufficientEvidenceError, Line2D,
                                    NoDepthError, detect_weed, estimate_root,
                                    intersect_lines, leaf_line,
                                    pixel_to_platform, segment_leaves)


def blank_image(h=480, w=640):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:] = (130, 150, 95)
    return img


def draw_ellipse(img, center, a, b, angle):
    """Axis-aligned rasterization of a filled, rotated ellipse in weed color."""
    vs, us = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    du, dv = us - center[0], vs - center[1]
    c, s = math.cos(angle), math.sin(angle)
    p = c * du + s * dv
    q = -s * du + c * dv
    img[(p / a) ** 2 + (q / b) ** 2 <= 1.0] = WEED_RGB
    return img


@pytest.fixture
def det_cfg():
    return default_scenario().detection


def test_empty_image_no_segments(det_cfg):
    assert segment_leaves(blank_image(), det_cfg) == []


def test_single_ellipse_moments(det_cfg):
    """Oracle: second moments of an analytic ellipse give its axis angle."""
    img = draw_ellipse(blank_image(), (320, 240), 60, 15, math.radians(30))
    segs = segment_leaves(img, det_cfg)
    assert len(segs) == 1
    seg = segs[0]
    assert np.allclose(seg.centroid, [320, 240], atol=1.0)
    angle = math.degrees(math.atan2(seg.principal_axis[1],
                                    seg.principal_axis[0])) % 180.0
    assert min(abs(angle - 30.0), abs(angle - 210.0)) <= 2.0
    assert seg.elongation == pytest.approx(4.0, rel=0.1)


def test_two_disjoint_leaves(det_cfg):
    img = draw_ellipse(blank_image(), (200, 200), 50, 12, 0.0)
    img = draw_ellipse(img, (420, 300), 50, 12, math.radians(90))
    segs = segment_leaves(img, det_cfg)
    assert len(segs) == 2
    centroids = sorted((tuple(s.centroid) for s in segs))
    assert np.allclose(centroids[0], (200, 200), atol=1.0)
    assert np.allclose(centroids[1], (420, 300), atol=1.0)


def test_small_and_round_blobs_rejected(det_cfg):
    img = draw_ellipse(blank_image(), (100, 100), 8, 6, 0.0)     # tiny
    img = draw_ellipse(img, (400, 240), 30, 28, 0.0)             # round
    assert segment_leaves(img, det_cfg) == []


def test_leaf_line_directions(det_cfg):
    img = draw_ellipse(blank_image(), (320, 240), 60, 15, 0.0)
    line = leaf_line(segment_leaves(img, det_cfg)[0], det_cfg)
    assert abs(abs(line.direction[0]) - 1.0) < 1e-3

    img45 = draw_ellipse(blank_image(), (320, 240), 60, 15, math.radians(45))
    line45 = leaf_line(segment_leaves(img45, det_cfg)[0], det_cfg)
    assert abs(abs(line45.direction[0]) - math.sqrt(0.5)) <= 0.02
    assert abs(abs(line45.direction[1]) - math.sqrt(0.5)) <= 0.02


def test_leaf_line_rejects_round_segment():
    from weedbot.weed_detection import LeafSegment
    seg = LeafSegment(pixels=np.zeros((10, 2)), centroid=np.zeros(2),
                      principal_axis=np.array([1.0, 0.0]), elongation=1.2)
    with pytest.raises(AmbiguousDirectionError):
        leaf_line(seg)


def line(px, py, dx, dy):
    d = np.array([dx, dy], dtype=float)
    return Line2D(point=np.array([px, py], dtype=float),
                  direction=d / np.linalg.norm(d))


def test_intersect_two_lines_analytic():
    pts = intersect_lines([line(0, 0, 1, 1), line(0, 2, 1, -1)])
    assert len(pts) == 1
    assert np.allclose(pts[0], [1.0, 1.0], atol=1e-12)


def test_intersect_parallel_raises():
    with pytest.raises(InsufficientEvidenceError):
        intersect_lines([line(0, 0, 1, 0), line(0, 5, 1, 0)])


def test_intersect_requires_two_lines():
    with pytest.raises(InsufficientEvidenceError):
        intersect_lines([line(0, 0, 1, 0)])


def test_intersect_concurrent_lines():
    lines = [line(3 - math.cos(a), 4 - math.sin(a), math.cos(a), math.sin(a))
             for a in (0.1, 0.9, 1.7, 2.5)]
    pts = intersect_lines(lines)
    assert len(pts) == 6
    for p in pts:
        assert np.allclose(p, [3.0, 4.0], atol=1e-9)


# -- root estimation -------------------------------------------------------------

def brute_force_root(points, tau=20.0):
    """Independent oracle: literal median/threshold/centroid computation."""
    xs = sorted(p[0] for p in points)
    ys = sorted(p[1] for p in points)

    def median(sorted_vals):
        n = len(sorted_vals)
        mid = n // 2
        return (sorted_vals[mid] if n % 2
                else 0.5 * (sorted_vals[mid - 1] + sorted_vals[mid]))

    mx, my = median(xs), median(ys)
    inliers = [p for p in points
               if math.hypot(p[0] - mx, p[1] - my) <= tau]
    if not inliers:
        return None
    cx = sum(p[0] for p in inliers) / len(inliers)
    cy = sum(p[1] for p in inliers) / len(inliers)
    return (cx, cy), inliers


def test_estimate_root_single_point():
    root, inliers = estimate_root([(10.0, 20.0)])
    assert np.allclose(root, [10, 20])
    assert len(inliers) == 1


def test_estimate_root_rejects_outlier():
    pts = [(10, 10), (11, 10), (10, 11), (9, 10), (10, 9), (200, 200)]
    root, inliers = estimate_root(pts)
    assert np.allclose(root, [10, 10], atol=1.0)
    assert len(inliers) == 5


def test_estimate_root_symmetric_cluster():
    pts = [(0, 0), (2, 0), (0, 2), (2, 2)]
    root, inliers = estimate_root(pts)
    assert np.allclose(root, [1.0, 1.0])


def test_estimate_root_all_rejected():
    # both points 30 px from the coordinate-wise median midpoint
    with pytest.raises(InsufficientEvidenceError):
        estimate_root([(0.0, 0.0), (60.0, 60.0)], tau=20.0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 640), st.floats(0, 480)),
                min_size=1, max_size=20))
def test_estimate_root_matches_brute_force(points):
    expected = brute_force_root(points)
    if expected is None:
        with pytest.raises(InsufficientEvidenceError):
            estimate_root(points)
        return
    (ex, ey), inliers = expected
    root, got_inliers = estimate_root(points)
    assert root[0] == pytest.approx(ex, abs=1e-9)
    assert root[1] == pytest.approx(ey, abs=1e-9)
    assert len(got_inliers) == len(inliers)


# -- back-projection -------------------------------------------------------------

def nadir_cam(extrinsic=None):
    return CameraModel(fx=600.0, fy=600.0, cx=320.0, cy=240.0,
                       extrinsic=extrinsic or Pose3D.identity())


def test_pixel_to_platform_principal_point():
    depth = np.full((480, 640), 0.5)
    p = pixel_to_platform((320, 240), depth, nadir_cam())
    assert np.allclose(p, [0, 0, 0.5])


def test_pixel_to_platform_pinhole_arithmetic():
    depth = np.full((480, 640), 0.5)
    u = 320 + 600 * 0.2 / 0.5
    p = pixel_to_platform((u, 240), depth, nadir_cam())
    assert p[0] == pytest.approx(0.2)


def test_pixel_to_platform_median_fallback():
    depth = np.full((480, 640), 0.5)
    depth[240, 320] = 0.0
    p = pixel_to_platform((320, 240), depth, nadir_cam())
    assert p[2] == pytest.approx(0.5)
    depth[238:243, 318:323] = 0.0
    with pytest.raises(NoDepthError):
        pixel_to_platform((320, 240), depth, nadir_cam())


def test_pixel_out_of_bounds():
    with pytest.raises(ValueError):
        pixel_to_platform((999, 0), np.ones((480, 640)), nadir_cam())


# -- full pipeline on rendered scenes ---------------------------------------------

def rendered_scene(seed, weed_xy, clutter=0.0, pose=Pose2D(0, 0, 0)):
    cfg = default_scenario(seed=seed)
    cfg.camera.clutter = clutter
    sim = Simulator(cfg)
    entries = [{"id": 1, "x": weed_xy[0], "y": weed_xy[1]}]
    world = sim.initial_state(weeds=make_weeds(entries, cfg.weeds, cfg.seed),
                              pose=pose)
    cam_pose = camera_pose_world(pose, cfg.camera)
    color, depth = render_scene(world, sim.ground, cfg.camera, cam_pose,
                                sim.render_rng(world), clutter=clutter)
    cam = CameraModel(fx=cfg.camera.fx, fy=cfg.camera.fy, cx=cfg.camera.cx,
                      cy=cfg.camera.cy, extrinsic=camera_mount(cfg.camera))
    return cfg, world, color, depth, cam


def test_detect_rendered_weed_within_2cm():
    cfg, world, color, depth, cam = rendered_scene(3, (0.5, 0.05))
    hyp = detect_weed(color, depth, cam, cfg.detection)
    true_root = world.weeds[0].root_position  # platform frame == world here
    assert np.linalg.norm(hyp.root_platform - true_root) <= 0.02
    assert hyp.confidence == 1.0


def test_detect_empty_scene_raises():
    cfg, world, color, depth, cam = rendered_scene(4, (50.0, 50.0))  # off-frame
    with pytest.raises(InsufficientEvidenceError):
        detect_weed(color, depth, cam, cfg.detection)


def test_detect_under_clutter_monte_carlo():
    hits = 0
    for seed in range(25):
        cfg, world, color, depth, cam = rendered_scene(
            seed, (0.48 + 0.01 * (seed % 5), -0.05 + 0.02 * (seed % 3)),
            clutter=0.3)
        try:
            hyp = detect_weed(color, depth, cam, cfg.detection)
        except InsufficientEvidenceError:
            continue
        err = np.linalg.norm(hyp.root_platform - world.weeds[0].root_position)
        hits += err <= 0.02
    assert hits >= 20


def test_pipeline_translation_equivariance():
    """Shifting the image content shifts the detected root pixel identically."""
    cfg, world, color, depth, cam = rendered_scene(6, (0.48, 0.0))
    base = detect_weed(color, depth, cam, cfg.detection)
    du, dv = 40, -25
    rolled = np.roll(np.roll(color, dv, axis=0), du, axis=1)
    rolled_depth = np.roll(np.roll(depth, dv, axis=0), du, axis=1)
    shifted = detect_weed(rolled, rolled_depth, cam, cfg.detection)
    assert shifted.root_pixel[0] - base.root_pixel[0] == pytest.approx(du, abs=1.0)
    assert shifted.root_pixel[1] - base.root_pixel[1] == pytest.approx(dv, abs=1.0)


def test_more_leaves_do_not_hurt():
    errors = {}
    for count in (3, 4, 5, 6, 8):
        cfg = default_scenario(seed=9)
        cfg.weeds.leaf_count = (count, count)
        sim = Simulator(cfg)
        world = sim.initial_state(
            weeds=make_weeds([{"id": 1, "x": 0.48, "y": 0.0}], cfg.weeds, 9))
        cam_pose = camera_pose_world(Pose2D(0, 0, 0), cfg.camera)
        color, depth = render_scene(world, sim.ground, cfg.camera, cam_pose,
                                    sim.render_rng(world))
        cam = CameraModel(fx=cfg.camera.fx, fy=cfg.camera.fy, cx=cfg.camera.cx,
                          cy=cfg.camera.cy, extrinsic=camera_mount(cfg.camera))
        hyp = detect_weed(color, depth, cam, cfg.detection)
        errors[count] = float(np.linalg.norm(
            hyp.root_platform - world.weeds[0].root_position))
        assert hyp.confidence == 1.0
    assert all(err <= 0.004 for err in errors.values())
    assert errors[8] <= errors[3] + 0.002
