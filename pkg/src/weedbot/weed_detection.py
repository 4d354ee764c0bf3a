"""Geometric weed-root detection: color-mask the leaves, fit a directional
line through each leaf from its image moments, intersect the lines, reject
outliers, and back-project the center through the depth image to a 3D root
position in the platform frame."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import DetectionConfig
from .geometry import Pose3D


class InsufficientEvidenceError(RuntimeError):
    """Scene does not support a confident root estimate."""


class AmbiguousDirectionError(RuntimeError):
    """Segment too round for a directional line."""


class NoDepthError(RuntimeError):
    """No valid depth around the requested pixel."""


@dataclass(frozen=True)
class LeafSegment:
    pixels: np.ndarray        # (N, 2) as (u, v)
    centroid: np.ndarray      # (2,) px
    principal_axis: np.ndarray  # unit 2-vector
    elongation: float         # sqrt of moment eigenvalue ratio, >= 1


@dataclass(frozen=True)
class Line2D:
    point: np.ndarray
    direction: np.ndarray     # unit


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    extrinsic: Pose3D         # camera in the platform frame


@dataclass(frozen=True)
class WeedHypothesis:
    root_pixel: np.ndarray    # (u, v)
    inlier_points: np.ndarray  # (K, 2)
    root_platform: np.ndarray  # (3,) m
    confidence: float


def weed_mask(image: np.ndarray, cfg: DetectionConfig) -> np.ndarray:
    """Strongly green pixels (leaf palette) against grass and clutter."""
    r = image[:, :, 0].astype(np.int16)
    g = image[:, :, 1].astype(np.int16)
    b = image[:, :, 2].astype(np.int16)
    return (g > cfg.green_min) & (g - r > cfg.green_over_red) \
        & (g - b > cfg.green_over_blue)


def _moments(us: np.ndarray, vs: np.ndarray):
    cu, cv = us.mean(), vs.mean()
    du, dv = us - cu, vs - cv
    cov = np.array([[np.mean(du * du), np.mean(du * dv)],
                    [np.mean(du * dv), np.mean(dv * dv)]])
    evals, evecs = np.linalg.eigh(cov)
    major = evecs[:, 1]
    elongation = math.sqrt(max(evals[1], 1e-12) / max(evals[0], 1e-12))
    return np.array([cu, cv]), major / np.linalg.norm(major), elongation


def segment_leaves(image: np.ndarray, cfg: DetectionConfig) -> list:
    """Connected weed-colored components of sufficient area and elongation."""
    mask = weed_mask(image, cfg)
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        return []
    areas = np.bincount(labels.ravel())
    slices = ndimage.find_objects(labels)
    segments = []
    for idx in range(1, count + 1):
        if areas[idx] < cfg.min_area:
            continue
        sl = slices[idx - 1]
        vs, us = np.nonzero(labels[sl] == idx)
        us = us + sl[1].start
        vs = vs + sl[0].start
        centroid, axis, elongation = _moments(us.astype(float), vs.astype(float))
        if elongation < cfg.min_elongation:
            continue
        segments.append(LeafSegment(
            pixels=np.column_stack([us, vs]),
            centroid=centroid, principal_axis=axis, elongation=elongation))
    return segments


def leaf_line(seg: LeafSegment, cfg: DetectionConfig | None = None) -> Line2D:
    min_elongation = cfg.min_elongation if cfg else 2.0
    if seg.elongation < min_elongation:
        raise AmbiguousDirectionError(
            f"elongation {seg.elongation:.2f} below {min_elongation}")
    return Line2D(point=seg.centroid.copy(), direction=seg.principal_axis.copy())


def intersect_lines(lines, parallel_sin: float = 0.05) -> list:
    """All pairwise intersections, skipping near-parallel pairs."""
    if len(lines) < 2:
        raise InsufficientEvidenceError("need at least two leaf lines")
    points = []
    for i in range(len(lines)):
        for k in range(i + 1, len(lines)):
            d1, d2 = lines[i].direction, lines[k].direction
            cross = d1[0] * d2[1] - d1[1] * d2[0]
            if abs(cross) < parallel_sin:
                continue
            delta = lines[k].point - lines[i].point
            t = (delta[0] * d2[1] - delta[1] * d2[0]) / cross
            points.append(lines[i].point + t * d1)
    if not points:
        raise InsufficientEvidenceError("all line pairs near-parallel")
    return points


def estimate_root(points, tau: float = 20.0):
    """Centroid of the points within tau px of the component-wise median.
    Returns (root, inlier array)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 1:
        raise InsufficientEvidenceError("no intersection points")
    median = np.median(pts, axis=0)
    dist = np.linalg.norm(pts - median, axis=1)
    inliers = pts[dist <= tau]
    if inliers.shape[0] == 0:
        raise InsufficientEvidenceError("all intersection points rejected")
    return inliers.mean(axis=0), inliers


def pixel_to_platform(pixel, depth_image: np.ndarray, cam: CameraModel) -> np.ndarray:
    """Back-project a pixel through the depth image into the platform frame.
    Invalid depth at the pixel falls back to the median of its 5x5 window."""
    u, v = float(pixel[0]), float(pixel[1])
    h, w = depth_image.shape
    ui, vi = int(round(u)), int(round(v))
    if not (0 <= ui < w and 0 <= vi < h):
        raise ValueError("pixel outside image bounds")
    d = float(depth_image[vi, ui])
    if not (d > 0.0 and math.isfinite(d)):
        window = depth_image[max(0, vi - 2):vi + 3, max(0, ui - 2):ui + 3]
        valid = window[(window > 0.0) & np.isfinite(window)]
        if valid.size == 0:
            raise NoDepthError(f"no valid depth near pixel ({ui}, {vi})")
        d = float(np.median(valid))
    p_cam = np.array([(u - cam.cx) / cam.fx * d, (v - cam.cy) / cam.fy * d, d])
    return cam.extrinsic.transform_point(p_cam)


def detect_weed(image: np.ndarray, depth_image: np.ndarray, cam: CameraModel,
                cfg: DetectionConfig) -> WeedHypothesis:
    """Full pipeline: segment, fit lines, intersect, reject outliers,
    back-project.  Raises InsufficientEvidenceError rather than guessing."""
    segments = segment_leaves(image, cfg)
    lines = [leaf_line(s, cfg) for s in segments]
    if len(lines) < cfg.min_lines:
        raise InsufficientEvidenceError(f"only {len(lines)} usable leaf lines")
    points = intersect_lines(lines, cfg.parallel_sin)
    root_pixel, inliers = estimate_root(points, cfg.outlier_tau)
    confidence = inliers.shape[0] / len(points)
    h, w = depth_image.shape
    if not (0 <= root_pixel[0] < w and 0 <= root_pixel[1] < h):
        raise InsufficientEvidenceError("root estimate outside the image")
    root_platform = pixel_to_platform(root_pixel, depth_image, cam)
    return WeedHypothesis(root_pixel=root_pixel, inlier_points=inliers,
                          root_platform=root_platform, confidence=confidence)
