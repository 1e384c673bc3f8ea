"""Depth-band visibility tests, section visibility masks and the tracking mask."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import CameraIntrinsics, Frame, Pose, back_project_pixels, project_points
from .renderer import RenderOutput

VISIBILITY_TOLERANCE = 0.01
COVERAGE_THRESHOLD = 0.99
STRIDE_AREA = 640 * 480


def interpolate_depth(depth: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear depth lookup; NaN outside the image or next to any invalid pixel."""
    h, w = depth.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.full(u.shape, np.nan)
    ok = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    if not ok.any():
        return out
    uu, vv = u[ok], v[ok]
    x0 = np.minimum(np.floor(uu).astype(np.int64), w - 2) if w > 1 else np.zeros(len(uu), np.int64)
    y0 = np.minimum(np.floor(vv).astype(np.int64), h - 2) if h > 1 else np.zeros(len(vv), np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = uu - x0
    fy = vv - y0
    d00, d01 = depth[y0, x0], depth[y0, x1]
    d10, d11 = depth[y1, x0], depth[y1, x1]
    val = (d00 * (1 - fx) + d01 * fx) * (1 - fy) + (d10 * (1 - fx) + d11 * fx) * fy
    valid = (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    out[ok] = np.where(valid, val, np.nan)
    return out


def visible_points(points: np.ndarray, view: Pose, view_depth: np.ndarray, intr: CameraIntrinsics,
                   tolerance: float = VISIBILITY_TOLERANCE) -> np.ndarray:
    """Vectorized :func:`visible` over an (n, 3) array of world points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    u, v, z = project_points(points, intr, view)
    d = interpolate_depth(view_depth, u, v)
    with np.errstate(invalid="ignore"):
        return np.isfinite(d) & (z > 0) & (np.abs(z - d) <= tolerance * d)


def visible(point, view: Pose, view_depth: np.ndarray, intr: CameraIntrinsics,
            tolerance: float = VISIBILITY_TOLERANCE) -> bool:
    """Whether a world point projects into ``view`` at a depth within 1% of the stored depth."""
    return bool(visible_points(np.asarray(point)[None], view, view_depth, intr, tolerance)[0])


def visibility_mask(frame_depth: np.ndarray, pose: Pose, views: Sequence[tuple[Pose, np.ndarray]],
                    intr: CameraIntrinsics, tolerance: float = VISIBILITY_TOLERANCE,
                    stride: int | None = None) -> np.ndarray:
    """Union over ``views`` of the per-pixel visibility of ``frame_depth`` back-projected from ``pose``.

    Large images are tested on a stride-2 grid and filled in by nearest
    neighbour; smaller ones are tested at every pixel.
    """
    h, w = frame_depth.shape
    if stride is None:
        stride = 2 if h * w > STRIDE_AREA else 1
    sub = frame_depth[::stride, ::stride]
    vs, us = np.nonzero(sub > 0)
    mask_sub = np.zeros(sub.shape, dtype=bool)
    if len(vs) and views:
        pts = pose.transform(back_project_pixels(us * stride, vs * stride, sub[vs, us], intr))
        hit = np.zeros(len(vs), dtype=bool)
        for view_pose, view_depth in views:
            todo = ~hit
            if not todo.any():
                break
            hit[todo] = visible_points(pts[todo], view_pose, view_depth, intr, tolerance)
        mask_sub[vs, us] = hit
    if stride == 1:
        return mask_sub
    full = np.repeat(np.repeat(mask_sub, stride, axis=0), stride, axis=1)[:h, :w]
    return full & (frame_depth > 0)


def section_visibility_mask(frame: Frame, pose: Pose, section_views: Sequence[tuple[Pose, np.ndarray]],
                            intr: CameraIntrinsics, tolerance: float = VISIBILITY_TOLERANCE) -> np.ndarray:
    """Visibility of ``frame`` to a section, given the section's head, middle and last views."""
    return visibility_mask(frame.depth, pose, section_views, intr, tolerance)


def visible_fraction(frame_depth: np.ndarray, pose: Pose, view: tuple[Pose, np.ndarray], intr: CameraIntrinsics,
                     tolerance: float = VISIBILITY_TOLERANCE) -> float:
    """Share of the frame's valid pixels that are visible from one other view."""
    n_valid = int((frame_depth > 0).sum())
    if n_valid == 0:
        return 0.0
    return float(visibility_mask(frame_depth, pose, [view], intr, tolerance).sum()) / n_valid


def tracking_mask(frame: Frame, render: RenderOutput, vis_mask: np.ndarray | None,
                  coverage: float = COVERAGE_THRESHOLD, soft: bool = False) -> np.ndarray:
    """Pixels with valid depth, confidently covered by the render and visible to the section.

    With ``soft`` the coverage test is replaced by the silhouette itself as a
    per-pixel weight.
    """
    if soft:
        weight = np.where(frame.valid_mask, render.silhouette, 0.0)
        return weight if vis_mask is None else weight * vis_mask
    mask = frame.valid_mask & (render.silhouette > coverage)
    if vis_mask is not None:
        mask &= vis_mask
    return mask
