"""Splatting of isotropic view-tied Gaussians into color, depth and silhouette.

Two forward paths share one compositing model:

* :func:`splat` with ``tiled=True`` bins primitives into 16x16 pixel tiles
  and composites each tile in a compiled kernel.
* :func:`splat_naive` walks the full depth-sorted primitive list for every
  pixel at once with numpy. It is slow and exists as the reference the tiled
  path is checked against.

Per pixel, primitives are composited front to back with
``alpha = min(opacity * exp(-d^2 / (2 sigma^2)), 0.999)``, evaluation is
truncated beyond ``3 sigma`` and compositing stops once transmittance falls
below ``1e-4``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numba
import numpy as np

from .core import CameraIntrinsics, GaussianSet, Pose, pose_of

log = logging.getLogger(__name__)

# the bundled TBB is too old for numba; the built-in pool is deterministic and quiet
numba.config.THREADING_LAYER = "workqueue"

NEAR_CLIP = 0.01
MIN_SIGMA_PX = 0.3
TRUNCATION = 3.0
ALPHA_MAX = 0.999
T_MIN = 1e-4
TILE = 16

Poses = Union[Sequence[Pose], Mapping[int, Pose]]


@dataclass
class Primitives:
    """Depth-sorted screen-space splats plus what backward needs to chain to 3D."""

    center: np.ndarray  # (n, 2) u, v in pixels
    sigma: np.ndarray  # (n,) pixels, after the low-pass clamp
    z: np.ndarray  # (n,) camera depth
    color: np.ndarray  # (n, 3)
    opacity: np.ndarray  # (n,)
    source: np.ndarray  # (n,) index into the input GaussianSet
    cam: np.ndarray  # (n, 3) camera-space centers
    world: np.ndarray  # (n, 3)
    anchor: np.ndarray  # (n, 3) center in the owner camera frame
    owner: np.ndarray  # (n,) owner frame, -1 when the position is baked
    radius: np.ndarray  # (n,)
    sigma_clamped: np.ndarray  # (n,) bool
    n_source: int
    view: Pose
    intr: CameraIntrinsics
    owner_poses: Optional[Poses] = None

    def __len__(self):
        return len(self.z)


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    silhouette: np.ndarray
    raster: Optional["_TileRaster"] = field(default=None, repr=False)

    @classmethod
    def background(cls, intr: CameraIntrinsics) -> "RenderOutput":
        h, w = intr.shape
        return cls(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)))

    def normalized_depth(self, min_silhouette: float = 0.5) -> np.ndarray:
        """Depth divided by silhouette where coverage exceeds ``min_silhouette``, else 0."""
        out = np.zeros_like(self.depth)
        ok = self.silhouette > min_silhouette
        out[ok] = self.depth[ok] / self.silhouette[ok]
        return out


@dataclass
class _TileRaster:
    offsets: np.ndarray
    prims: np.ndarray
    last: np.ndarray
    final_t: np.ndarray


# ---------------------------------------------------------------------------
# Primitive preparation


def world_positions(gaussians: GaussianSet, owner_poses: Optional[Poses], intr: CameraIntrinsics):
    """(world positions, anchor camera points, owner-or--1) for a Gaussian set.

    Rows with a finite bake cache use it and report owner -1; the others are
    placed by their owner frame's pose.
    """
    anchor = gaussians.anchor_points_cam(intr)
    owner = gaussians.owner.copy()
    if gaussians.baked is None:
        world = np.empty_like(anchor)
        live = np.ones(len(gaussians), dtype=bool)
    else:
        world = gaussians.baked.copy()
        live = np.isnan(world[:, 0])
        owner[~live] = -1
    for o in np.unique(owner[live]):
        sel = live & (owner == o)
        world[sel] = pose_of(owner_poses, int(o)).transform(anchor[sel])
    return world, anchor, owner


def prepare_primitives(
    gaussians: GaussianSet,
    owner_poses: Optional[Poses],
    view: Pose,
    intr: CameraIntrinsics,
) -> Primitives:
    """Project Gaussians into ``view``, cull and depth-sort them.

    World positions come from the bake cache when present, otherwise from the
    owning frame's pose. Ties in depth are broken by owner frame, then by the
    anchor's pixel index, so the result does not depend on input order.
    """
    world, anchor, owner = world_positions(gaussians, owner_poses, intr)
    cam = view.inverse_transform(world) if len(world) else np.zeros((0, 3))
    z = cam[:, 2]
    keep = z > NEAR_CLIP
    zs = np.where(keep, z, 1.0)
    u0 = intr.fx * cam[:, 0] / zs + intr.cx
    v0 = intr.fy * cam[:, 1] / zs + intr.cy
    raw_sigma = intr.f_mean * gaussians.radius / zs
    clamped = raw_sigma < MIN_SIGMA_PX
    sigma = np.where(clamped, MIN_SIGMA_PX, raw_sigma)
    reach = TRUNCATION * sigma
    w, h = intr.width, intr.height
    x0 = np.maximum(np.ceil(u0 - reach), 0)
    x1 = np.minimum(np.floor(u0 + reach), w - 1)
    y0 = np.maximum(np.ceil(v0 - reach), 0)
    y1 = np.minimum(np.floor(v0 + reach), h - 1)
    keep &= (x0 <= x1) & (y0 <= y1)

    idx = np.nonzero(keep)[0]
    pix_index = gaussians.pixel[idx, 1] * w + gaussians.pixel[idx, 0]
    order = idx[np.lexsort((pix_index, gaussians.owner[idx], z[idx]))]
    return Primitives(
        center=np.ascontiguousarray(np.stack([u0[order], v0[order]], axis=1)),
        sigma=np.ascontiguousarray(sigma[order]),
        z=np.ascontiguousarray(z[order]),
        color=np.ascontiguousarray(gaussians.color[order]),
        opacity=np.ascontiguousarray(gaussians.opacity[order]),
        source=order,
        cam=cam[order],
        world=world[order],
        anchor=anchor[order],
        owner=owner[order],
        radius=gaussians.radius[order],
        sigma_clamped=clamped[order],
        n_source=len(gaussians),
        view=view,
        intr=intr,
        owner_poses=owner_poses,
    )


# ---------------------------------------------------------------------------
# Compiled tile kernels


@numba.njit(cache=True)
def _bin_tiles(cu, cv, sigma, width, height, tile):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    n = cu.shape[0]
    tx0 = np.empty(n, np.int64)
    tx1 = np.empty(n, np.int64)
    ty0 = np.empty(n, np.int64)
    ty1 = np.empty(n, np.int64)
    counts = np.zeros(ntx * nty + 1, np.int64)
    for p in range(n):
        r = TRUNCATION * sigma[p]
        x0 = max(np.ceil(cu[p] - r), 0.0)
        x1 = min(np.floor(cu[p] + r), width - 1.0)
        y0 = max(np.ceil(cv[p] - r), 0.0)
        y1 = min(np.floor(cv[p] + r), height - 1.0)
        if x0 > x1 or y0 > y1:
            tx0[p] = 1
            tx1[p] = 0
            ty0[p] = 1
            ty1[p] = 0
            continue
        tx0[p] = int(x0) // tile
        tx1[p] = int(x1) // tile
        ty0[p] = int(y0) // tile
        ty1[p] = int(y1) // tile
        for ty in range(ty0[p], ty1[p] + 1):
            for tx in range(tx0[p], tx1[p] + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    prims = np.empty(offsets[-1], np.int64)
    # primitives are visited in depth order, so each tile list stays sorted
    for p in range(n):
        for ty in range(ty0[p], ty1[p] + 1):
            for tx in range(tx0[p], tx1[p] + 1):
                t = ty * ntx + tx
                prims[fill[t]] = p
                fill[t] += 1
    return offsets, prims


@numba.njit(cache=True, inline="always")
def _tile_span(c, r, lo, hi):
    a = max(np.ceil(c - r), lo)
    b = min(np.floor(c + r), hi)
    return int(a), int(b)


@numba.njit(cache=True, parallel=True)
def _forward_tiles(cu, cv, sigma, z, color, opacity, offsets, prims, width, height, tile):
    """Composite each tile by walking its depth-ordered list once.

    Every primitive only touches the pixels of its 3-sigma box, so the per
    pixel order of operations is the same as the full per-pixel walk.
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    out_c = np.zeros((height, width, 3))
    out_d = np.zeros((height, width))
    out_s = np.zeros((height, width))
    out_t = np.ones((height, width))
    last = np.zeros((height, width), np.int64)
    for t in numba.prange(ntx * nty):
        tyi = t // ntx
        txi = t - tyi * ntx
        xa = txi * tile
        ya = tyi * tile
        xb = min(xa + tile, width) - 1
        yb = min(ya + tile, height) - 1
        start = offsets[t]
        stop = offsets[t + 1]
        for py in range(ya, yb + 1):
            for px in range(xa, xb + 1):
                last[py, px] = stop
        done = np.zeros((tile, tile), np.bool_)
        for k in range(start, stop):
            p = prims[k]
            s = sigma[p]
            reach = TRUNCATION * s
            x0, x1 = _tile_span(cu[p], reach, xa, xb)
            y0, y1 = _tile_span(cv[p], reach, ya, yb)
            for py in range(y0, y1 + 1):
                dy = py - cv[p]
                for px in range(x0, x1 + 1):
                    if done[py - ya, px - xa]:
                        continue
                    dx = px - cu[p]
                    d2 = dx * dx + dy * dy
                    if d2 > TRUNCATION * TRUNCATION * s * s:
                        continue
                    a = opacity[p] * np.exp(-d2 / (2.0 * s * s))
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    T = out_t[py, px]
                    wgt = a * T
                    out_c[py, px, 0] += wgt * color[p, 0]
                    out_c[py, px, 1] += wgt * color[p, 1]
                    out_c[py, px, 2] += wgt * color[p, 2]
                    out_d[py, px] += wgt * z[p]
                    out_s[py, px] += wgt
                    T *= 1.0 - a
                    out_t[py, px] = T
                    if T < T_MIN:
                        done[py - ya, px - xa] = True
                        last[py, px] = k + 1
    return out_c, out_d, out_s, out_t, last


@numba.njit(cache=True, parallel=True)
def _backward_tiles(cu, cv, sigma, z, color, opacity, offsets, prims, last, final_t, g_c, g_d, g_s,
                    width, height, tile):
    """Per-pair screen-space gradients; column layout u, v, sigma, z, r, g, b, opacity.

    Walks each tile list back to front, recovering the incoming transmittance
    of every contribution by dividing out its alpha.
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    pair_grad = np.zeros((prims.shape[0], 8))
    for t in numba.prange(ntx * nty):
        tyi = t // ntx
        txi = t - tyi * ntx
        xa = txi * tile
        ya = tyi * tile
        xb = min(xa + tile, width) - 1
        yb = min(ya + tile, height) - 1
        start = offsets[t]
        stop = offsets[t + 1]
        T = np.empty((tile, tile))
        suffix = np.zeros((tile, tile))
        for py in range(ya, yb + 1):
            for px in range(xa, xb + 1):
                T[py - ya, px - xa] = final_t[py, px]
        for k in range(stop - 1, start - 1, -1):
            p = prims[k]
            s = sigma[p]
            reach = TRUNCATION * s
            x0, x1 = _tile_span(cu[p], reach, xa, xb)
            y0, y1 = _tile_span(cv[p], reach, ya, yb)
            for py in range(y0, y1 + 1):
                dy = py - cv[p]
                for px in range(x0, x1 + 1):
                    if k >= last[py, px]:
                        continue
                    dx = px - cu[p]
                    d2 = dx * dx + dy * dy
                    if d2 > TRUNCATION * TRUNCATION * s * s:
                        continue
                    g = np.exp(-d2 / (2.0 * s * s))
                    a = opacity[p] * g
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    ly = py - ya
                    lx = px - xa
                    Tk = T[ly, lx] / (1.0 - a)
                    T[ly, lx] = Tk
                    gd = g_d[py, px]
                    gc0 = g_c[py, px, 0]
                    gc1 = g_c[py, px, 1]
                    gc2 = g_c[py, px, 2]
                    f = color[p, 0] * gc0 + color[p, 1] * gc1 + color[p, 2] * gc2 + z[p] * gd + g_s[py, px]
                    wgt = a * Tk
                    d_alpha = Tk * f - suffix[ly, lx] / (1.0 - a)
                    suffix[ly, lx] += wgt * f
                    pair_grad[k, 3] += wgt * gd
                    pair_grad[k, 4] += wgt * gc0
                    pair_grad[k, 5] += wgt * gc1
                    pair_grad[k, 6] += wgt * gc2
                    if clamped:
                        continue
                    pair_grad[k, 7] += g * d_alpha
                    dg = opacity[p] * d_alpha * g
                    pair_grad[k, 0] += dg * dx / (s * s)
                    pair_grad[k, 1] += dg * dy / (s * s)
                    pair_grad[k, 2] += dg * d2 / (s * s * s)
    return pair_grad


# ---------------------------------------------------------------------------
# Forward


def splat(prims: Primitives, intr: CameraIntrinsics, tiled: bool = True) -> RenderOutput:
    """Composite depth-sorted primitives into color, depth and silhouette."""
    if not tiled:
        return splat_naive(prims, intr)
    if len(prims) == 0:
        return RenderOutput.background(intr)
    cu = np.ascontiguousarray(prims.center[:, 0])
    cv = np.ascontiguousarray(prims.center[:, 1])
    offsets, pairs = _bin_tiles(cu, cv, prims.sigma, intr.width, intr.height, TILE)
    color, depth, sil, final_t, last = _forward_tiles(
        cu, cv, prims.sigma, prims.z, prims.color, prims.opacity, offsets, pairs, intr.width, intr.height, TILE
    )
    return RenderOutput(color, depth, sil, _TileRaster(offsets, pairs, last, final_t))


def splat_naive(prims: Primitives, intr: CameraIntrinsics, return_trace: bool = False):
    """Reference compositor: every pixel against the whole sorted list.

    With ``return_trace`` also returns per-primitive alpha, incoming
    transmittance and an ``inside`` mask, each shaped (n, H, W).
    """
    h, w = intr.shape
    V, U = np.mgrid[0:h, 0:w].astype(np.float64)
    T = np.ones((h, w))
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    sil = np.zeros((h, w))
    done = np.zeros((h, w), dtype=bool)
    n = len(prims)
    if return_trace:
        alphas = np.zeros((n, h, w))
        trans = np.zeros((n, h, w))
        insides = np.zeros((n, h, w), dtype=bool)
    for p in range(n):
        s = prims.sigma[p]
        d2 = (U - prims.center[p, 0]) ** 2 + (V - prims.center[p, 1]) ** 2
        inside = (d2 <= TRUNCATION * TRUNCATION * s * s) & ~done
        a = np.minimum(prims.opacity[p] * np.exp(-d2 / (2 * s * s)), ALPHA_MAX)
        a = np.where(inside, a, 0.0)
        wgt = a * T
        color += wgt[..., None] * prims.color[p]
        depth += wgt * prims.z[p]
        sil += wgt
        if return_trace:
            alphas[p] = a
            trans[p] = T
            insides[p] = inside
        T = T * (1 - a)
        done |= inside & (T < T_MIN)
    out = RenderOutput(color, depth, sil)
    if return_trace:
        return out, (alphas, trans, insides)
    return out


def render_view(
    section_gaussians: Sequence[GaussianSet],
    poses: Optional[Poses],
    view: Pose,
    intr: CameraIntrinsics,
    tiled: bool = True,
):
    """Render the union of several Gaussian sets from ``view``.

    Returns ``(RenderOutput, Primitives, merged_set)``; the merged set's index
    space is the one gradients are reported in.
    """
    merged = GaussianSet.concat([g for g in section_gaussians if g is not None and len(g)])
    prims = prepare_primitives(merged, poses, view, intr)
    return splat(prims, intr, tiled=tiled), prims, merged


# ---------------------------------------------------------------------------
# Debug images


def save_render_png(out: RenderOutput, prefix: Union[str, Path], intr: CameraIntrinsics) -> list[Path]:
    """Write 8-bit color, 16-bit depth (scaled by ``intr.depth_scale``) and silhouette PNGs."""
    from PIL import Image

    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = [Path(f"{prefix}_color.png"), Path(f"{prefix}_depth.png"), Path(f"{prefix}_silhouette.png")]
    Image.fromarray(np.clip(np.round(out.color * 255), 0, 255).astype(np.uint8)).save(paths[0])
    depth = np.clip(np.round(out.normalized_depth() * intr.depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(depth).save(paths[1])
    Image.fromarray(np.clip(np.round(out.silhouette * 255), 0, 255).astype(np.uint8)).save(paths[2])
    return paths
