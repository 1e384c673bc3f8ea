"""Gaussian initialization, densification, attribute optimization and section freezing."""

from __future__ import annotations

import logging
from typing import Mapping, Optional, Sequence

import numpy as np

from .config import MapperConfig
from .core import (
    CameraIntrinsics,
    Frame,
    GaussianSet,
    InvalidStateError,
    Pose,
    Section,
    SectionState,
)
from .gradients import Adam, backward
from .losses import mapping_loss
from .renderer import prepare_primitives, splat, world_positions

log = logging.getLogger(__name__)

RADIUS_FLOOR = 1e-6


def init_gaussians(frame: Frame, pose: Pose, intr: CameraIntrinsics, opacity: float = 0.5,
                   mask: Optional[np.ndarray] = None) -> GaussianSet:
    """One Gaussian per valid depth pixel (optionally restricted to ``mask``).

    Color is the pixel color and the radius is depth over the mean focal
    length, i.e. one pixel wide in the frame it is tied to. ``pose`` is not
    needed to place the Gaussian; it only fixes which frame owns it.
    """
    valid = frame.valid_mask if mask is None else (mask & frame.valid_mask)
    vs, us = np.nonzero(valid)
    if len(vs) == 0:
        if mask is None:
            log.warning("frame %d has no valid depth; no Gaussians initialized", frame.index)
        return GaussianSet.empty()
    d = frame.depth[vs, us]
    n = len(vs)
    return GaussianSet(
        frame.rgb[vs, us],
        d / intr.f_mean,
        np.full(n, opacity),
        np.full(n, frame.index),
        np.stack([us, vs], axis=1),
        d,
    )


def densify(frame: Frame, pose: Pose, section: Section, poses, intr: CameraIntrinsics,
            threshold: float = 0.5, opacity: float = 0.5) -> GaussianSet:
    """Add Gaussians where the section's silhouette from ``pose`` falls below ``threshold``."""
    if section.frozen:
        raise InvalidStateError("cannot densify a frozen section")
    if len(section.gaussians):
        render = splat(prepare_primitives(section.gaussians, poses, pose, intr), intr)
        uncovered = render.silhouette < threshold
    else:
        uncovered = np.ones(frame.shape, dtype=bool)
    new = init_gaussians(frame, pose, intr, opacity, mask=uncovered)
    if len(new):
        section.add_gaussians(new)
    return new


class _AttributeStepper:
    """Adam over a section's color, radius and opacity, plus optional extra groups.

    With ``radius_space == "log"`` the radius is stepped as its logarithm, so a
    learning rate is a relative rather than a metric change.
    """

    def __init__(self, gs: GaussianSet, cfg: MapperConfig, extra: Optional[dict] = None):
        self.gs = gs
        self.log = cfg.radius_space == "log"
        lrs = cfg.lrs()
        self.params = {"color": gs.color, "opacity": gs.opacity}
        if self.log:
            self.log_radius = np.log(np.maximum(gs.radius, RADIUS_FLOOR))
            self.params["log_radius"] = self.log_radius
            lrs["log_radius"] = lrs["radius"]
        else:
            self.params["radius"] = gs.radius
        self.params.update(extra or {})
        self.opt = Adam(lrs)

    def step(self, d_color, d_radius, d_opacity, extra: Optional[dict] = None) -> None:
        grads = {"color": d_color, "opacity": d_opacity}
        if self.log:
            grads["log_radius"] = d_radius * self.gs.radius
        else:
            grads["radius"] = d_radius
        grads.update(extra or {})
        self.opt.step(self.params, grads)
        if self.log:
            np.maximum(self.log_radius, np.log(RADIUS_FLOOR), out=self.log_radius)
            np.exp(self.log_radius, out=self.gs.radius)


def _with_pose(poses, index: int, pose: Pose):
    out = dict(poses) if isinstance(poses, Mapping) else dict(enumerate(poses))
    out[index] = pose
    return out


def map_head_frame(
    frame: Frame,
    pose: Pose,
    section: Section,
    context: Sequence[GaussianSet],
    poses,
    intr: CameraIntrinsics,
    cfg: MapperConfig,
    iterations: Optional[int] = None,
) -> tuple[Pose, list[float]]:
    """Fit the new section to its head frame, rendered together with frozen context sets.

    Only the section's attributes (and the head pose when bundle adjustment
    is on) are stepped. Returns the possibly refined head pose and the loss
    curve.
    """
    iterations = cfg.head_iterations if iterations is None else iterations
    gs = section.gaussians
    n_new = len(gs)
    ctx = [c for c in context if c is not None and len(c)]
    vec = pose.vector().copy()
    stepper = _AttributeStepper(gs, cfg, {"rot": vec[:4], "trans": vec[4:]} if cfg.ba_enabled else None)
    losses = []
    for _ in range(iterations):
        head_pose = Pose.from_vector(vec)
        cur_poses = _with_pose(poses, frame.index, head_pose)
        merged = GaussianSet.concat([gs, *ctx])
        prims = prepare_primitives(merged, cur_poses, head_pose, intr)
        render = splat(prims, intr)
        loss, up = mapping_loss(frame, render, cfg.weights, per_channel_ssim=cfg.per_channel_ssim)
        losses.append(loss)
        g = backward(prims, render, up)
        extra = None
        if cfg.ba_enabled:
            gp = g.pose_grad(frame.index, view_is_frame=True)
            extra = {"rot": gp[:4], "trans": gp[4:]}
        stepper.step(g.d_color[:n_new], g.d_radius[:n_new], g.d_opacity[:n_new], extra)
    return Pose.from_vector(vec), losses


def map_regular_frame(
    frame: Frame,
    pose: Pose,
    section: Section,
    poses,
    section_frames: Mapping[int, Frame],
    intr: CameraIntrinsics,
    cfg: MapperConfig,
    rng: np.random.Generator,
    iterations: Optional[int] = None,
) -> tuple[list[float], list[int]]:
    """Densify from the new frame, then replay random earlier views of the section.

    Each iteration renders the section from a view drawn uniformly from the
    section's frames up to and including the current one. Poses are not
    updated. Returns the loss curve and the sampled frame indices.
    """
    iterations = cfg.regular_iterations if iterations is None else iterations
    densify(frame, pose, section, poses, intr, cfg.densify_threshold, cfg.initial_opacity)
    pool = [j for j in section.frame_indices if j <= frame.index]
    gs = section.gaussians
    stepper = _AttributeStepper(gs, cfg)
    losses, picks = [], []
    for _ in range(iterations):
        j = pool[int(rng.integers(len(pool)))]
        picks.append(j)
        target = frame if j == frame.index else section_frames[j]
        prims = prepare_primitives(gs, poses, poses[j], intr)
        render = splat(prims, intr)
        loss, up = mapping_loss(target, render, cfg.weights, per_channel_ssim=cfg.per_channel_ssim)
        losses.append(loss)
        g = backward(prims, render, up)
        stepper.step(g.d_color, g.d_radius, g.d_opacity)
    return losses, picks


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def freeze_section(section: Section, poses, intr: CameraIntrinsics, quantize: bool = True) -> Section:
    """Bake world positions from the final poses and make the section immutable.

    With ``quantize`` the attributes and baked positions are rounded to
    float32, the precision of the on-disk format, so a written and reloaded
    section renders bit-identically to the in-memory one.
    """
    if section.frozen:
        raise InvalidStateError(f"section {section.id} is already frozen")
    gs = section.gaussians
    world, _, _ = world_positions(gs, poses, intr)
    if quantize:
        gs = GaussianSet(_f32(gs.color), _f32(gs.radius), _f32(gs.opacity), gs.owner, gs.pixel,
                         _f32(gs.anchor_depth), _f32(world))
    else:
        gs = GaussianSet(gs.color, gs.radius, gs.opacity, gs.owner, gs.pixel, gs.anchor_depth, world)
    gs.set_readonly()
    section.gaussians = gs
    section.state = SectionState.FROZEN
    section.n_gaussians = len(gs)
    return section
