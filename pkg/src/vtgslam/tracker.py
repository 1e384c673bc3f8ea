"""Camera tracking against a fixed set of Gaussians."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .config import TrackerConfig
from .core import (
    CameraIntrinsics,
    DegenerateViewError,
    Frame,
    GaussianSet,
    InvalidStateError,
    Pose,
    pose_compose,
    pose_inverse,
)
from .gradients import Adam, backward
from .losses import tracking_loss
from .renderer import Poses, prepare_primitives, splat
from .visibility import tracking_mask, visibility_mask, visible_fraction

log = logging.getLogger(__name__)


@dataclass
class RenderTarget:
    """Gaussians a frame is tracked against, plus the views used for its visibility mask."""

    section_ids: tuple[int, ...]
    gaussians: GaussianSet
    poses: Optional[Poses]
    views: list[tuple[Pose, np.ndarray]]


@dataclass
class TrackResult:
    pose: Pose
    loss: float
    losses: list[float]
    coverage: float
    used_visibility: bool
    section_ids: tuple[int, ...] = ()


@dataclass
class CandidateView:
    frame_index: int
    section_id: int
    pose: Pose
    depth: np.ndarray


@dataclass
class Selection:
    section_id: int
    candidates: list[int] = field(default_factory=list)
    pretrack_losses: dict[int, float] = field(default_factory=dict)
    fallback: bool = False
    pose: Optional[Pose] = None
    fractions: dict[int, float] = field(default_factory=dict)


def init_pose(history: Sequence[Pose]) -> Pose:
    """Constant-velocity prediction from the last two poses."""
    if not history:
        raise InvalidStateError("pose history is empty")
    if len(history) == 1:
        return history[-1]
    prev, last = history[-2], history[-1]
    return pose_compose(last, pose_compose(pose_inverse(prev), last))


def optimize_pose(
    frame: Frame,
    start: Pose,
    target: RenderTarget,
    intr: CameraIntrinsics,
    cfg: TrackerConfig,
    iterations: Optional[int] = None,
) -> TrackResult:
    """Adam on the 7 pose parameters minimising the masked tracking loss.

    The mask is rebuilt from the current pose every iteration. The pose with
    the lowest loss seen is returned rather than the last iterate. When the
    first mask is empty the visibility term is dropped once; if that is still
    empty the view is degenerate.
    """
    iterations = cfg.iterations if iterations is None else iterations
    vec = start.vector().copy()
    params = {"rot": vec[:4], "trans": vec[4:]}
    opt = Adam({"rot": cfg.lr_rot, "trans": cfg.lr_trans})
    use_vis = cfg.use_visibility and bool(target.views)
    best_loss, best_pose, coverage = np.inf, start, 0.0
    losses: list[float] = []
    for it in range(iterations + 1):
        pose = Pose.from_vector(vec)
        prims = prepare_primitives(target.gaussians, target.poses, pose, intr)
        render = splat(prims, intr)
        vis = visibility_mask(frame.depth, pose, target.views, intr) if use_vis else None
        mask = tracking_mask(frame, render, vis, cfg.coverage_threshold, cfg.soft_mask)
        if not mask.any():
            if it == 0 and use_vis:
                use_vis = False
                mask = tracking_mask(frame, render, None, cfg.coverage_threshold, cfg.soft_mask)
            if not mask.any():
                if it == 0:
                    raise DegenerateViewError(f"frame {frame.index}: no trackable pixels")
                break
        loss, up = tracking_loss(frame, render, mask, cfg.weights)
        losses.append(loss)
        if it == 0:
            coverage = float((mask > 0).sum()) / max(int(frame.valid_mask.sum()), 1)
        if loss < best_loss:
            best_loss, best_pose = loss, pose
        if it == iterations:
            break
        grads = backward(prims, render, up)
        opt.step(params, {"rot": grads.d_view[:4], "trans": grads.d_view[4:]})
    return TrackResult(best_pose, float(best_loss), losses, coverage, use_vis, target.section_ids)


def candidate_fractions(head: Frame, pose: Pose, candidates: Sequence[CandidateView],
                        intr: CameraIntrinsics) -> dict[int, float]:
    """Visible share of the head frame's valid depth in each candidate view."""
    return {c.frame_index: visible_fraction(head.depth, pose, (c.pose, c.depth), intr) for c in candidates}


def select_overlap_section(
    head: Frame,
    start: Pose,
    candidates: Sequence[CandidateView],
    fetch: Callable[[Sequence[int]], RenderTarget],
    intr: CameraIntrinsics,
    cfg: TrackerConfig,
    frozen_ids: Sequence[int],
) -> Selection:
    """Pick the frozen section a head frame is tracked against.

    Candidate views whose visible fraction exceeds the threshold nominate
    their sections; the earliest few nominated sections are each pre-tracked
    for a handful of iterations and the one with the lowest loss wins. With
    no nominee the most recent frozen section is used.
    """
    if not frozen_ids:
        raise InvalidStateError("no frozen section to select from")
    latest = max(frozen_ids)
    strategy = cfg.overlap_strategy
    if strategy == "nearest":
        return Selection(latest)

    fractions = candidate_fractions(head, start, candidates, intr)
    if strategy == "largest":
        per_section: dict[int, float] = {}
        for c in candidates:
            per_section[c.section_id] = max(per_section.get(c.section_id, 0.0), fractions[c.frame_index])
        if not per_section or max(per_section.values()) <= 0:
            return Selection(latest, fallback=True, fractions=fractions)
        best = max(sorted(per_section), key=lambda s: per_section[s])
        return Selection(best, fractions=fractions)

    kept = sorted({c.section_id for c in candidates if fractions[c.frame_index] > cfg.overlap_threshold})
    nominees = kept[: cfg.max_candidate_sections]
    if not nominees:
        log.info("frame %d: no candidate view above overlap threshold, using section %d", head.index, latest)
        return Selection(latest, fallback=True, fractions=fractions)
    if len(nominees) == 1:
        return Selection(nominees[0], candidates=nominees, fractions=fractions)
    losses: dict[int, float] = {}
    poses: dict[int, Pose] = {}
    for sid in nominees:
        try:
            res = optimize_pose(head, start, fetch([sid]), intr, cfg, cfg.pretrack_iterations)
        except DegenerateViewError:
            continue
        losses[sid], poses[sid] = res.loss, res.pose
    if not losses:
        return Selection(latest, candidates=nominees, fallback=True, fractions=fractions)
    best = min(losses, key=lambda s: (losses[s], s))
    return Selection(best, candidates=nominees, pretrack_losses=losses, pose=poses[best], fractions=fractions)
