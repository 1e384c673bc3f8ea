"""Trajectory and rendering metrics, plus whole-run evaluation and the report file."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .core import CameraIntrinsics, Frame, GaussianSet, InvalidInputError, Pose, Section
from .losses import ssim as _ssim
from .renderer import render_view

UNDEFINED = float("nan")


def _positions(traj: Sequence[Union[Pose, np.ndarray]]) -> np.ndarray:
    return np.array([p.t if isinstance(p, Pose) else np.asarray(p, dtype=np.float64) for p in traj], dtype=np.float64)


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation and translation (no scale) taking ``src`` points onto ``dst``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def ate_rmse(estimated: Sequence, ground_truth: Sequence) -> float:
    """RMSE of camera positions after optimal rigid alignment, in centimeters."""
    if len(estimated) != len(ground_truth):
        raise InvalidInputError(f"trajectory lengths differ: {len(estimated)} vs {len(ground_truth)}")
    if len(estimated) < 2:
        raise InvalidInputError("ATE needs at least two poses")
    est, gt = _positions(estimated), _positions(ground_truth)
    R, t = rigid_align(est, gt)
    resid = gt - (est @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(resid**2, axis=1))) * 100.0)


def final_drift(estimated: Sequence[Pose], ground_truth: Sequence[Pose]) -> float:
    """Position error of the last pose in cm with both trajectories expressed relative to their first pose."""
    if len(estimated) != len(ground_truth) or not estimated:
        raise InvalidInputError("trajectories must be non-empty and of equal length")
    e = estimated[0].inverse().compose(estimated[-1])
    g = ground_truth[0].inverse().compose(ground_truth[-1])
    return float(np.linalg.norm(e.t - g.t) * 100.0)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; ``inf`` when they are identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    return _ssim(a, b)[0]


def depth_l1(rendered_depth: np.ndarray, gt_depth: np.ndarray, mask: np.ndarray,
             silhouette: Optional[np.ndarray] = None) -> float:
    """Mean absolute depth error over ``mask`` in centimeters.

    With ``silhouette`` the rendered (accumulated) depth is first divided by
    it where coverage exceeds 0.5. An empty mask yields ``UNDEFINED``.
    """
    rendered_depth = np.asarray(rendered_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if rendered_depth.shape != gt_depth.shape or mask.shape != gt_depth.shape:
        raise InvalidInputError("depth and mask shapes must match")
    if not mask.any():
        return UNDEFINED
    if silhouette is not None:
        rendered_depth = rendered_depth.copy()
        ok = silhouette > 0.5
        rendered_depth[ok] = rendered_depth[ok] / silhouette[ok]
    return float(np.mean(np.abs(rendered_depth[mask] - gt_depth[mask])) * 100.0)


@dataclass
class FrameMetrics:
    index: int
    psnr: float
    ssim: float
    depth_l1: float


@dataclass
class EvalReport:
    ate_rmse_cm: float
    psnr_db: float
    ssim: float
    depth_l1_cm: float
    total_gaussians: int
    max_resident_gaussians: int
    runtime_track_s_per_frame: float = UNDEFINED
    runtime_map_s_per_frame: float = UNDEFINED
    frames: list[FrameMetrics] = field(default_factory=list)

    METRIC_KEYS = ("ate_rmse_cm", "psnr_db", "ssim", "depth_l1_cm", "total_gaussians", "max_resident_gaussians")
    TIMING_KEYS = ("runtime_track_s_per_frame", "runtime_map_s_per_frame")

    def lines(self, keys: Sequence[str]) -> list[str]:
        return [f"{k}={format_value(getattr(self, k))}" for k in keys]


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "undefined"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def _mean(values: Iterable[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return UNDEFINED
    if any(math.isinf(v) for v in vals):
        return math.inf
    return float(np.mean(vals))


def evaluate_frames(
    frames: Iterable[Frame],
    poses: Sequence[Pose],
    section_of: Callable[[int], Section],
    fetch: Callable[[int], Section],
    intr: CameraIntrinsics,
    every: int = 5,
) -> list[FrameMetrics]:
    """Render every ``every``-th frame from its estimated pose and score it.

    The render uses the frame's own section together with that section's
    overlap section.
    """
    out = []
    for frame in frames:
        if frame.index % every:
            continue
        own = section_of(frame.index)
        ids = [own.id] + ([own.overlap_id] if own.overlap_id is not None else [])
        sets: list[GaussianSet] = [fetch(sid).gaussians for sid in ids]
        render, _, _ = render_view(sets, poses, poses[frame.index], intr)
        mask = frame.valid_mask
        out.append(FrameMetrics(
            frame.index,
            psnr(frame.rgb, np.clip(render.color, 0.0, 1.0)),
            ssim(frame.rgb, render.color),
            depth_l1(render.depth, frame.depth, mask, render.silhouette),
        ))
    return out


def summarize(per_frame: Sequence[FrameMetrics], ate_cm: float, total: int, peak: int,
              track_s: float = UNDEFINED, map_s: float = UNDEFINED) -> EvalReport:
    return EvalReport(
        ate_cm,
        _mean(m.psnr for m in per_frame),
        _mean(m.ssim for m in per_frame),
        _mean(m.depth_l1 for m in per_frame),
        int(total),
        int(peak),
        track_s,
        map_s,
        list(per_frame),
    )


def evaluate_system(system, frames: Iterable[Frame], ground_truth: Optional[Sequence[Pose]] = None,
                    every: Optional[int] = None) -> EvalReport:
    """Evaluate a finished :class:`~vtgslam.pipeline.SlamSystem` against its input frames."""
    every = every or system.config.eval_every
    n = system.config.section_length
    reg = system.registry
    per_frame = evaluate_frames(frames, system.poses, lambda i: reg.sections[i // n], reg.fetch, system.intr, every)
    ate = UNDEFINED
    if ground_truth is not None and len(ground_truth) == len(system.poses) >= 2:
        ate = ate_rmse(system.poses, ground_truth)
    nf = max(len(system.poses), 1)
    return summarize(per_frame, ate, reg.total_gaussians(), system.peak_resident,
                     system.track_time / nf, system.map_time / nf)


def write_report(report: EvalReport, path: Union[str, Path], config_lines: Sequence[tuple[str, str]] = (),
                 timing_path: Optional[Union[str, Path]] = None) -> None:
    """Write the key=value report; wall-clock timings go to a separate file so the report is reproducible."""
    lines = report.lines(EvalReport.METRIC_KEYS)
    lines.append("depth_l1_protocol=splat_depth_at_training_views")
    lines.append(f"eval_frames={len(report.frames)}")
    lines.extend(f"config.{k}={v}" for k, v in config_lines)
    Path(path).write_text("\n".join(lines) + "\n")
    if timing_path is not None:
        Path(timing_path).write_text("\n".join(report.lines(EvalReport.TIMING_KEYS)) + "\n")


def read_report(path: Union[str, Path]) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def per_frame_table(metrics: Sequence[FrameMetrics]) -> str:
    rows = ["frame\tpsnr_db\tssim\tdepth_l1_cm"]
    rows += [f"{m.index}\t{format_value(m.psnr)}\t{format_value(m.ssim)}\t{format_value(m.depth_l1)}" for m in metrics]
    return "\n".join(rows) + "\n"


def section_lookup(sections: Mapping[int, Section], section_length: int) -> Callable[[int], Section]:
    return lambda i: sections[i // section_length]
