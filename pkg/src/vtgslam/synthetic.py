"""Ray-traced RGB-D sequences of a textured box room, for desk-scale runs.

The room is the axis-aligned box ``[-sx/2, sx/2] x [-sy/2, sy/2] x [-sz/2, sz/2]``
seen from inside; optional occluder boxes stand in it. World ``+y`` points
down so that an unrotated camera (x right, y down, z forward) is upright.
Color is a smooth solid texture: a seeded sum of random 3D sinusoids, so
every surface point has a well-defined color with no seams.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import CameraIntrinsics, Frame, InvalidInputError, Pose, quat_from_matrix
from .datasets import quantize_frame, write_tum

TRAJECTORIES = ("orbit", "loop", "corridor")


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass
class SceneSpec:
    size: tuple[float, float, float] = (4.0, 3.0, 5.0)
    texture_seed: int = 0
    n_waves: int = 24
    min_wavelength: float = 0.4
    max_wavelength: float = 2.0
    occluders: list[Box] = field(default_factory=list)


@dataclass
class SequenceSpec:
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: str = "orbit"
    frames: int = 100
    width: int = 64
    height: int = 64
    fov_deg: float = 70.0
    arc_deg: float = 120.0
    radius: float = 0.5
    travel: float = 1.5
    fps: float = 30.0
    supersample: int = 3
    noise_fraction: float = 0.0
    noise_sigma: float = 0.0
    noise_seed: int = 0
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.frames < 1:
            raise InvalidInputError("frames must be >= 1")
        if self.trajectory not in TRAJECTORIES:
            raise InvalidInputError(f"trajectory must be one of {TRAJECTORIES}")

    def intrinsics(self) -> CameraIntrinsics:
        f = float(0.5 * self.width / np.tan(np.radians(self.fov_deg) / 2))
        return CameraIntrinsics(f, f, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height,
                                self.depth_scale)


# ---------------------------------------------------------------------------
# Geometry


def look_at(eye, target, down=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` with image-down along ``down``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(quat_from_matrix(np.stack([x, y, z], axis=1)), eye)


def ray_exit_box(origin: np.ndarray, dirs: np.ndarray, lo, hi) -> np.ndarray:
    """Distance (in units of ``dirs``) to where rays from inside a box leave it."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hi = (hi - origin) / dirs
        t_lo = (lo - origin) / dirs
    t = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
    return t.min(axis=-1)


def ray_enter_box(origin: np.ndarray, dirs: np.ndarray, lo, hi) -> np.ndarray:
    """Entry distance into a box for rays starting outside it; ``inf`` on a miss."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    parallel = dirs == 0
    inside_slab = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


class Texture:
    """Seeded solid texture: per-channel sums of random plane waves squashed into (0, 1)."""

    def __init__(self, spec: SceneSpec):
        rng = np.random.default_rng(spec.texture_seed)
        n = spec.n_waves
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        wavelength = np.exp(rng.uniform(np.log(spec.min_wavelength), np.log(spec.max_wavelength), n))
        self.k = dirs * (2 * np.pi / wavelength)[:, None]
        self.phase = rng.uniform(0, 2 * np.pi, n)
        self.mix = rng.normal(size=(n, 3)) / np.sqrt(n) * 1.6
        self.base = rng.uniform(0.35, 0.65, 3)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        waves = np.sin(points @ self.k.T + self.phase)
        return np.clip(self.base + 0.3 * np.tanh(waves @ self.mix), 0.0, 1.0)


def trace(scene: SceneSpec, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Ray parameter of the first hit and the hit points for rays ``origin + t * dirs``."""
    s = np.asarray(scene.size, dtype=np.float64) / 2
    t = ray_exit_box(origin, dirs, -s, s)
    for box in scene.occluders:
        t = np.minimum(t, ray_enter_box(origin, dirs, box.lo, box.hi))
    return t, origin + t[..., None] * dirs


# ---------------------------------------------------------------------------
# Trajectories


def trajectory(spec: SequenceSpec) -> list[Pose]:
    """Analytic smooth camera path.

    ``orbit`` sweeps the arc once. ``loop`` sweeps it out and back, starting
    and ending at rest at the same pose, so the return leg revisits every
    place seen on the way out.
    """
    n = spec.frames
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    poses = []
    for u in s:
        if spec.trajectory == "corridor":
            x = spec.travel * (u - 0.5)
            eye = np.array([x, 0.05 * np.sin(2 * np.pi * u), -0.8 + 0.2 * np.sin(np.pi * u)])
            target = eye + np.array([0.15 * np.sin(2 * np.pi * u), 0.1, 2.0])
        else:
            if spec.trajectory == "loop":
                theta = np.radians(spec.arc_deg) * (1 - np.cos(2 * np.pi * u)) / 2
            else:
                theta = np.radians(spec.arc_deg) * u
            eye = np.array([spec.radius * np.sin(theta), 0.1 * np.sin(3 * theta),
                            -spec.radius * np.cos(theta) + 0.3])
            ahead = theta + 0.6
            target = np.array([2.0 * np.sin(ahead), 0.3 + 0.15 * np.cos(2 * theta), -2.0 * np.cos(ahead) + 0.3])
        poses.append(look_at(eye, target))
    return poses


# ---------------------------------------------------------------------------
# Rendering


def render_frame(scene: SceneSpec, texture: Texture, pose: Pose, intr: CameraIntrinsics, supersample: int = 3
                 ) -> tuple[np.ndarray, np.ndarray]:
    """(rgb, z-depth) of the room from ``pose``; color is averaged over a supersample grid."""
    h, w = intr.shape
    vs, us = np.mgrid[0:h, 0:w].astype(np.float64)
    R = pose.R
    cam = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1)
    # a camera ray with unit z component gives the z-depth directly as its parameter
    depth, _ = trace(scene, pose.t, cam @ R.T)
    offsets = (np.arange(supersample) + 0.5) / supersample - 0.5
    rgb = np.zeros((h, w, 3))
    for dv in offsets:
        for du in offsets:
            c = np.stack([(us + du - intr.cx) / intr.fx, (vs + dv - intr.cy) / intr.fy, np.ones_like(us)], axis=-1)
            _, pts = trace(scene, pose.t, c @ R.T)
            rgb += texture(pts)
    return rgb / supersample**2, depth


def generate(spec: SequenceSpec) -> tuple[list[Frame], list[Pose], CameraIntrinsics]:
    """Frames (quantized exactly as stored on disk), ground-truth poses and intrinsics."""
    intr = spec.intrinsics()
    texture = Texture(spec.scene)
    poses = trajectory(spec)
    rng = np.random.default_rng(spec.noise_seed)
    frames = []
    for i, pose in enumerate(poses):
        rgb, depth = render_frame(spec.scene, texture, pose, intr, spec.supersample)
        if spec.noise_fraction > 0 and spec.noise_sigma > 0:
            hit = rng.random(depth.shape) < spec.noise_fraction
            depth = np.where(hit, np.maximum(depth + rng.normal(0, spec.noise_sigma, depth.shape), 0.0), depth)
        frames.append(quantize_frame(Frame(i, i / spec.fps, rgb, depth), intr.depth_scale))
    return frames, poses, intr


def write_synthetic(root: Union[str, Path], spec: SequenceSpec) -> tuple[list[Frame], list[Pose], CameraIntrinsics]:
    """Generate a sequence and store it in TUM layout under ``root``."""
    frames, poses, intr = generate(spec)
    write_tum(root, frames, intr, poses)
    return frames, poses, intr


def occlusion_scene(seed: int = 0) -> SceneSpec:
    """A room with a row of pillars between the corridor path and the far wall."""
    pillars = [Box((x - 0.12, -1.5, 0.2), (x + 0.12, 1.5, 0.45)) for x in (-1.2, -0.55, 0.1, 0.75, 1.4)]
    return SceneSpec(texture_seed=seed, occluders=pillars)


def preset_sequence(name: str, frames: Optional[int] = None, size: int = 64, seed: int = 0) -> SequenceSpec:
    """Named sequences used by the tests and the ``synth`` command."""
    if name == "orbit":
        spec = SequenceSpec(SceneSpec(texture_seed=seed), "orbit", frames or 200, size, size)
    elif name == "loop":
        spec = SequenceSpec(SceneSpec(texture_seed=seed), "loop", frames or 400, size, size)
    elif name == "corridor":
        spec = SequenceSpec(occlusion_scene(seed), "corridor", frames or 120, size, size)
    else:
        raise InvalidInputError(f"unknown synthetic sequence {name!r}")
    return spec


def sequence_names() -> Sequence[str]:
    return TRAJECTORIES
