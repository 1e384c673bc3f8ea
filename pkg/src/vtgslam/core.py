"""Domain types, pinhole camera geometry and SE(3) pose algebra."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np


class InvalidInputError(ValueError):
    pass


class InvalidStateError(RuntimeError):
    pass


class ConfigurationError(RuntimeError):
    pass


class DataError(RuntimeError):
    """Malformed or corrupt on-disk data."""


class DegenerateViewError(RuntimeError):
    """Tracking has no usable pixels."""


# ---------------------------------------------------------------------------
# Camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError("principal point must lie inside the image")
        if not self.depth_scale > 0:
            raise InvalidInputError("depth_scale must be positive")

    @property
    def f_mean(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
            self.depth_scale,
        )


# ---------------------------------------------------------------------------
# Quaternions (w, x, y, z)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0:
        raise InvalidInputError("zero quaternion")
    q = q / n
    # canonical hemisphere keeps equal rotations bit-comparable
    return q if q[0] >= 0 else -q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion, normalized first."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return quat_normalize(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle (radians) of a unit quaternion."""
    return 2.0 * float(np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


# ---------------------------------------------------------------------------
# Pose


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform: x_world = R(q) x_cam + t."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3).copy())
        self.q.flags.writeable = False
        self.t.flags.writeable = False

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(quat_from_matrix(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "Pose":
        """From the 7-vector (qw, qx, qy, qz, tx, ty, tz) used by the optimizers."""
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:4], v[4:7])

    @classmethod
    def from_tum(cls, tx, ty, tz, qx, qy, qz, qw) -> "Pose":
        return cls(np.array([qw, qx, qy, qz], dtype=np.float64), np.array([tx, ty, tz], dtype=np.float64))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.t) @ self.R

    def compose(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def inverse(self) -> "Pose":
        return pose_inverse(self)

    def tum_fields(self) -> tuple[float, ...]:
        w, x, y, z = self.q
        return (*self.t, x, y, z, w)

    def __repr__(self):
        return f"Pose(q={np.array2string(self.q, precision=6)}, t={np.array2string(self.t, precision=6)})"


def pose_compose(a: Pose, b: Pose) -> Pose:
    """a ∘ b: apply b first, then a."""
    return Pose(quat_multiply(a.q, b.q), a.R @ b.t + a.t)


def pose_inverse(p: Pose) -> Pose:
    qi = p.q * np.array([1.0, -1.0, -1.0, -1.0])
    return Pose(qi, -(p.R.T @ p.t))


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation distance in meters, rotation angle in radians) between two poses."""
    rel = pose_compose(pose_inverse(a), b)
    return float(np.linalg.norm(a.t - b.t)), quat_angle(rel.q)


def pose_of(poses, index: int) -> Pose:
    """Look up a frame pose in a list or mapping, raising a configuration error if absent."""
    try:
        pose = poses[index]
    except (KeyError, IndexError, TypeError):
        pose = None
    if pose is None:
        raise ConfigurationError(f"no pose for frame {index}")
    return pose


# ---------------------------------------------------------------------------
# Pinhole projection


def back_project(pixel, depth, intr: CameraIntrinsics, pose: Optional[Pose] = None) -> np.ndarray:
    """World point of a pixel (u, v) at metric depth along the optical axis."""
    u, v = pixel
    if not depth > 0:
        raise InvalidInputError(f"depth must be positive, got {depth}")
    if not (0 <= u <= intr.width - 1 and 0 <= v <= intr.height - 1):
        raise InvalidInputError(f"pixel {pixel} outside image")
    p = np.array([(u - intr.cx) * depth / intr.fx, (v - intr.cy) * depth / intr.fy, depth])
    return p if pose is None else pose.transform(p)


def back_project_pixels(u, v, depth, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorized camera-space back-projection, (n, 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    return np.stack([(u - intr.cx) * d / intr.fx, (v - intr.cy) * d / intr.fy, d], axis=-1)


def back_project_depth(depth: np.ndarray, intr: CameraIntrinsics, pose: Pose):
    """World points of every valid pixel of a depth map plus their (v, u) indices."""
    vs, us = np.nonzero(depth > 0)
    pts = back_project_pixels(us, vs, depth[vs, us], intr)
    return pose.transform(pts), vs, us


@dataclass(frozen=True)
class Projection:
    u: float
    v: float
    z_cam: float

    @property
    def behind_camera(self) -> bool:
        return self.z_cam <= 0


def project(point, intr: CameraIntrinsics, pose: Optional[Pose] = None) -> Projection:
    p = np.asarray(point, dtype=np.float64)
    if pose is not None:
        p = pose.inverse_transform(p)
    x, y, z = p
    if z <= 0:
        return Projection(float("nan"), float("nan"), float(z))
    return Projection(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy, float(z))


def project_points(points: np.ndarray, intr: CameraIntrinsics, pose: Pose):
    """Vectorized projection: returns (u, v, z_cam); u, v are NaN where z_cam <= 0."""
    pc = pose.inverse_transform(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(z > 0, intr.fx * pc[:, 0] / z + intr.cx, np.nan)
        v = np.where(z > 0, intr.fy * pc[:, 1] / z + intr.cy, np.nan)
    return u, v, z


# ---------------------------------------------------------------------------
# Frames and Gaussians


@dataclass
class Frame:
    index: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InvalidInputError(f"rgb must be HxWx3, got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[:2]:
            raise InvalidInputError("depth and rgb sizes differ")
        if not np.all(np.isfinite(self.rgb)) or self.rgb.min() < 0 or self.rgb.max() > 1:
            raise InvalidInputError("rgb values must lie in [0, 1]")
        if not np.all(np.isfinite(self.depth)) or self.depth.min() < 0:
            raise InvalidInputError("depth must be finite and non-negative")

    @property
    def valid_mask(self) -> np.ndarray:
        return self.depth > 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class Gaussian:
    """One view-tied Gaussian; only color, radius and opacity are learnable."""

    color: tuple[float, float, float]
    radius: float
    opacity: float
    owner_frame: int
    pixel: tuple[int, int]
    anchor_depth: float

    LEARNABLE_SCALARS = 5


class GaussianSet:
    """Structure-of-arrays container for many view-tied Gaussians.

    Learnable attributes are ``color`` (n, 3), ``radius`` (n,) and ``opacity``
    (n,). ``owner``, ``pixel`` (n, 2 as u, v) and ``anchor_depth`` tie each
    Gaussian to a depth pixel. ``baked`` caches world positions once the set is
    frozen; while it is ``None`` positions come from the owner poses.
    """

    LEARNABLE_FIELDS = ("color", "radius", "opacity")

    def __init__(self, color, radius, opacity, owner, pixel, anchor_depth, baked=None):
        self.color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
        self.radius = np.asarray(radius, dtype=np.float64).reshape(-1)
        self.opacity = np.asarray(opacity, dtype=np.float64).reshape(-1)
        self.owner = np.asarray(owner, dtype=np.int64).reshape(-1)
        self.pixel = np.asarray(pixel, dtype=np.int64).reshape(-1, 2)
        self.anchor_depth = np.asarray(anchor_depth, dtype=np.float64).reshape(-1)
        self.baked = None if baked is None else np.asarray(baked, dtype=np.float64).reshape(-1, 3)
        n = len(self.radius)
        sizes = {len(self.color), len(self.opacity), len(self.owner), len(self.pixel), len(self.anchor_depth)}
        if sizes != {n} or (self.baked is not None and len(self.baked) != n):
            raise InvalidInputError("GaussianSet field lengths differ")

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), [], [], [], np.zeros((0, 2)), [])

    @classmethod
    def from_gaussians(cls, gs: Sequence[Gaussian]) -> "GaussianSet":
        if not gs:
            return cls.empty()
        return cls(
            [g.color for g in gs],
            [g.radius for g in gs],
            [g.opacity for g in gs],
            [g.owner_frame for g in gs],
            [g.pixel for g in gs],
            [g.anchor_depth for g in gs],
        )

    @staticmethod
    def concat(sets: Sequence["GaussianSet"]) -> "GaussianSet":
        sets = [s for s in sets if s is not None]
        if not sets:
            return GaussianSet.empty()
        baked = None
        if any(s.baked is not None for s in sets):
            # rows without a bake cache are NaN and get placed from owner poses
            baked = np.concatenate(
                [s.baked if s.baked is not None else np.full((len(s), 3), np.nan) for s in sets]
            )
        return GaussianSet(
            np.concatenate([s.color for s in sets]),
            np.concatenate([s.radius for s in sets]),
            np.concatenate([s.opacity for s in sets]),
            np.concatenate([s.owner for s in sets]),
            np.concatenate([s.pixel for s in sets]),
            np.concatenate([s.anchor_depth for s in sets]),
            baked,
        )

    def __len__(self) -> int:
        return len(self.radius)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            tuple(float(c) for c in self.color[i]),
            float(self.radius[i]),
            float(self.opacity[i]),
            int(self.owner[i]),
            (int(self.pixel[i, 0]), int(self.pixel[i, 1])),
            float(self.anchor_depth[i]),
        )

    def __iter__(self) -> Iterator[Gaussian]:
        for i in range(len(self)):
            yield self[i]

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.color.copy(),
            self.radius.copy(),
            self.opacity.copy(),
            self.owner.copy(),
            self.pixel.copy(),
            self.anchor_depth.copy(),
            None if self.baked is None else self.baked.copy(),
        )

    def extend(self, other: "GaussianSet") -> None:
        if self.baked is not None:
            raise InvalidStateError("cannot extend a baked (frozen) Gaussian set")
        merged = GaussianSet.concat([self, other])
        for name in ("color", "radius", "opacity", "owner", "pixel", "anchor_depth"):
            setattr(self, name, getattr(merged, name))

    def learnable_vector(self) -> np.ndarray:
        return np.concatenate([self.color, self.radius[:, None], self.opacity[:, None]], axis=1)

    @property
    def n_learnable_scalars(self) -> int:
        return self.learnable_vector().size

    def set_readonly(self) -> None:
        for name in ("color", "radius", "opacity", "owner", "pixel", "anchor_depth", "baked"):
            arr = getattr(self, name)
            if arr is not None:
                arr.flags.writeable = False

    def anchor_points_cam(self, intr: CameraIntrinsics) -> np.ndarray:
        return back_project_pixels(self.pixel[:, 0], self.pixel[:, 1], self.anchor_depth, intr)

    def world_positions(self, poses, intr: CameraIntrinsics) -> np.ndarray:
        """World positions, from the bake cache if present, else from owner poses."""
        if self.baked is not None:
            return self.baked
        out = np.empty((len(self), 3))
        cam = self.anchor_points_cam(intr)
        for owner in np.unique(self.owner):
            sel = self.owner == owner
            out[sel] = pose_of(poses, int(owner)).transform(cam[sel])
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in ("color", "radius", "opacity", "owner", "pixel", "anchor_depth", "baked"):
            arr = getattr(self, name)
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class SectionState(enum.Enum):
    ACTIVE = "active"
    FROZEN = "frozen"


@dataclass
class Section:
    id: int
    frame_indices: list[int]
    gaussians: Optional[GaussianSet] = None
    state: SectionState = SectionState.ACTIVE
    overlap_id: Optional[int] = None
    n_gaussians: int = 0

    def __post_init__(self):
        if not self.frame_indices:
            raise InvalidInputError("a section needs at least its head frame")
        if self.gaussians is None and self.state is SectionState.ACTIVE:
            self.gaussians = GaussianSet.empty()
        if self.gaussians is not None:
            self.n_gaussians = len(self.gaussians)

    @property
    def head_index(self) -> int:
        return self.frame_indices[0]

    @property
    def frozen(self) -> bool:
        return self.state is SectionState.FROZEN

    @property
    def resident(self) -> bool:
        return self.gaussians is not None

    @property
    def baked_positions(self) -> Optional[np.ndarray]:
        return None if self.gaussians is None else self.gaussians.baked

    def visibility_frames(self) -> list[int]:
        """Head, middle and last frame indices (deduplicated, in order)."""
        fi = self.frame_indices
        picks = [fi[0], fi[len(fi) // 2], fi[-1]]
        return list(dict.fromkeys(picks))

    def add_frame(self, index: int) -> None:
        if self.frozen:
            raise InvalidStateError("section is frozen")
        self.frame_indices.append(index)

    def add_gaussians(self, gs: GaussianSet) -> None:
        if self.frozen:
            raise InvalidStateError("section is frozen")
        if len(gs) and not set(np.unique(gs.owner).tolist()) <= set(self.frame_indices):
            raise InvalidInputError("Gaussian owner frame not in section")
        self.gaussians.extend(gs)
        self.n_gaussians = len(self.gaussians)
