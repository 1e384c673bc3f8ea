"""Analytic backward pass of the splatting renderer, Adam, and a finite-difference checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .core import CameraIntrinsics, GaussianSet, InvalidInputError, Pose
from .renderer import (
    ALPHA_MAX,
    TILE,
    TRUNCATION,
    Primitives,
    RenderOutput,
    _backward_tiles,
    prepare_primitives,
    splat,
    splat_naive,
)

# column layout of screen-space gradients
_U, _V, _SIGMA, _Z, _R, _G, _B, _OPACITY = range(8)


@dataclass
class Upstream:
    """Per-pixel loss gradients with respect to the three render channels."""

    color: np.ndarray
    depth: np.ndarray
    silhouette: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "Upstream":
        h, w = shape
        return cls(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)))

    def __add__(self, other: "Upstream") -> "Upstream":
        return Upstream(self.color + other.color, self.depth + other.depth, self.silhouette + other.silhouette)

    def scaled(self, k: float) -> "Upstream":
        return Upstream(self.color * k, self.depth * k, self.silhouette * k)


@dataclass
class GradientBundle:
    d_color: np.ndarray
    d_radius: np.ndarray
    d_opacity: np.ndarray
    d_view: np.ndarray  # (7,) qw qx qy qz tx ty tz
    d_owner: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, n: int) -> "GradientBundle":
        return cls(np.zeros((n, 3)), np.zeros(n), np.zeros(n), np.zeros(7), {})

    def pose_grad(self, frame: int, view_is_frame: bool) -> np.ndarray:
        """Total gradient for a frame that may be both the view and an owner."""
        g = self.d_owner.get(frame, np.zeros(7)).copy()
        if view_is_frame:
            g += self.d_view
        return g

    def all_finite(self) -> bool:
        parts = [self.d_color, self.d_radius, self.d_opacity, self.d_view, *self.d_owner.values()]
        return all(np.all(np.isfinite(p)) for p in parts)


def rotation_grad_to_quat(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Map dL/dR to dL/dq through R(q / |q|) evaluated at unit ``q``."""
    w, x, y, z = q
    dq = 2.0 * np.array(
        [
            -z * G[0, 1] + y * G[0, 2] + z * G[1, 0] - x * G[1, 2] - y * G[2, 0] + x * G[2, 1],
            y * G[0, 1] + z * G[0, 2] + y * G[1, 0] - 2 * x * G[1, 1] - w * G[1, 2] + z * G[2, 0] + w * G[2, 1] - 2 * x * G[2, 2],
            -2 * y * G[0, 0] + x * G[0, 1] + w * G[0, 2] + x * G[1, 0] + z * G[1, 2] - w * G[2, 0] + z * G[2, 1] - 2 * y * G[2, 2],
            -2 * z * G[0, 0] - w * G[0, 1] + x * G[0, 2] + w * G[1, 0] - 2 * z * G[1, 1] + y * G[1, 2] + x * G[2, 0] + y * G[2, 1],
        ]
    )
    return dq - q * (q @ dq)


def _check_upstream(render: RenderOutput, up: Upstream) -> None:
    if (
        up.color.shape != render.color.shape
        or up.depth.shape != render.depth.shape
        or up.silhouette.shape != render.silhouette.shape
    ):
        raise InvalidInputError("upstream gradient shapes do not match the render")


def screen_grads_tiled(prims: Primitives, render: RenderOutput, up: Upstream) -> np.ndarray:
    """(n, 8) screen-space gradients from the tile kernel."""
    n = len(prims)
    if n == 0:
        return np.zeros((0, 8))
    if render.raster is None:
        raise InvalidInputError("tiled backward needs a render produced by the tiled path")
    r = render.raster
    intr = prims.intr
    pair = _backward_tiles(
        np.ascontiguousarray(prims.center[:, 0]),
        np.ascontiguousarray(prims.center[:, 1]),
        prims.sigma,
        prims.z,
        prims.color,
        prims.opacity,
        r.offsets,
        r.prims,
        r.last,
        r.final_t,
        np.ascontiguousarray(up.color, dtype=np.float64),
        np.ascontiguousarray(up.depth, dtype=np.float64),
        np.ascontiguousarray(up.silhouette, dtype=np.float64),
        intr.width,
        intr.height,
        TILE,
    )
    # bincount sums in pair order, which is fixed by the binning, so the merge is reproducible
    return np.stack([np.bincount(r.prims, weights=pair[:, c], minlength=n) for c in range(8)], axis=1)


def screen_grads_naive(prims: Primitives, up: Upstream) -> np.ndarray:
    """Reference screen-space gradients from a full-image numpy trace."""
    n = len(prims)
    out = np.zeros((n, 8))
    if n == 0:
        return out
    intr = prims.intr
    _, (alphas, trans, insides) = splat_naive(prims, intr, return_trace=True)
    h, w = intr.shape
    V, U = np.mgrid[0:h, 0:w].astype(np.float64)
    f = (
        np.einsum("hwc,nc->nhw", up.color, prims.color)
        + prims.z[:, None, None] * up.depth[None]
        + up.silhouette[None]
    )
    contrib = alphas * trans * f
    suffix = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib
    d_alpha = np.where(insides, trans * f - suffix / (1 - alphas), 0.0)
    wgt = alphas * trans
    out[:, _Z] = np.einsum("nhw,hw->n", wgt, up.depth)
    out[:, _R:_B + 1] = np.einsum("nhw,hwc->nc", wgt, up.color)
    dx = U[None] - prims.center[:, 0, None, None]
    dy = V[None] - prims.center[:, 1, None, None]
    s2 = prims.sigma[:, None, None] ** 2
    d2 = dx * dx + dy * dy
    g = np.exp(-d2 / (2 * s2))
    active = insides & (prims.opacity[:, None, None] * g <= ALPHA_MAX)
    da = np.where(active, d_alpha, 0.0)
    out[:, _OPACITY] = np.einsum("nhw,nhw->n", g, da)
    dg = prims.opacity[:, None, None] * da * g
    out[:, _U] = np.sum(dg * dx / s2, axis=(1, 2))
    out[:, _V] = np.sum(dg * dy / s2, axis=(1, 2))
    out[:, _SIGMA] = np.sum(dg * d2 / (s2 * prims.sigma[:, None, None]), axis=(1, 2))
    return out


def chain_to_parameters(prims: Primitives, screen: np.ndarray) -> GradientBundle:
    """Chain screen-space gradients through footprint, projection and poses."""
    intr = prims.intr
    bundle = GradientBundle.zeros(prims.n_source)
    if len(prims) == 0:
        return bundle
    x, y, z = prims.cam[:, 0], prims.cam[:, 1], prims.cam[:, 2]
    fm = intr.f_mean
    free = ~prims.sigma_clamped
    d_sigma = np.where(free, screen[:, _SIGMA], 0.0)
    d_radius = d_sigma * fm / z
    d_z = screen[:, _Z] - d_sigma * fm * prims.radius / (z * z)
    du, dv = screen[:, _U], screen[:, _V]
    g_cam = np.stack(
        [du * intr.fx / z, dv * intr.fy / z, d_z - du * intr.fx * x / (z * z) - dv * intr.fy * y / (z * z)], axis=1
    )
    src = prims.source
    bundle.d_color[src] = screen[:, _R:_B + 1]
    bundle.d_radius[src] = d_radius
    bundle.d_opacity[src] = screen[:, _OPACITY]

    view = prims.view
    Rv = view.R
    g_world = g_cam @ Rv.T
    rel = prims.world - view.t
    G_view = rel.T @ g_cam
    bundle.d_view = np.concatenate([rotation_grad_to_quat(view.q, G_view), -g_world.sum(axis=0)])

    for o in np.unique(prims.owner):
        if o < 0:
            continue
        sel = prims.owner == o
        pose = prims.owner_poses[int(o)]
        G_owner = g_world[sel].T @ prims.anchor[sel]
        bundle.d_owner[int(o)] = np.concatenate([rotation_grad_to_quat(pose.q, G_owner), g_world[sel].sum(axis=0)])
    return bundle


def backward(prims: Primitives, render: RenderOutput, upstream: Upstream, tiled: bool = True) -> GradientBundle:
    """Gradients of a scalar loss with respect to Gaussian attributes and poses.

    ``upstream`` holds dL/d(color, depth, silhouette) for every pixel. Owner
    pose gradients are reported for Gaussians placed by a live pose; baked
    (frozen) rows contribute only to the view pose.
    """
    _check_upstream(render, upstream)
    if tiled:
        screen = screen_grads_tiled(prims, render, upstream)
    else:
        screen = screen_grads_naive(prims, upstream)
    return chain_to_parameters(prims, screen)


# ---------------------------------------------------------------------------
# Adam


def _clip_unit(a):
    np.clip(a, 0.0, 1.0, out=a)


def _floor_radius(a):
    np.maximum(a, 1e-6, out=a)


def _renormalize_quat(a):
    a /= np.linalg.norm(a)


CONSTRAINTS: dict[str, Callable[[np.ndarray], None]] = {
    "color": _clip_unit,
    "opacity": _clip_unit,
    "radius": _floor_radius,
    "rot": _renormalize_quat,
}


class Adam:
    """Adam over named parameter groups, each with its own learning rate.

    Parameters are updated in place. After each step the group's constraint
    (if any) is applied: colors and opacities are clipped to [0, 1], radii
    are floored at 1e-6 m and quaternions renormalized.
    """

    def __init__(self, lrs: Mapping[str, float], betas=(0.9, 0.999), eps=1e-8):
        self.lrs = dict(lrs)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name)
            if m is None or m.shape != p.shape:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p -= self.lrs[name] * mhat / (np.sqrt(vhat) + self.eps)
            constrain = CONSTRAINTS.get(name)
            if constrain is not None:
                constrain(p)


# ---------------------------------------------------------------------------
# Finite-difference checking


@dataclass
class MicroScene:
    intr: CameraIntrinsics
    gaussians: GaussianSet
    owner_poses: dict[int, Pose]
    view: Pose
    upstream: Upstream


def random_micro_scene(rng: np.random.Generator, size: int = 16, max_gaussians: int = 30) -> MicroScene:
    f = size * rng.uniform(0.9, 1.4)
    intr = CameraIntrinsics(f, f * rng.uniform(0.9, 1.1), (size - 1) / 2 + rng.uniform(-1, 1),
                            (size - 1) / 2 + rng.uniform(-1, 1), size, size)
    view = Pose(np.array([1.0, *rng.normal(0, 0.05, 3)]), rng.normal(0, 0.1, 3))
    owners = {}
    for o in (3, 7):
        owners[o] = Pose(view.q + np.concatenate([[0.0], rng.normal(0, 0.04, 3)]), view.t + rng.normal(0, 0.08, 3))
    n = int(rng.integers(3, max_gaussians + 1))
    owner = rng.choice(list(owners), size=n)
    pix = rng.integers(0, size, size=(n, 2))
    depth = rng.uniform(1.5, 3.0, n)
    sigma_px = rng.uniform(0.7, 2.5, n)
    radius = sigma_px * depth / intr.f_mean
    gs = GaussianSet(rng.uniform(0, 1, (n, 3)), radius, rng.uniform(0.05, 0.97, n), owner, pix, depth)
    h = w = size
    up = Upstream(rng.normal(0, 1, (h, w, 3)), rng.normal(0, 1, (h, w)), rng.normal(0, 1, (h, w)))
    return MicroScene(intr, gs, owners, view, up)


def _objective(scene: MicroScene, gs: GaussianSet, owners, view) -> tuple[float, tuple]:
    prims = prepare_primitives(gs, owners, view, scene.intr)
    out, (alphas, _, insides) = splat_naive(prims, scene.intr, return_trace=True)
    up = scene.upstream
    value = float(np.sum(up.color * out.color) + np.sum(up.depth * out.depth) + np.sum(up.silhouette * out.silhouette))
    signature = (
        prims.source.tobytes(),
        prims.sigma_clamped.tobytes(),
        insides.tobytes(),
        (alphas >= ALPHA_MAX).tobytes(),
    )
    return value, signature


def analytic_gradients(scene: MicroScene, tiled: bool = True) -> GradientBundle:
    prims = prepare_primitives(scene.gaussians, scene.owner_poses, scene.view, scene.intr)
    render = splat(prims, scene.intr, tiled=tiled)
    return backward(prims, render, scene.upstream, tiled=tiled)


@dataclass
class GradCheckResult:
    checked: dict[str, int] = field(default_factory=lambda: {"color": 0, "radius": 0, "opacity": 0, "pose": 0})
    skipped: int = 0
    max_rel_error: dict[str, float] = field(default_factory=lambda: {"color": 0.0, "radius": 0.0, "opacity": 0.0, "pose": 0.0})
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _compare(result: GradCheckResult, family: str, label: str, a: float, n: float, rtol: float, atol: float) -> None:
    result.checked[family] += 1
    scale = max(abs(a), abs(n))
    if abs(a) < 1e-4 and scale < 1e-4:
        if abs(a - n) >= atol:
            result.failures.append(f"{label}: analytic {a:.3e} vs numeric {n:.3e}")
        return
    rel = abs(a - n) / scale
    result.max_rel_error[family] = max(result.max_rel_error[family], rel)
    if rel >= rtol:
        result.failures.append(f"{label}: analytic {a:.6e} vs numeric {n:.6e} (rel {rel:.2e})")


def check_scene(scene: MicroScene, eps: float = 1e-5, rtol: float = 1e-3, atol: float = 1e-6,
                result: Optional[GradCheckResult] = None, tag: str = "") -> GradCheckResult:
    """Compare analytic gradients with central differences on every parameter.

    A parameter is skipped when either perturbation changes the discrete
    structure of the render (cull set, sort order, truncation footprint or
    clamping), since the loss is not differentiable across those boundaries.
    """
    result = result or GradCheckResult()
    grads = analytic_gradients(scene)
    _, base_sig = _objective(scene, scene.gaussians, scene.owner_poses, scene.view)

    def central(make):
        fp, sp = make(+eps)
        fm, sm = make(-eps)
        if sp != base_sig or sm != base_sig:
            return None
        return (fp - fm) / (2 * eps)

    gs = scene.gaussians
    for name, arr, garr, family in (
        ("color", gs.color, grads.d_color, "color"),
        ("radius", gs.radius, grads.d_radius, "radius"),
        ("opacity", gs.opacity, grads.d_opacity, "opacity"),
    ):
        flat_g = garr.reshape(-1)
        for k in range(arr.size):
            def make(h, name=name, k=k):
                g2 = gs.copy()
                getattr(g2, name).reshape(-1)[k] += h
                return _objective(scene, g2, scene.owner_poses, scene.view)

            num = central(make)
            if num is None:
                result.skipped += 1
                continue
            _compare(result, family, f"{tag}{name}[{k}]", float(flat_g[k]), num, rtol, atol)

    def pose_check(label, base: Pose, analytic: np.ndarray, rebuild):
        vec = base.vector()
        for k in range(7):
            def make(h, k=k):
                v = vec.copy()
                v[k] += h
                return rebuild(Pose.from_vector(v))

            num = central(make)
            if num is None:
                result.skipped += 1
                continue
            _compare(result, "pose", f"{tag}{label}[{k}]", float(analytic[k]), num, rtol, atol)

    pose_check("view", scene.view, grads.d_view, lambda p: _objective(scene, gs, scene.owner_poses, p))
    for o, pose in scene.owner_poses.items():
        analytic = grads.d_owner.get(o, np.zeros(7))

        def rebuild(p, o=o):
            owners = dict(scene.owner_poses)
            owners[o] = p
            return _objective(scene, gs, owners, scene.view)

        pose_check(f"owner{o}", pose, analytic, rebuild)
    return result


def run_gradcheck(n_scenes: int = 100, seed: int = 0, eps: float = 1e-5, rtol: float = 1e-3) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    result = GradCheckResult()
    for i in range(n_scenes):
        check_scene(random_micro_scene(rng), eps=eps, rtol=rtol, result=result, tag=f"scene{i}:")
    return result
