"""RGB-D dataset readers and writers (TUM layout and the Replica-style results folder)."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np
from PIL import Image

from .core import CameraIntrinsics, ConfigurationError, DataError, Frame, InvalidInputError, Pose

log = logging.getLogger(__name__)

ASSOCIATION_WINDOW = 0.02
TUM_DEFAULT_INTRINSICS = (517.3, 516.5, 318.6, 255.3)


@dataclass
class Dataset:
    """An indexed RGB-D sequence whose images are decoded lazily."""

    intr: CameraIntrinsics
    timestamps: list[float]
    rgb_paths: list[Path]
    depth_paths: list[Path]
    ground_truth: Optional[list[Pose]] = None
    layout: str = "tum"
    rgb_divisor: float = 255.0
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.timestamps)

    def frame(self, i: int) -> Frame:
        if not 0 <= i < len(self):
            raise IndexError(i)
        rgb = read_rgb(self.rgb_paths[i], self.rgb_divisor)
        depth = read_depth(self.depth_paths[i], self.intr.depth_scale)
        if rgb.shape[:2] != self.intr.shape or depth.shape != self.intr.shape:
            raise DataError(f"frame {i}: image size does not match intrinsics {self.intr.shape}")
        try:
            return Frame(i, self.timestamps[i], rgb, depth)
        except InvalidInputError as exc:
            raise DataError(f"frame {i}: {exc}") from exc

    def frames(self, limit: Optional[int] = None) -> Iterator[Frame]:
        """Yield frames in order, decoding the next one in the background."""
        n = len(self) if limit is None else min(limit, len(self))
        if n == 0:
            return
        with ThreadPoolExecutor(max_workers=1) as pool:
            pending = pool.submit(self.frame, 0)
            for i in range(n):
                frame = pending.result()
                if i + 1 < n:
                    pending = pool.submit(self.frame, i + 1)
                yield frame

    def truncated(self, n: int) -> "Dataset":
        gt = None if self.ground_truth is None else self.ground_truth[:n]
        return Dataset(self.intr, self.timestamps[:n], self.rgb_paths[:n], self.depth_paths[:n], gt,
                       self.layout, self.rgb_divisor)


# ---------------------------------------------------------------------------
# Image IO


def read_rgb(path: Path, divisor: float = 255.0) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read color image {path}: {exc}") from exc
    return arr / divisor


def read_depth(path: Path, depth_scale: float) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read depth image {path}: {exc}") from exc
    if arr.ndim != 2:
        raise DataError(f"depth image {path} must be single channel")
    return arr.astype(np.float64) / depth_scale


def write_rgb(path: Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)).save(path)


def write_depth(path: Path, depth: np.ndarray, depth_scale: float) -> None:
    raw = np.clip(np.round(depth * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)


def quantize_frame(frame: Frame, depth_scale: float) -> Frame:
    """The frame exactly as it reads back after an 8-bit color / 16-bit depth round trip."""
    rgb = np.clip(np.round(frame.rgb * 255.0), 0, 255) / 255.0
    depth = np.clip(np.round(frame.depth * depth_scale), 0, 65535) / depth_scale
    return Frame(frame.index, frame.timestamp, rgb, depth)


# ---------------------------------------------------------------------------
# TUM layout


def _read_table(path: Path, ncols: int) -> list[tuple[float, list[str]]]:
    """Non-comment rows of a TUM list file as ``(timestamp, remaining fields)``."""
    rows = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != ncols:
            raise DataError(f"{path}:{lineno}: expected {ncols} fields, got {len(parts)}")
        try:
            ts = float(parts[0])
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
        rows.append((ts, parts[1:]))
    return rows


def associate(first: Sequence[float], second: Sequence[float], window: float = ASSOCIATION_WINDOW
              ) -> list[tuple[int, int]]:
    """Greedy one-to-one nearest-timestamp matching within ``window`` seconds.

    Candidate pairs are taken in order of increasing time difference, ties
    broken by index; the result is sorted by the first list's index.
    """
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        return []
    order_b = np.argsort(b, kind="stable")
    sb = b[order_b]
    cands = []
    for i, t in enumerate(a):
        lo = np.searchsorted(sb, t - window, side="left")
        hi = np.searchsorted(sb, t + window, side="right")
        for k in range(lo, hi):
            j = int(order_b[k])
            cands.append((abs(t - b[j]), i, j))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def parse_trajectory(path: Union[str, Path]) -> tuple[list[float], list[Pose]]:
    """TUM trajectory file: ``timestamp tx ty tz qx qy qz qw`` per line."""
    path = Path(path)
    stamps, poses = [], []
    for lineno, (ts, f) in enumerate(_read_table(path, 8), 1):
        try:
            vals = [float(x) for x in f]
            pose = Pose.from_tum(*vals)
        except (ValueError, InvalidInputError) as exc:
            raise DataError(f"{path}: bad pose on entry {lineno}: {exc}") from None
        stamps.append(ts)
        poses.append(pose)
    return stamps, poses


def _read_intrinsics_file(path: Path) -> dict[str, float]:
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        try:
            out[k] = float(v)
        except ValueError:
            raise DataError(f"{path}:{lineno}: bad number {v!r}") from None
    return out


def _resolve_intrinsics(root: Path, first_rgb: Path, overrides: Optional[dict], depth_scale: Optional[float],
                        fallback: Optional[tuple[float, float, float, float]]) -> CameraIntrinsics:
    vals: dict[str, float] = {}
    f = root / "intrinsics.txt"
    if f.exists():
        vals.update(_read_intrinsics_file(f))
    if overrides:
        vals.update({k: v for k, v in overrides.items() if v is not None})
    if depth_scale is not None:
        vals["depth_scale"] = depth_scale
    try:
        with Image.open(first_rgb) as im:
            w, h = im.size
    except OSError as exc:
        raise DataError(f"cannot read {first_rgb}: {exc}") from exc
    if "width" in vals and int(vals["width"]) != w or "height" in vals and int(vals["height"]) != h:
        raise DataError(f"intrinsics size {vals.get('width')}x{vals.get('height')} differs from images {w}x{h}")
    if not all(k in vals for k in ("fx", "fy", "cx", "cy")):
        if fallback is None:
            raise ConfigurationError("camera intrinsics are required (intrinsics.txt or config)")
        if (w, h) != (640, 480):
            raise ConfigurationError(f"{w}x{h} images need explicit intrinsics")
        vals.update(zip(("fx", "fy", "cx", "cy"), fallback))
    try:
        return CameraIntrinsics(vals["fx"], vals["fy"], vals["cx"], vals["cy"], w, h, vals.get("depth_scale", 5000.0))
    except InvalidInputError as exc:
        raise DataError(f"invalid intrinsics: {exc}") from exc


def load_tum(root: Union[str, Path], intrinsics: Optional[dict] = None, depth_scale: Optional[float] = None,
             window: float = ASSOCIATION_WINDOW) -> Dataset:
    """Open a TUM RGB-D sequence.

    Color and depth images are paired by nearest timestamp within ``window``
    seconds; unpaired color images are skipped with a warning. Ground truth,
    when present, is matched to each frame the same way; frames without a
    ground-truth match drop the ground truth for the whole sequence.
    Intrinsics come from ``intrinsics.txt`` (key=value), then ``intrinsics``
    overrides, then the TUM defaults for 640x480 sequences.
    """
    root = Path(root)
    for name in ("rgb.txt", "depth.txt"):
        if not (root / name).exists():
            raise DataError(f"{root / name} not found")
    rgb = _read_table(root / "rgb.txt", 2)
    depth = _read_table(root / "depth.txt", 2)
    pairs = associate([r[0] for r in rgb], [d[0] for d in depth], window)
    if len(pairs) < len(rgb):
        log.warning("%d color images without a depth match were skipped", len(rgb) - len(pairs))
    if not pairs:
        raise DataError(f"no associable color/depth pairs in {root}")
    stamps = [rgb[i][0] for i, _ in pairs]
    rgb_paths = [root / rgb[i][1][0] for i, _ in pairs]
    depth_paths = [root / depth[j][1][0] for _, j in pairs]

    gt = None
    if (root / "groundtruth.txt").exists():
        gt_stamps, gt_poses = parse_trajectory(root / "groundtruth.txt")
        gpairs = dict(associate(stamps, gt_stamps, window))
        if len(gpairs) == len(stamps):
            gt = [gt_poses[gpairs[i]] for i in range(len(stamps))]
        else:
            log.warning("ground truth covers %d of %d frames; ignoring it", len(gpairs), len(stamps))
    fallback = TUM_DEFAULT_INTRINSICS
    intr = _resolve_intrinsics(root, rgb_paths[0], intrinsics, depth_scale, fallback)
    return Dataset(intr, stamps, rgb_paths, depth_paths, gt, "tum")


def write_tum(root: Union[str, Path], frames: Sequence[Frame], intr: CameraIntrinsics,
              poses: Optional[Sequence[Pose]] = None) -> Path:
    """Write frames (and optional ground truth) in TUM layout with an ``intrinsics.txt``."""
    root = Path(root)
    (root / "rgb").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    rgb_lines = ["# color images", "# timestamp filename"]
    depth_lines = ["# depth maps", "# timestamp filename"]
    for f in frames:
        name = f"{f.timestamp:.6f}.png"
        write_rgb(root / "rgb" / name, f.rgb)
        write_depth(root / "depth" / name, f.depth, intr.depth_scale)
        rgb_lines.append(f"{f.timestamp:.6f} rgb/{name}")
        depth_lines.append(f"{f.timestamp:.6f} depth/{name}")
    (root / "rgb.txt").write_text("\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("\n".join(depth_lines) + "\n")
    if poses is not None:
        lines = ["# ground truth trajectory", "# timestamp tx ty tz qx qy qz qw"]
        for f, p in zip(frames, poses):
            lines.append(f"{f.timestamp:.6f} " + " ".join(f"{v:.9f}" for v in p.tum_fields()))
        (root / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    (root / "intrinsics.txt").write_text(
        f"fx={float(intr.fx)!r}\nfy={float(intr.fy)!r}\ncx={float(intr.cx)!r}\ncy={float(intr.cy)!r}\n"
        f"width={intr.width}\nheight={intr.height}\ndepth_scale={float(intr.depth_scale)!r}\n"
    )
    return root


# ---------------------------------------------------------------------------
# Replica-style layout


def load_replica(root: Union[str, Path], intrinsics: Optional[dict] = None,
                 depth_scale: Optional[float] = None) -> Dataset:
    """``results/frameNNNNNN.{jpg,png}`` + ``results/depthNNNNNN.png`` + ``traj.txt`` (4x4 row-major per line).

    The depth scale differs between exports, so it must be given.
    """
    root = Path(root)
    if depth_scale is None:
        f = root / "intrinsics.txt"
        if f.exists():
            depth_scale = _read_intrinsics_file(f).get("depth_scale")
    if depth_scale is None:
        raise ConfigurationError("Replica-style data needs an explicit depth_scale")
    res = root / "results"
    rgb_paths = sorted(list(res.glob("frame*.jpg")) + list(res.glob("frame*.png")))
    depth_paths = sorted(res.glob("depth*.png"))
    if not rgb_paths or len(rgb_paths) != len(depth_paths):
        raise DataError(f"{res}: need matching frame*/depth* images, found {len(rgb_paths)}/{len(depth_paths)}")
    gt = None
    traj = root / "traj.txt"
    if traj.exists():
        gt = []
        for lineno, line in enumerate(traj.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                vals = np.array([float(x) for x in line.split()])
            except ValueError:
                raise DataError(f"{traj}:{lineno}: non-numeric field") from None
            if vals.size != 16:
                raise DataError(f"{traj}:{lineno}: expected 16 values, got {vals.size}")
            try:
                gt.append(Pose.from_matrix(vals.reshape(4, 4)))
            except InvalidInputError as exc:
                raise DataError(f"{traj}:{lineno}: {exc}") from None
        if len(gt) != len(rgb_paths):
            raise DataError(f"{traj}: {len(gt)} poses for {len(rgb_paths)} frames")
    intr = _resolve_intrinsics(root, rgb_paths[0], intrinsics, depth_scale, None)
    stamps = [float(i) for i in range(len(rgb_paths))]
    return Dataset(intr, stamps, rgb_paths, depth_paths, gt, "replica_like")


def load_dataset(root: Union[str, Path], layout: str = "tum", intrinsics: Optional[dict] = None,
                 depth_scale: Optional[float] = None) -> Dataset:
    if layout in ("tum", "synthetic"):
        return load_tum(root, intrinsics, depth_scale)
    if layout in ("replica", "replica_like"):
        return load_replica(root, intrinsics, depth_scale)
    raise ConfigurationError(f"unknown dataset layout {layout!r}")
