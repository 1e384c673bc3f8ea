"""The SLAM loop: section lifecycle, tracker/mapper dispatch and frozen-section residency."""

from __future__ import annotations

import logging
import tempfile
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .config import SlamConfig
from .core import (
    CameraIntrinsics,
    DegenerateViewError,
    Frame,
    GaussianSet,
    InvalidInputError,
    InvalidStateError,
    Pose,
    Section,
)
from .mapper import freeze_section, init_gaussians, map_head_frame, map_regular_frame
from .storage import read_section, write_section
from .tracker import CandidateView, RenderTarget, init_pose, optimize_pose, select_overlap_section

log = logging.getLogger(__name__)


class SectionRegistry:
    """All sections of a run; frozen ones beyond the residency budget live on disk.

    At most ``resident_sections`` unpinned frozen sections are kept in memory,
    evicted least-recently-used first. A pinned section (the overlap section
    of the active one) is never evicted. Each frozen section is written at
    most once, the first time it is evicted, so its bytes never change.
    """

    def __init__(self, resident_sections: int = 4, offload_dir: Optional[Union[str, Path]] = None):
        if resident_sections < 1:
            raise InvalidInputError("resident_sections must be >= 1")
        self.resident_sections = resident_sections
        self.sections: dict[int, Section] = {}
        self.files: dict[int, Path] = {}
        self._lru: OrderedDict[int, None] = OrderedDict()
        self.pinned: set[int] = set()
        self._offload_dir = Path(offload_dir) if offload_dir is not None else None
        self._tmp: Optional[tempfile.TemporaryDirectory] = None
        self.writes = 0
        self.reads = 0

    @property
    def offload_dir(self) -> Path:
        if self._offload_dir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="vtgslam-")
            self._offload_dir = Path(self._tmp.name)
        return self._offload_dir

    def frozen_ids(self) -> list[int]:
        return sorted(sid for sid, s in self.sections.items() if s.frozen)

    def add(self, section: Section) -> None:
        self.sections[section.id] = section
        if section.frozen:
            self._touch(section.id)
            self._evict()

    def _touch(self, sid: int) -> None:
        self._lru[sid] = None
        self._lru.move_to_end(sid)

    def _evict(self, keep: Iterable[int] = ()) -> None:
        keep = set(keep) | self.pinned
        unpinned = [sid for sid in self._lru if sid not in self.pinned]
        while len(unpinned) > self.resident_sections:
            victim = next((sid for sid in unpinned if sid not in keep), None)
            if victim is None:
                break
            self._offload(victim)
            unpinned.remove(victim)

    def _offload(self, sid: int) -> None:
        section = self.sections[sid]
        if sid not in self.files:
            self.files[sid] = write_section(section, self.offload_dir / f"section_{sid:05d}.vtgs")
            self.writes += 1
        section.gaussians = None
        self._lru.pop(sid, None)

    def fetch(self, sid: int) -> Section:
        section = self.sections[sid]
        if not section.frozen:
            return section
        if section.gaussians is None:
            loaded = read_section(self.files[sid])
            self.reads += 1
            section.gaussians = loaded.gaussians
        self._touch(sid)
        self._evict(keep=[sid])
        return section

    def pin(self, sid: Optional[int]) -> None:
        self.pinned = set() if sid is None else {sid}
        self._evict()

    def resident_gaussians(self) -> int:
        return sum(len(s.gaussians) for s in self.sections.values() if s.gaussians is not None)

    def total_gaussians(self) -> int:
        return sum(s.n_gaussians for s in self.sections.values())

    def close(self) -> None:
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None


@dataclass
class FrameRecord:
    index: int
    kind: str
    section_id: int
    overlap_id: Optional[int]
    coverage: float
    losses: list[float]
    diverged: bool = False
    candidates: list[int] = field(default_factory=list)
    rendered_sections: tuple[int, ...] = ()

    def log_line(self) -> str:
        curve = ",".join(f"{v:.6g}" for v in self.losses)
        overlap = "-" if self.overlap_id is None else str(self.overlap_id)
        rendered = ",".join(str(s) for s in self.rendered_sections) or "-"
        return "\t".join(
            [str(self.index), self.kind, str(self.section_id), overlap, rendered, f"{self.coverage:.4f}",
             str(int(self.diverged)), curve]
        )


class SlamSystem:
    """Processes frames in order and maintains poses and sections.

    Frame 0 fixes the gauge at the identity pose. Every ``section_length``
    frames a head frame closes the active section (freezing it) and opens a
    new one.
    """

    def __init__(self, intr: CameraIntrinsics, config: Optional[SlamConfig] = None,
                 offload_dir: Optional[Union[str, Path]] = None, log_path: Optional[Union[str, Path]] = None):
        self.intr = intr
        self.config = config or SlamConfig()
        self.registry = SectionRegistry(self.config.resident_sections, offload_dir)
        self.rng = np.random.default_rng(self.config.seed)
        self.poses: list[Pose] = []
        self.timestamps: list[float] = []
        self.active: Optional[Section] = None
        self.records: list[FrameRecord] = []
        self._section_frames: dict[int, Frame] = {}
        self._depths: dict[int, np.ndarray] = {}
        self._candidates: list[int] = []
        self.peak_resident = 0
        self.track_time = 0.0
        self.map_time = 0.0
        self._log = open(log_path, "w") if log_path is not None else None

    # -- helpers ---------------------------------------------------------

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def sections(self) -> dict[int, Section]:
        return self.registry.sections

    def _update_peak(self) -> None:
        self.peak_resident = max(self.peak_resident, self.registry.resident_gaussians())

    def _section_views(self, section: Section, before: Optional[int] = None) -> list[tuple[Pose, np.ndarray]]:
        frames = section.frame_indices if before is None else [f for f in section.frame_indices if f < before]
        if not frames:
            return []
        picks = list(dict.fromkeys([frames[0], frames[len(frames) // 2], frames[-1]]))
        return [(self.poses[f], self._depths[f]) for f in picks if f in self._depths]

    def target_for(self, section_ids: Sequence[int]) -> RenderTarget:
        sets, views = [], []
        for sid in section_ids:
            s = self.registry.fetch(sid)
            sets.append(s.gaussians)
            views.extend(self._section_views(s))
        self._update_peak()
        return RenderTarget(tuple(section_ids), GaussianSet.concat(sets), self.poses, views)

    # -- main loop -------------------------------------------------------

    def process_frame(self, frame: Frame) -> FrameRecord:
        if frame.index != self.n_frames:
            raise InvalidInputError(f"expected frame {self.n_frames}, got {frame.index}")
        if frame.shape != self.intr.shape:
            raise InvalidInputError(f"frame size {frame.shape} does not match intrinsics {self.intr.shape}")
        n = self.config.section_length
        if frame.index == 0:
            record = self._first_frame(frame)
        elif frame.index % n == 0:
            record = self._head_frame(frame)
        else:
            record = self._regular_frame(frame)
        self.timestamps.append(frame.timestamp)
        self._update_peak()
        self.records.append(record)
        if self._log is not None:
            self._log.write(record.log_line() + "\n")
            self._log.flush()
        return record

    def _remember(self, frame: Frame) -> None:
        self._section_frames[frame.index] = frame
        self._depths[frame.index] = frame.depth

    def _start_section(self, frame: Frame, overlap_id: Optional[int]) -> Section:
        sid = frame.index // self.config.section_length
        section = Section(sid, [frame.index], overlap_id=overlap_id)
        section.add_gaussians(init_gaussians(frame, self.poses[frame.index], self.intr,
                                             self.config.mapper.initial_opacity))
        self.active = section
        self.registry.add(section)
        self._remember(frame)
        return section

    def _first_frame(self, frame: Frame) -> FrameRecord:
        self.poses.append(Pose.identity())
        t0 = time.perf_counter()
        section = self._start_section(frame, None)
        pose, losses = map_head_frame(frame, self.poses[0], section, [], self.poses, self.intr,
                                      self.config.mapper)
        # frame 0 is the gauge; bundle adjustment must not move it
        self.map_time += time.perf_counter() - t0
        return FrameRecord(0, "head", section.id, None, 1.0, losses)

    def _freeze_active(self) -> None:
        section = self.active
        freeze_section(section, self.poses, self.intr)
        keep = set(section.frame_indices[i] for i in (0, len(section.frame_indices) // 2, -1))
        for f in section.frame_indices:
            if f % self.config.tracker.candidate_interval == 0:
                self._candidates.append(f)
                keep.add(f)
            if f not in keep:
                self._depths.pop(f, None)
        self._section_frames.clear()
        self.registry.add(section)
        self.active = None

    def _head_frame(self, frame: Frame) -> FrameRecord:
        cfg = self.config
        t0 = time.perf_counter()
        self._freeze_active()
        start = init_pose(self.poses)
        frozen = self.registry.frozen_ids()
        sec_of = lambda f: f // cfg.section_length  # noqa: E731
        cands = [CandidateView(f, sec_of(f), self.poses[f], self._depths[f]) for f in self._candidates]
        selection = select_overlap_section(frame, start, cands, self.target_for, self.intr, cfg.tracker, frozen)
        overlap_id = selection.section_id
        render_ids = [overlap_id]
        if cfg.tracker.overlap_strategy == "multiple" and max(frozen) != overlap_id:
            render_ids.append(max(frozen))
        self.registry.pin(overlap_id)
        diverged = False
        try:
            res = optimize_pose(frame, selection.pose or start, self.target_for(render_ids), self.intr, cfg.tracker)
            pose, losses, coverage = res.pose, res.losses, res.coverage
        except DegenerateViewError as exc:
            log.warning("%s; keeping the constant-velocity pose", exc)
            pose, losses, coverage, diverged = start, [], 0.0, True
        self.track_time += time.perf_counter() - t0

        t1 = time.perf_counter()
        self.poses.append(pose)
        section = self._start_section(frame, overlap_id)
        prev_id = section.id - 1
        context_ids = [prev_id] + ([overlap_id] if overlap_id != prev_id else [])
        if cfg.mapper.reselect_overlap and selection.fractions:
            best = max(selection.fractions, key=lambda f: (selection.fractions[f], -f))
            alt = sec_of(best)
            if alt not in context_ids:
                context_ids.append(alt)
        context = [self.registry.fetch(sid).gaussians for sid in context_ids] if cfg.mapper.head_context else []
        self._update_peak()
        new_pose, map_losses = map_head_frame(frame, pose, section, context, self.poses, self.intr, cfg.mapper)
        self.poses[frame.index] = new_pose
        self.map_time += time.perf_counter() - t1
        return FrameRecord(frame.index, "head", section.id, overlap_id, coverage, losses, diverged,
                           selection.candidates, tuple(render_ids))

    def _regular_frame(self, frame: Frame) -> FrameRecord:
        cfg = self.config
        section = self.active
        t0 = time.perf_counter()
        start = init_pose(self.poses)
        target = RenderTarget((section.id,), section.gaussians, self.poses,
                              self._section_views(section, before=frame.index))
        diverged = False
        try:
            res = optimize_pose(frame, start, target, self.intr, cfg.tracker)
            pose, losses, coverage = res.pose, res.losses, res.coverage
        except DegenerateViewError as exc:
            log.warning("%s; keeping the constant-velocity pose", exc)
            pose, losses, coverage, diverged = start, [], 0.0, True
        self.track_time += time.perf_counter() - t0

        t1 = time.perf_counter()
        self.poses.append(pose)
        section.add_frame(frame.index)
        self._remember(frame)
        map_regular_frame(frame, pose, section, self.poses, self._section_frames, self.intr, cfg.mapper, self.rng)
        self.map_time += time.perf_counter() - t1
        return FrameRecord(frame.index, "regular", section.id, section.overlap_id, coverage, losses, diverged,
                           rendered_sections=(section.id,))

    def finish(self) -> None:
        """Freeze the last section; the run's map is then fully immutable."""
        if self.active is not None:
            self._freeze_active()
        self.registry.pin(None)
        if self._log is not None:
            self._log.close()
            self._log = None

    def run(self, frames: Iterable[Frame]) -> "SlamSystem":
        for frame in frames:
            self.process_frame(frame)
        self.finish()
        return self

    # -- outputs ---------------------------------------------------------

    @property
    def diverged_frames(self) -> list[int]:
        return [r.index for r in self.records if r.diverged]

    def save_sections(self, directory: Union[str, Path]) -> list[Path]:
        """Write every frozen section plus an index file (id, frames, overlap)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        lines = []
        for sid in self.registry.frozen_ids():
            s = self.registry.fetch(sid)
            paths.append(write_section(s, directory / f"section_{sid:05d}.vtgs"))
            overlap = "-" if s.overlap_id is None else str(s.overlap_id)
            lines.append(f"{sid}\t{s.frame_indices[0]}\t{s.frame_indices[-1]}\t{overlap}")
        (directory / "index.txt").write_text("\n".join(lines) + "\n")
        return paths


def write_trajectory(path: Union[str, Path], timestamps: Sequence[float], poses: Sequence[Pose]) -> None:
    """TUM trajectory: ``timestamp tx ty tz qx qy qz qw`` with 6 decimals."""
    with open(path, "w") as fh:
        for ts, pose in zip(timestamps, poses):
            fields = " ".join(f"{v:.6f}" for v in pose.tum_fields())
            fh.write(f"{ts:.6f} {fields}\n")
