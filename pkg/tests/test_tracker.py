import numpy as np
import pytest

from vtgslam.config import TrackerConfig, preset
from vtgslam.core import (
    DegenerateViewError,
    Frame,
    GaussianSet,
    InvalidStateError,
    Pose,
    pose_compose,
    pose_distance,
    quat_from_axis_angle,
)
from vtgslam.mapper import init_gaussians
from vtgslam.renderer import prepare_primitives, splat
from vtgslam.tracker import CandidateView, RenderTarget, init_pose, optimize_pose, select_overlap_section


@pytest.fixture(scope="module")
def consistent(room_sequence):
    """A section built from frame 0 and a frame rendered from it, so the loss minimum is the true pose."""
    frames, gt, intr = room_sequence
    gs = init_gaussians(frames[0], gt[0], intr, opacity=0.99)
    gs.radius *= 1.5
    out = splat(prepare_primitives(gs, {0: gt[0]}, gt[0], intr), intr)
    frame = Frame(0, 0.0, np.clip(out.color, 0, 1), out.depth)
    return frame, gs, gt[0], intr


def perturbed(pose, rng, trans=0.01, deg=1.0):
    axis = rng.normal(size=3)
    step = rng.normal(size=3)
    return pose_compose(pose, Pose(quat_from_axis_angle(axis, np.radians(deg)), trans * step / np.linalg.norm(step)))


class TestInitPose:
    def test_static(self):
        p = Pose(quat_from_axis_angle([0, 1, 0], 0.3), [1, 2, 3])
        np.testing.assert_allclose(init_pose([p, p]).matrix(), p.matrix(), atol=1e-12)

    def test_single_history(self):
        p = Pose(quat_from_axis_angle([0, 1, 0], 0.3), [1, 2, 3])
        assert init_pose([p]) is p

    def test_constant_translation(self):
        a, b = Pose.identity(), Pose(np.array([1.0, 0, 0, 0]), [0.1, 0, 0])
        np.testing.assert_allclose(init_pose([a, b]).t, [0.2, 0, 0], atol=1e-12)

    def test_constant_rotation(self):
        r = quat_from_axis_angle([0, 0, 1], 0.1)
        a, b = Pose.identity(), Pose(r, [0, 0, 0])
        expected = Pose(quat_from_axis_angle([0, 0, 1], 0.2), [0, 0, 0])
        np.testing.assert_allclose(init_pose([a, b]).matrix(), expected.matrix(), atol=1e-12)

    def test_empty(self):
        with pytest.raises(InvalidStateError):
            init_pose([])


class TestOptimizePose:
    @pytest.mark.parametrize("seed", range(3))
    def test_converges_from_one_cm_one_degree(self, consistent, seed):
        frame, gs, gt, intr = consistent
        start = perturbed(gt, np.random.default_rng(seed))
        target = RenderTarget((0,), gs, {0: gt}, [(gt, frame.depth)])
        res = optimize_pose(frame, start, target, intr, preset("synthetic").tracker, 100)
        t, r = pose_distance(res.pose, gt)
        assert t < 0.005 and np.degrees(r) < 0.25
        assert res.loss == min(res.losses) and res.loss < res.losses[0]

    def test_soft_mask_converges(self, consistent):
        frame, gs, gt, intr = consistent
        start = perturbed(gt, np.random.default_rng(5))
        target = RenderTarget((0,), gs, {0: gt}, [(gt, frame.depth)])
        cfg = preset("synthetic").tracker
        cfg.soft_mask = True
        res = optimize_pose(frame, start, target, intr, cfg, 100)
        assert pose_distance(res.pose, gt)[0] < pose_distance(start, gt)[0] / 2

    def test_frozen_gaussians_untouched(self, consistent):
        frame, gs, gt, intr = consistent
        gs = gs.copy()
        gs.set_readonly()
        before = gs.checksum()
        target = RenderTarget((0,), gs, {0: gt}, [(gt, frame.depth)])
        optimize_pose(frame, perturbed(gt, np.random.default_rng(0)), target, intr, TrackerConfig(), 5)
        assert gs.checksum() == before

    def test_degenerate_view(self, consistent):
        frame, gs, gt, intr = consistent
        away = pose_compose(gt, Pose(quat_from_axis_angle([0, 1, 0], np.pi), [0, 0, 0]))
        target = RenderTarget((0,), gs, {0: gt}, [])
        with pytest.raises(DegenerateViewError):
            optimize_pose(frame, away, target, intr, TrackerConfig(), 3)

    def test_visibility_dropped_when_empty(self, consistent):
        frame, gs, gt, intr = consistent
        far = np.full(frame.depth.shape, 50.0)
        target = RenderTarget((0,), gs, {0: gt}, [(gt, far)])
        res = optimize_pose(frame, gt, target, intr, TrackerConfig(), 1)
        assert not res.used_visibility


class TestOverlapSelection:
    def _setup(self, consistent):
        frame, gs, gt, intr = consistent
        # three "sections": two see the frame, one looks the other way
        away = pose_compose(gt, Pose(quat_from_axis_angle([0, 1, 0], np.pi), [0, 0, 0]))
        shifted = pose_compose(gt, Pose(np.array([1.0, 0, 0, 0]), [0.02, 0, 0]))
        sets = {0: (gs, gt), 1: (gs, shifted), 2: (gs, away)}
        cands = [CandidateView(10 * s, s, p, frame.depth) for s, (_, p) in sets.items()]
        fetched = []

        def fetch(ids):
            fetched.append(tuple(ids))
            (sid,) = ids
            g, p = sets[sid]
            g = GaussianSet(g.color, g.radius, g.opacity, np.full(len(g), 10 * sid), g.pixel, g.anchor_depth)
            return RenderTarget((sid,), g, {10 * sid: p}, [(p, frame.depth)])

        return frame, gt, intr, cands, fetch, fetched

    def test_argmin_of_pretrack_losses(self, consistent):
        frame, gt, intr, cands, fetch, _ = self._setup(consistent)
        cfg = preset("synthetic").tracker
        sel = select_overlap_section(frame, gt, cands, fetch, intr, cfg, [0, 1, 2])
        assert sel.candidates == [0, 1]
        oracle = {s: optimize_pose(frame, gt, fetch([s]), intr, cfg, cfg.pretrack_iterations).loss for s in (0, 1)}
        assert sel.pretrack_losses == pytest.approx(oracle, abs=0)
        assert sel.section_id == min(oracle, key=oracle.get) == 0
        assert not sel.fallback

    def test_single_nominee_no_pretrack(self, consistent):
        frame, gt, intr, cands, fetch, fetched = self._setup(consistent)
        sel = select_overlap_section(frame, gt, cands[1:], fetch, intr, TrackerConfig(), [0, 1, 2])
        assert sel.section_id == 1 and not fetched

    def test_disjoint_candidates_fall_back_to_latest(self, consistent):
        frame, gt, intr, cands, fetch, _ = self._setup(consistent)
        sel = select_overlap_section(frame, gt, cands[2:], fetch, intr, TrackerConfig(), [0, 1, 2])
        assert sel.section_id == 2 and sel.fallback

    def test_earliest_sections_kept(self, consistent):
        frame, gt, intr, cands, fetch, _ = self._setup(consistent)
        cfg = TrackerConfig(max_candidate_sections=1)
        sel = select_overlap_section(frame, gt, cands, fetch, intr, cfg, [0, 1, 2])
        assert sel.candidates == [0] and sel.section_id == 0

    def test_nearest_strategy(self, consistent):
        frame, gt, intr, cands, fetch, fetched = self._setup(consistent)
        sel = select_overlap_section(frame, gt, cands, fetch, intr, TrackerConfig(overlap_strategy="nearest"),
                                     [0, 1, 2])
        assert sel.section_id == 2 and not fetched

    def test_requires_frozen(self, consistent):
        frame, gt, intr, cands, fetch, _ = self._setup(consistent)
        with pytest.raises(InvalidStateError):
            select_overlap_section(frame, gt, cands, fetch, intr, TrackerConfig(), [])
