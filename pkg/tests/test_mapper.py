import numpy as np
import pytest

from vtgslam.config import MapperConfig, preset
from vtgslam.core import CameraIntrinsics, Frame, GaussianSet, InvalidStateError, Pose, Section, SectionState
from vtgslam.evaluation import psnr
from vtgslam.mapper import densify, freeze_section, init_gaussians, map_head_frame, map_regular_frame
from vtgslam.renderer import prepare_primitives, splat

INTR = CameraIntrinsics(500.0, 500.0, 7.5, 7.5, 16, 16)


def flat_frame(index=0, depth=2.0, valid=None):
    d = np.full((16, 16), depth)
    if valid is not None:
        d = d * valid
    rgb = np.random.default_rng(index).uniform(size=(16, 16, 3))
    return Frame(index, float(index), rgb, d)


class TestInit:
    def test_one_per_valid_pixel(self):
        valid = np.random.default_rng(0).uniform(size=(16, 16)) > 0.3
        f = flat_frame(valid=valid)
        gs = init_gaussians(f, Pose.identity(), INTR)
        assert len(gs) == valid.sum()
        vs, us = np.nonzero(valid)
        np.testing.assert_array_equal(gs.pixel, np.stack([us, vs], 1))
        np.testing.assert_array_equal(gs.color, f.rgb[valid])
        assert (gs.opacity == 0.5).all() and (gs.owner == 0).all()

    def test_radius_one_pixel(self):
        gs = init_gaussians(flat_frame(), Pose.identity(), INTR)
        assert gs.radius == pytest.approx(np.full(len(gs), 0.004))

    def test_all_invalid(self):
        assert len(init_gaussians(flat_frame(valid=np.zeros((16, 16))), Pose.identity(), INTR)) == 0


class TestDensify:
    def test_empty_section_takes_all_valid(self):
        valid = np.random.default_rng(1).uniform(size=(16, 16)) > 0.2
        f = flat_frame(valid=valid)
        s = Section(0, [0])
        new = densify(f, Pose.identity(), s, {0: Pose.identity()}, INTR)
        assert len(new) == valid.sum() == s.n_gaussians

    def test_matches_silhouette_oracle(self):
        rng = np.random.default_rng(2)
        f0 = flat_frame()
        s = Section(0, [0])
        keep = rng.uniform(size=(16, 16)) > 0.6
        s.add_gaussians(init_gaussians(f0, Pose.identity(), INTR, opacity=0.9, mask=keep))
        s.add_frame(1)
        view = Pose(np.array([1.0, 0, 0, 0]), [0.003, 0, 0])
        poses = {0: Pose.identity(), 1: view}
        sil = splat(prepare_primitives(s.gaussians, poses, view, INTR), INTR).silhouette
        f1 = flat_frame(1)
        new = densify(f1, view, s, poses, INTR)
        vs, us = np.nonzero(sil < 0.5)
        np.testing.assert_array_equal(new.pixel, np.stack([us, vs], 1))
        assert (new.owner == 1).all()

    def test_full_coverage_adds_nothing(self):
        f = flat_frame()
        s = Section(0, [0], gaussians=init_gaussians(f, Pose.identity(), INTR, opacity=1.0))
        s.gaussians.radius *= 3
        before = s.n_gaussians
        assert len(densify(f, Pose.identity(), s, {0: Pose.identity()}, INTR)) == 0
        assert s.n_gaussians == before

    def test_frozen_rejected(self):
        s = Section(0, [0], gaussians=GaussianSet.empty(), state=SectionState.FROZEN)
        with pytest.raises(InvalidStateError):
            densify(flat_frame(), Pose.identity(), s, {0: Pose.identity()}, INTR)


class TestHeadMapping:
    def test_overfits_head_frame(self, room64):
        frames, gt, intr = room64
        s = Section(0, [0], gaussians=init_gaussians(frames[0], gt[0], intr))
        cfg = preset("synthetic").mapper
        cfg.ba_enabled = False
        _, losses = map_head_frame(frames[0], gt[0], s, [], {0: gt[0]}, intr, cfg)
        out = splat(prepare_primitives(s.gaussians, {0: gt[0]}, gt[0], intr), intr)
        assert losses[-1] < losses[0]
        assert psnr(out.color, frames[0].rgb) > 35

    def test_context_untouched(self, room_sequence):
        frames, gt, intr = room_sequence
        prev = Section(0, [0], gaussians=init_gaussians(frames[0], gt[0], intr))
        freeze_section(prev, {0: gt[0]}, intr)
        before = prev.gaussians.checksum()
        s = Section(1, [5], gaussians=init_gaussians(frames[5], gt[5], intr))
        pose, _ = map_head_frame(frames[5], gt[5], s, [prev.gaussians], {0: gt[0], 5: gt[5]}, intr,
                                 MapperConfig(), iterations=5)
        assert prev.gaussians.checksum() == before
        assert isinstance(pose, Pose)

    def test_pose_fixed_without_ba(self, room_sequence):
        frames, gt, intr = room_sequence
        s = Section(0, [0], gaussians=init_gaussians(frames[0], gt[0], intr))
        pose, _ = map_head_frame(frames[0], gt[0], s, [], {0: gt[0]}, intr, MapperConfig(ba_enabled=False), 3)
        np.testing.assert_array_equal(pose.vector(), gt[0].vector())


class TestRegularMapping:
    def test_uniform_view_sampling(self, room_sequence):
        frames, gt, intr = room_sequence
        s = Section(0, [0], gaussians=init_gaussians(frames[0], gt[0], intr))
        for i in range(1, 4):
            s.add_frame(i)
        poses = dict(enumerate(gt[:4]))
        _, picks = map_regular_frame(frames[3], gt[3], s, poses, {i: frames[i] for i in range(3)}, intr,
                                     MapperConfig(), np.random.default_rng(0), iterations=400)
        counts = np.bincount(picks, minlength=4)
        chi2 = ((counts - 100) ** 2 / 100).sum()
        assert chi2 < 16.27  # 3 dof, p = 0.001

    def test_only_past_frames(self, room_sequence):
        frames, gt, intr = room_sequence
        s = Section(0, [0], gaussians=init_gaussians(frames[0], gt[0], intr))
        s.add_frame(1)
        _, picks = map_regular_frame(frames[1], gt[1], s, {0: gt[0], 1: gt[1]}, {0: frames[0]}, intr,
                                     MapperConfig(), np.random.default_rng(1), iterations=20)
        assert set(picks) <= {0, 1}


class TestFreeze:
    def test_baked_render_identical(self, room_sequence):
        frames, gt, intr = room_sequence
        poses = {0: gt[0], 4: gt[4]}
        s = Section(0, [0, 4], gaussians=init_gaussians(frames[0], gt[0], intr))
        s.add_gaussians(init_gaussians(frames[4], gt[4], intr, mask=np.eye(32, dtype=bool)))
        live = splat(prepare_primitives(s.gaussians, poses, gt[2], intr), intr)
        freeze_section(s, poses, intr, quantize=False)
        baked = splat(prepare_primitives(s.gaussians, None, gt[2], intr), intr)
        np.testing.assert_allclose(baked.color, live.color, atol=1e-9)
        np.testing.assert_allclose(baked.depth, live.depth, atol=1e-9)

    def test_state_and_readonly(self, room_sequence):
        frames, gt, intr = room_sequence
        s = Section(0, [0], gaussians=init_gaussians(frames[0], gt[0], intr))
        freeze_section(s, {0: gt[0]}, intr)
        assert s.frozen and s.n_gaussians == len(s.gaussians)
        with pytest.raises(ValueError):
            s.gaussians.color[0, 0] = 0.0

    def test_double_freeze(self, room_sequence):
        frames, gt, intr = room_sequence
        s = Section(0, [0], gaussians=init_gaussians(frames[0], gt[0], intr))
        freeze_section(s, {0: gt[0]}, intr)
        with pytest.raises(InvalidStateError):
            freeze_section(s, {0: gt[0]}, intr)
