import numpy as np
import pytest

from conftest import random_pose
from vtgslam.core import CameraIntrinsics, Frame, Pose, back_project
from vtgslam.renderer import RenderOutput
from vtgslam.visibility import (
    interpolate_depth,
    tracking_mask,
    visibility_mask,
    visible,
    visible_fraction,
)

INTR = CameraIntrinsics(20.0, 20.0, 9.5, 9.5, 20, 20)


def plane(depth=2.0, shape=(20, 20)):
    return np.full(shape, depth)


def brute_visible(point, view, view_depth, intr, tol=0.01):
    """Direct reading of the visibility rule for a single point."""
    p = view.inverse().transform(np.asarray(point)[None])[0]
    if p[2] <= 0:
        return False
    u = intr.fx * p[0] / p[2] + intr.cx
    v = intr.fy * p[1] / p[2] + intr.cy
    h, w = view_depth.shape
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        return False
    d = interpolate_depth(view_depth, np.array([u]), np.array([v]))[0]
    return bool(np.isfinite(d) and abs(p[2] - d) <= tol * d)


class TestInterpolateDepth:
    def test_bilinear_of_linear_field(self):
        vv, uu = np.mgrid[0:5, 0:6]
        depth = 1 + 0.1 * uu + 0.2 * vv
        assert interpolate_depth(depth, np.array([2.25]), np.array([1.5]))[0] == pytest.approx(1 + 0.225 + 0.3)

    def test_outside_and_invalid_nan(self):
        depth = plane(shape=(4, 4))
        depth[1, 1] = 0
        out = interpolate_depth(depth, np.array([-0.1, 4.0, 0.5]), np.array([0.0, 0.0, 0.5]))
        assert np.isnan(out).all()


class TestVisible:
    def test_point_visible_in_its_own_view(self):
        p = back_project((7, 11), 2.0, INTR)
        assert visible(p, Pose.identity(), plane(), INTR)

    def test_beyond_one_percent_not_visible(self):
        p = back_project((7, 11), 2.0 * 1.02, INTR)
        assert not visible(p, Pose.identity(), plane(), INTR)

    def test_within_band_visible(self):
        p = back_project((7, 11), 2.0 * 1.009, INTR)
        assert visible(p, Pose.identity(), plane(), INTR)

    def test_outside_image(self):
        view = Pose(np.array([1.0, 0, 0, 0]), [5, 0, 0])
        assert not visible(back_project((7, 11), 2.0, INTR), view, plane(), INTR)

    def test_behind_camera(self):
        view = Pose(np.array([1.0, 0, 0, 0]), [0, 0, 5])
        assert not visible(back_project((7, 11), 2.0, INTR), view, plane(), INTR)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        view = random_pose(rng, 0.1, 0.1)
        vd = rng.uniform(1.5, 2.5, (20, 20))
        for _ in range(50):
            pt = rng.uniform([-1, -1, 1], [1, 1, 3])
            assert visible(pt, view, vd, INTR) == brute_visible(pt, view, vd, INTR)


class TestVisibilityMask:
    @pytest.mark.parametrize("seed", range(4))
    def test_union_oracle(self, seed):
        rng = np.random.default_rng(seed)
        depth = rng.uniform(1.8, 2.2, (20, 20))
        depth[rng.uniform(size=depth.shape) < 0.1] = 0
        pose = random_pose(rng, 0.05, 0.05)
        views = [(random_pose(rng, 0.1, 0.1), rng.uniform(1.8, 2.2, (20, 20))) for _ in range(3)]
        mask = visibility_mask(depth, pose, views, INTR)
        for v in range(20):
            for u in range(20):
                if depth[v, u] <= 0:
                    assert not mask[v, u]
                    continue
                pt = back_project((u, v), depth[v, u], INTR, pose)
                assert mask[v, u] == any(brute_visible(pt, vp, vd, INTR) for vp, vd in views)

    def test_subset_of_valid(self):
        rng = np.random.default_rng(7)
        depth = plane()
        depth[rng.uniform(size=depth.shape) < 0.3] = 0
        mask = visibility_mask(depth, Pose.identity(), [(Pose.identity(), plane())], INTR)
        assert not (mask & (depth <= 0)).any()
        assert mask[depth > 0].all()

    def test_no_views(self):
        assert not visibility_mask(plane(), Pose.identity(), [], INTR).any()

    def test_monotone_in_tolerance(self):
        rng = np.random.default_rng(8)
        depth = rng.uniform(1.9, 2.1, (20, 20))
        views = [(random_pose(rng, 0.05, 0.05), rng.uniform(1.9, 2.1, (20, 20)))]
        masks = [visibility_mask(depth, Pose.identity(), views, INTR, tol) for tol in (0.001, 0.01, 0.05, 0.2)]
        for a, b in zip(masks, masks[1:]):
            assert not (a & ~b).any()

    def test_stride_two_keeps_validity(self):
        intr = CameraIntrinsics(400.0, 400.0, 399.5, 299.5, 800, 600)
        depth = np.full((600, 800), 2.0)
        depth[:, :10] = 0
        mask = visibility_mask(depth, Pose.identity(), [(Pose.identity(), depth)], intr)
        assert mask.shape == depth.shape
        assert not mask[:, :10].any() and mask[:, 12:].all()

    def test_visible_fraction(self):
        depth = plane()
        assert visible_fraction(depth, Pose.identity(), (Pose.identity(), depth), INTR) == 1.0
        assert visible_fraction(np.zeros((20, 20)), Pose.identity(), (Pose.identity(), depth), INTR) == 0.0


class TestTrackingMask:
    def test_intersection_oracle(self):
        rng = np.random.default_rng(0)
        depth = rng.uniform(1, 2, (20, 20)) * (rng.uniform(size=(20, 20)) > 0.2)
        frame = Frame(0, 0.0, np.zeros((20, 20, 3)), depth)
        sil = rng.uniform(0.95, 1.0, (20, 20))
        vis = rng.uniform(size=(20, 20)) > 0.3
        render = RenderOutput(np.zeros((20, 20, 3)), np.zeros((20, 20)), sil)
        expected = (depth > 0) & (sil > 0.99) & vis
        np.testing.assert_array_equal(tracking_mask(frame, render, vis), expected)
        np.testing.assert_array_equal(tracking_mask(frame, render, None), (depth > 0) & (sil > 0.99))

    def test_soft_weights(self):
        rng = np.random.default_rng(1)
        depth = rng.uniform(1, 2, (20, 20)) * (rng.uniform(size=(20, 20)) > 0.2)
        frame = Frame(0, 0.0, np.zeros((20, 20, 3)), depth)
        sil = rng.uniform(0, 1, (20, 20))
        vis = rng.uniform(size=(20, 20)) > 0.3
        render = RenderOutput(np.zeros((20, 20, 3)), np.zeros((20, 20)), sil)
        np.testing.assert_array_equal(tracking_mask(frame, render, vis, soft=True), sil * (depth > 0) * vis)
