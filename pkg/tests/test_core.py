import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtgslam.core import (
    CameraIntrinsics,
    ConfigurationError,
    Frame,
    Gaussian,
    GaussianSet,
    InvalidInputError,
    InvalidStateError,
    Pose,
    Section,
    SectionState,
    back_project,
    pose_compose,
    pose_distance,
    pose_inverse,
    pose_of,
    project,
    quat_from_axis_angle,
    quat_to_matrix,
)

K = CameraIntrinsics(500.0, 480.0, 319.5, 239.5, 640, 480)


def rot_z(deg):
    a = np.radians(deg)
    return np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]])


unit = st.floats(-1, 1, allow_nan=False)
poses = st.builds(
    lambda ax, ay, az, ang, tx, ty, tz: Pose(
        quat_from_axis_angle([ax + 1e-3, ay, az], ang), np.array([tx, ty, tz]) * 3
    ),
    unit, unit, unit, st.floats(-3.1, 3.1), unit, unit, unit,
)


class TestIntrinsics:
    @pytest.mark.parametrize("args", [
        (0, 1, 5, 5, 10, 10), (1, -1, 5, 5, 10, 10), (1, 1, 0, 5, 10, 10), (1, 1, 5, 10, 10, 10),
    ])
    def test_invalid_rejected(self, args):
        with pytest.raises(InvalidInputError):
            CameraIntrinsics(*args)

    def test_depth_scale_positive(self):
        with pytest.raises(InvalidInputError):
            CameraIntrinsics(1, 1, 5, 5, 10, 10, depth_scale=0)

    def test_f_mean_and_shape(self):
        assert K.f_mean == 490.0
        assert K.shape == (480, 640)


class TestBackProject:
    def test_principal_ray(self):
        np.testing.assert_allclose(back_project((K.cx, K.cy), 1.0, K, Pose.identity()), [0, 0, 1])

    def test_pinhole_arithmetic(self):
        k = CameraIntrinsics(200.0, 200.0, 319.5, 239.5, 640, 480)
        np.testing.assert_allclose(back_project((k.cx + k.fx, k.cy), 2.0, k, Pose.identity()), [2, 0, 2])

    def test_rigid_transform(self):
        p = Pose(np.array([1.0, 0, 0, 0]), [0, 0, 5])
        np.testing.assert_allclose(back_project((K.cx, K.cy), 1.0, K, p), [0, 0, 6])

    @pytest.mark.parametrize("d", [0.0, -1.0])
    def test_nonpositive_depth(self, d):
        with pytest.raises(InvalidInputError):
            back_project((10, 10), d, K)

    def test_outside_image(self):
        with pytest.raises(InvalidInputError):
            back_project((640, 10), 1.0, K)


class TestProject:
    def test_principal_point(self):
        pr = project([0, 0, 1], K, Pose.identity())
        assert (pr.u, pr.v, pr.z_cam) == (K.cx, K.cy, 1.0)
        assert not pr.behind_camera

    def test_behind_camera_flagged(self):
        pr = project([0, 0, -1], K, Pose.identity())
        assert pr.behind_camera
        assert pr.z_cam == -1.0

    @settings(max_examples=200, deadline=None)
    @given(poses, st.floats(0, 639), st.floats(0, 479), st.floats(0.05, 50))
    def test_round_trip(self, pose, u, v, d):
        pr = project(back_project((u, v), d, K, pose), K, pose)
        assert pr.u == pytest.approx(u, rel=1e-9, abs=1e-9)
        assert pr.v == pytest.approx(v, rel=1e-9, abs=1e-9)
        assert pr.z_cam == pytest.approx(d, rel=1e-9)


class TestPoseAlgebra:
    def test_identity_right(self):
        p = Pose(quat_from_axis_angle([1, 2, 3], 0.7), [1, 2, 3])
        q = pose_compose(p, Pose.identity())
        np.testing.assert_allclose(q.vector(), p.vector(), atol=1e-12)

    def test_z_rotation_twice(self):
        r90 = Pose.from_matrix(np.block([[rot_z(90), np.zeros((3, 1))], [np.zeros((1, 3)), np.ones((1, 1))]]))
        np.testing.assert_allclose(pose_compose(r90, r90).R, rot_z(180), atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(poses)
    def test_inverse(self, p):
        ident = pose_compose(p, pose_inverse(p))
        np.testing.assert_allclose(ident.matrix(), np.eye(4), atol=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(poses, poses, poses)
    def test_associative(self, a, b, c):
        left = pose_compose(pose_compose(a, b), c).matrix()
        right = pose_compose(a, pose_compose(b, c)).matrix()
        np.testing.assert_allclose(left, right, atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(poses, poses)
    def test_compose_matches_matrices(self, a, b):
        np.testing.assert_allclose(pose_compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(poses)
    def test_unit_quaternion(self, p):
        assert abs(np.linalg.norm(p.q) - 1) < 1e-9

    def test_quaternion_matrix_oracle(self):
        # rotation about z by a: closed form
        a = 0.37
        np.testing.assert_allclose(quat_to_matrix(quat_from_axis_angle([0, 0, 1], a)), rot_z(np.degrees(a)),
                                   atol=1e-12)

    def test_tum_round_trip(self):
        p = Pose(quat_from_axis_angle([0.3, -1, 2], 1.1), [0.1, -0.2, 0.3])
        q = Pose.from_tum(*p.tum_fields())
        np.testing.assert_allclose(q.vector(), p.vector(), atol=1e-12)

    def test_distance(self):
        a = Pose.identity()
        b = Pose(quat_from_axis_angle([0, 1, 0], 0.2), [0.3, 0.4, 0])
        t, r = pose_distance(a, b)
        assert t == pytest.approx(0.5)
        assert r == pytest.approx(0.2)

    def test_pose_of_missing(self):
        with pytest.raises(ConfigurationError):
            pose_of({0: Pose.identity()}, 3)
        with pytest.raises(ConfigurationError):
            pose_of([Pose.identity()], 1)


class TestFrame:
    def test_valid_mask(self):
        d = np.array([[0.0, 1.0], [2.0, 0.0]])
        f = Frame(0, 0.0, np.zeros((2, 2, 3)), d)
        np.testing.assert_array_equal(f.valid_mask, d > 0)

    @pytest.mark.parametrize("rgb,depth", [
        (np.full((2, 2, 3), 1.5), np.ones((2, 2))),
        (np.zeros((2, 2, 3)), -np.ones((2, 2))),
        (np.zeros((2, 2)), np.ones((2, 2))),
        (np.zeros((2, 3, 3)), np.ones((2, 2))),
        (np.zeros((2, 2, 3)), np.full((2, 2), np.nan)),
    ])
    def test_invariants(self, rgb, depth):
        with pytest.raises(InvalidInputError):
            Frame(0, 0.0, rgb, depth)


class TestGaussians:
    def test_five_learnable_scalars(self):
        assert Gaussian.LEARNABLE_SCALARS == 5
        gs = GaussianSet(np.zeros((4, 3)), np.ones(4), np.ones(4), np.zeros(4), np.zeros((4, 2)), np.ones(4))
        assert gs.learnable_vector().shape == (4, 5)
        assert gs.n_learnable_scalars == 20

    def test_position_is_derived(self):
        intr = CameraIntrinsics(10.0, 10.0, 4.5, 4.5, 10, 10)
        gs = GaussianSet([[1, 0, 0]], [0.1], [0.5], [2], [[4, 5]], [2.0])
        p = Pose(quat_from_axis_angle([0, 1, 0], 0.3), [1, 0, 0])
        expected = back_project((4, 5), 2.0, intr, p)
        np.testing.assert_allclose(gs.world_positions({2: p}, intr)[0], expected)

    def test_concat_and_items(self):
        a = GaussianSet([[1, 0, 0]], [0.1], [0.5], [0], [[1, 2]], [1.0])
        b = GaussianSet([[0, 1, 0]], [0.2], [0.6], [1], [[3, 4]], [2.0])
        c = GaussianSet.concat([a, b])
        assert len(c) == 2
        assert c[1] == Gaussian((0.0, 1.0, 0.0), 0.2, 0.6, 1, (3, 4), 2.0)
        assert len(GaussianSet.concat([])) == 0

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            GaussianSet(np.zeros((2, 3)), [1], [1, 1], [0, 0], np.zeros((2, 2)), [1, 1])

    def test_readonly_after_freeze(self):
        gs = GaussianSet([[1, 0, 0]], [0.1], [0.5], [0], [[1, 2]], [1.0], baked=[[0, 0, 1]])
        gs.set_readonly()
        with pytest.raises(ValueError):
            gs.opacity[0] = 0.1
        with pytest.raises(InvalidStateError):
            gs.extend(GaussianSet.empty())

    def test_checksum_tracks_content(self):
        gs = GaussianSet([[1, 0, 0]], [0.1], [0.5], [0], [[1, 2]], [1.0])
        h = gs.checksum()
        assert gs.copy().checksum() == h
        gs.opacity[0] = 0.4
        assert gs.checksum() != h


class TestSection:
    def test_head_and_owners(self):
        s = Section(3, [120])
        assert s.head_index == 120
        s.add_frame(121)
        s.add_gaussians(GaussianSet([[1, 0, 0]], [0.1], [0.5], [121], [[1, 2]], [1.0]))
        assert s.n_gaussians == 1
        with pytest.raises(InvalidInputError):
            s.add_gaussians(GaussianSet([[1, 0, 0]], [0.1], [0.5], [7], [[1, 2]], [1.0]))

    def test_frozen_rejects_changes(self):
        s = Section(0, [0], state=SectionState.FROZEN, gaussians=GaussianSet.empty())
        with pytest.raises(InvalidStateError):
            s.add_frame(1)

    def test_visibility_frames(self):
        assert Section(0, list(range(40))).visibility_frames() == [0, 20, 39]
        assert Section(0, [5]).visibility_frames() == [5]

    def test_needs_head(self):
        with pytest.raises(InvalidInputError):
            Section(0, [])
