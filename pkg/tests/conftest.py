import numpy as np
import pytest

from vtgslam.core import CameraIntrinsics, Frame, GaussianSet, Pose, quat_from_axis_angle
from vtgslam.synthetic import SceneSpec, SequenceSpec, generate


@pytest.fixture
def intr16():
    return CameraIntrinsics(16.0, 16.0, 7.5, 7.5, 16, 16)


@pytest.fixture
def intr32():
    return CameraIntrinsics(30.0, 30.0, 15.5, 15.5, 32, 32)


def random_pose(rng, rot=0.3, trans=1.0):
    axis = rng.normal(size=3)
    return Pose(quat_from_axis_angle(axis, rng.uniform(-rot, rot)), rng.uniform(-trans, trans, 3))


def random_gaussians(rng, n, intr, owners=(0,), depth=(1.0, 3.0), sigma_px=(0.5, 2.5)):
    pix = np.stack([rng.integers(0, intr.width, n), rng.integers(0, intr.height, n)], axis=1)
    d = rng.uniform(*depth, n)
    radius = rng.uniform(*sigma_px, n) * d / intr.f_mean
    return GaussianSet(rng.uniform(0, 1, (n, 3)), radius, rng.uniform(0.05, 0.95, n),
                       rng.choice(list(owners), n), pix, d)


def frame_from(index, rgb, depth):
    return Frame(index, float(index), np.clip(rgb, 0, 1), np.maximum(depth, 0))


@pytest.fixture(scope="session")
def room_sequence():
    """Twelve 32x32 frames of the synthetic room along a short orbit."""
    spec = SequenceSpec(SceneSpec(texture_seed=3), "orbit", 12, 32, 32, arc_deg=6.0, supersample=2)
    return generate(spec)


@pytest.fixture(scope="session")
def room64():
    """Six 64x64 frames along a slow orbit."""
    spec = SequenceSpec(SceneSpec(texture_seed=1), "orbit", 6, 64, 64, arc_deg=3.0, supersample=2)
    return generate(spec)


CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
