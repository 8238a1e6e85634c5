import numpy as np
import pytest

from imba.geometry import Intrinsics, SE3Pose


DEFAULT_K = Intrinsics(fx=100.0, fy=100.0, cx=320.0, cy=240.0)


@pytest.fixture
def K():
    return DEFAULT_K


def random_pose(rng, max_angle=1.0, max_translation=1.0):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    t = rng.uniform(-max_translation, max_translation, size=3)
    return SE3Pose.exp(np.concatenate([axis * angle, np.zeros(3)])).compose(
        SE3Pose(np.array([1.0, 0, 0, 0]), t))


def random_point_in_front(rng, T, depth_range=(1.0, 5.0)):
    """World point with a comfortable positive depth in camera T."""
    x = rng.uniform(-1.0, 1.0)
    y = rng.uniform(-1.0, 1.0)
    z = rng.uniform(*depth_range)
    return T.inverse().transform(np.array([x, y, z]))
