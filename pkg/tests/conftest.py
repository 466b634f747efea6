import numpy as np
import pytest

from core.geometry import LandmarkSet, Pose, project
from core.pnp_ransac import Correspondences
from db.models import CameraIntrinsics, Channel


@pytest.fixture
def K() -> CameraIntrinsics:
    return CameraIntrinsics(fx=1000.0, fy=1000.0, cx=400.0, cy=360.0)


@pytest.fixture
def landmarks() -> LandmarkSet:
    # 18 points in a 0.3 m cube, never coplanar
    rng = np.random.default_rng(3)
    return LandmarkSet(rng.uniform(-0.15, 0.15, size=(18, 3)))


def random_pose(rng: np.random.Generator, distance: float = 1.0) -> Pose:
    axis = rng.normal(size=3)
    angle = rng.uniform(0.0, 180.0)
    t = [rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), distance]
    return Pose.from_axis_angle(axis, angle, t)


@pytest.fixture
def make_pose():
    return random_pose


def exact_correspondences(landmarks: LandmarkSet, pose: Pose, K: CameraIntrinsics,
                          channel: Channel = Channel.RGB) -> Correspondences:
    kps = project(landmarks, pose, K)
    code = 0 if channel == Channel.RGB else 1
    return Correspondences(landmarks.points, kps.points, np.full(landmarks.Z, code), np.arange(landmarks.Z))


@pytest.fixture
def make_correspondences():
    return exact_correspondences
