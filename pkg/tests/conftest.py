import numpy as np
import pytest

from gvio.geometry import ExtendedPose, Pose, gamma
from gvio.state import Landmark, NavState


def random_rotation(rng):
    v = rng.standard_normal(3)
    v = v / np.linalg.norm(v) * rng.uniform(0.0, np.pi * 0.98)
    return gamma(0, v)


def random_state(rng, n_clones=3, n_landmarks=2, constellations=("GPS",),
                 estimate_extrinsics=True, pos_scale=10.0):
    """A well-formed NavState with random content for property tests."""
    x = NavState(
        imu=ExtendedPose(random_rotation(rng),
                         rng.standard_normal(3) * pos_scale,
                         rng.standard_normal(3)),
        gyro_bias=rng.standard_normal(3) * 0.01,
        accel_bias=rng.standard_normal(3) * 0.05,
        extrinsics=Pose(random_rotation(rng), rng.standard_normal(3) * 0.2),
        estimate_extrinsics=estimate_extrinsics,
    )
    for i in range(n_clones):
        x.clones[i] = Pose(random_rotation(rng),
                           rng.standard_normal(3) * pos_scale)
        x.clone_times[i] = float(i) * 0.1
    fids = []
    for j in range(n_landmarks):
        fid = 100 + j
        anchor = int(rng.integers(0, n_clones)) if n_clones else None
        x.landmarks[fid] = Landmark(rng.standard_normal(3) * pos_scale, anchor)
        fids.append(fid)
    for const in constellations:
        x.clock_biases[const] = float(rng.standard_normal() * 100.0)
    if constellations:
        x.clock_drift = float(rng.standard_normal())
    return x


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
