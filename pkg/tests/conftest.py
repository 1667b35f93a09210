import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from suturekit import bench


@pytest.fixture(scope="session")
def rig():
    return bench.default_rig()


@pytest.fixture(scope="session")
def shape():
    return bench.DEFAULT_SHAPE


@pytest.fixture(scope="session")
def mono_camera():
    return bench.default_mono_camera()


def random_rotation(rng):
    q = rng.normal(size=4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()
