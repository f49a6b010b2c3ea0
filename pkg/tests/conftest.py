import numpy as np
import pytest

from sgc.pointcloud import PointCloud, SpatialIndex
from sgc.synthetic import HeightField


@pytest.fixture(scope="session")
def terrain():
    f = HeightField.random(5, extent=(0.0, 60.0, 0.0, 50.0))
    return f.sample((0.0, 60.0, 0.0, 50.0), 1.0, seed=5, id="terrain")


@pytest.fixture(scope="session")
def terrain_index(terrain):
    return SpatialIndex(terrain)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, n=500, scale=10.0, id="rand"):
    return PointCloud(rng.uniform(0, scale, (n, 3)), id=id)
