import numpy as np
import pytest

from trailerplan.vehicle import CostWeights, VehicleGeometry


@pytest.fixture(scope="session")
def geom():
    return VehicleGeometry()


@pytest.fixture(scope="session")
def weights():
    return CostWeights()


@pytest.fixture()
def rng():
    return np.random.default_rng(20240817)


def random_interior_state(rng, pos_scale=10.0):
    """Random state strictly inside the constraint envelope."""
    x = np.zeros(9)
    x[0:2] = rng.uniform(-pos_scale, pos_scale, size=2)
    x[2] = rng.uniform(-np.pi, np.pi)
    x[3] = rng.uniform(-0.8, 0.8)
    x[4] = rng.uniform(-0.8, 0.8)
    x[5] = rng.uniform(-0.7, 0.7)
    x[6] = rng.uniform(-0.75, 0.75)
    x[7] = rng.uniform(-0.95, 0.95)
    x[8] = rng.uniform(-0.95, 0.95)
    return x


def random_control(rng):
    return np.array([rng.uniform(-9.5, 9.5), rng.uniform(-38.0, 38.0)])
