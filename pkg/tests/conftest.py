import numpy as np
import pytest

from driftplan.esm import build_manifold
from driftplan.params import TireParams, VehicleParams


@pytest.fixture(scope="session")
def vehicle():
    return VehicleParams()


@pytest.fixture(scope="session")
def tires():
    return TireParams()


@pytest.fixture(scope="session")
def manifold(vehicle, tires):
    # small radius set keeps unit-test startup reasonable; the acceptance
    # suite builds the full default set
    return build_manifold([10.0, 15.0, 20.0, 30.0, 100.0], vehicle, tires)
