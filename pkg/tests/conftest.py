import numpy as np
import pytest

from scatrel.core.flow import HamiltonianSystem
from scatrel.core.potential import PotentialModel


@pytest.fixture(scope="module")
def free_system() -> HamiltonianSystem:
    return HamiltonianSystem(PotentialModel("zero"), 0.5)


@pytest.fixture(scope="module")
def weak_gaussian() -> HamiltonianSystem:
    return HamiltonianSystem(PotentialModel("gaussian", {"amplitude": 0.1, "width": 1.0}), 0.5)


@pytest.fixture(scope="module")
def bump_system() -> HamiltonianSystem:
    return HamiltonianSystem(PotentialModel("compact-bump", {"amplitude": 0.1, "radius": 3.0}), 0.5)


def unit(angle: float) -> np.ndarray:
    return np.array([np.cos(angle), np.sin(angle)])
