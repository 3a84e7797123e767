from scatrel.core.errors import ScatrelError
from scatrel.core.flow import HamiltonianSystem, Tolerances
from scatrel.core.potential import PotentialModel

__all__ = [
    "HamiltonianSystem",
    "PotentialModel",
    "ScatrelError",
    "Tolerances",
]
