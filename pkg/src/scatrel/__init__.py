__version__ = "0.1.0"

from scatrel.core import HamiltonianSystem, PotentialModel, ScatrelError  # noqa: E402

__all__ = ["HamiltonianSystem", "PotentialModel", "ScatrelError", "__version__"]
