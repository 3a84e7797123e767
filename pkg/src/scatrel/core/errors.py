"""Exception hierarchy for scatrel.

Precondition and input failures derive from ``ValueError``; numerical failures
derive from ``RuntimeError``. Everything derives from ``ScatrelError`` so the CLI
can catch library errors in one place.
"""

from __future__ import annotations

from typing import Any, Optional


class ScatrelError(Exception):
    """Base class for all library errors."""


class DomainError(ScatrelError, ValueError):
    """Input outside the domain of a model or operation."""


class UnsupportedDecayError(ScatrelError, ValueError):
    """Potential decay exponent rho <= 1 (long range)."""


class IntegrationError(ScatrelError, RuntimeError):
    def __init__(self, message: str, last_good_time: float):
        super().__init__(f"{message} (last good time {last_good_time:.6g})")
        self.last_good_time = last_good_time


class RejectedTrajectoryError(ScatrelError, RuntimeError):
    def __init__(self, message: str, drift: float):
        super().__init__(message)
        self.drift = drift


class NoAsymptoticsError(ScatrelError, RuntimeError):
    def __init__(self, message: str, classification: str):
        super().__init__(message)
        self.classification = classification


class DegenerateEndpointError(ScatrelError, RuntimeError):
    """Conjugate point at the final endpoint (caustic at the detector)."""


class DegenerateSolutionError(ScatrelError, ValueError):
    """Operation needs a non-degenerate solution (sigma_hat != 0)."""


class DiagonalExcludedError(ScatrelError, ValueError):
    """Requested (omega, theta) lies on the excluded diagonal."""


class StencilInvalidError(ScatrelError, RuntimeError):
    """Branch continuation jumped or failed inside a finite-difference stencil."""


class RegionError(ScatrelError, ValueError):
    """Point outside the configured phase region, or no characteristic found."""


class PatchInvalidError(ScatrelError, RuntimeError):
    def __init__(self, message: str, bad_region: Optional[Any] = None):
        super().__init__(message)
        self.bad_region = bad_region


class GeometryError(ScatrelError, ValueError):
    """Degenerate parametrization or insufficient relation samples."""


class OracleBudgetError(ScatrelError, RuntimeError):
    """Partial-wave computation exceeds its radius or angular-momentum budget."""


class AliasingError(ScatrelError, ValueError):
    """Torus grid too coarse for the requested h and symbol support."""


class ConfigError(ScatrelError, ValueError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.line = line
        self.field = field
