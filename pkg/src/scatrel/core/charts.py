"""Coordinate charts on S^{n-1} for n = 2 (angle) and n = 3 (stereographic)."""

from __future__ import annotations

import numpy as np

from scatrel.core.errors import DomainError


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


class AngleChart:
    """omega = (cos u, sin u); coordinates unwrapped around ``center``."""

    dimension = 2

    def __init__(self, center: float = 0.0):
        self.center = float(center)

    def to_sphere(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        a = u[..., 0] if u.ndim and u.shape[-1] == 1 else u
        return np.stack([np.cos(a), np.sin(a)], axis=-1)

    def from_sphere(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a = np.arctan2(x[..., 1], x[..., 0])
        return (self.center + wrap_angle(a - self.center))[..., None]

    def jacobian(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        a = u[..., 0] if u.ndim and u.shape[-1] == 1 else u
        return np.stack([-np.sin(a), np.cos(a)], axis=-1)[..., None]


class StereographicChart:
    """Projection from the pole -sign*e3; covers every point except that pole."""

    dimension = 3

    def __init__(self, sign: int = 1):
        if sign not in (1, -1):
            raise DomainError("stereographic chart sign must be +1 or -1")
        self.sign = sign

    def to_sphere(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        r2 = np.sum(u**2, axis=-1)
        d = 1.0 + r2
        return np.stack([2.0 * u[..., 0] / d, 2.0 * u[..., 1] / d, self.sign * (1.0 - r2) / d], axis=-1)

    def from_sphere(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        denom = 1.0 + self.sign * x[..., 2]
        if np.any(denom < 1e-12):
            raise DomainError("point at the projection pole of this chart")
        return np.stack([x[..., 0] / denom, x[..., 1] / denom], axis=-1)

    def jacobian(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        d = 1.0 + np.sum(u**2, axis=-1)
        eye = np.eye(2)
        top = 2.0 * eye / d[..., None, None] - 4.0 * u[..., :, None] * u[..., None, :] / (d**2)[..., None, None]
        bottom = (-4.0 * self.sign * u / (d**2)[..., None])[..., None, :]
        return np.concatenate([top, bottom], axis=-2)


def chart_for(point) -> AngleChart | StereographicChart:
    """Chart adapted to a base point; n=3 picks the projection pole farthest from it."""
    x = np.asarray(point, dtype=float)
    if x.shape[-1] == 2:
        return AngleChart(center=float(np.arctan2(x[1], x[0])))
    if x.shape[-1] == 3:
        return StereographicChart(1 if x[2] >= 0 else -1)
    raise DomainError(f"charts are available for n = 2, 3; got n = {x.shape[-1]}")
