"""
Short-range potential models.

Every model is a radial profile f(r) composed with an optional affine map
y = (x - center) / aspect, so V(x) = f(|y|). With the default center (origin)
and aspect (ones) the model is radial. Profiles return (f, f'/r, f'') so that
gradients and Hessians stay regular at the origin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from scatrel.core.errors import DomainError

logger = logging.getLogger(__name__)

KINDS = ("zero", "gaussian", "compact-bump", "yukawa-smoothed", "radial-tabulated")
COMPACT_KINDS = ("zero", "compact-bump", "radial-tabulated")

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "zero": {},
    "gaussian": {"amplitude": 0.1, "width": 1.0},
    "compact-bump": {"amplitude": 0.1, "radius": 3.0},
    "yukawa-smoothed": {"amplitude": 0.1, "width": 1.0, "softening": 0.5},
    "radial-tabulated": {},
}

# Safety factor applied to the sampled decay constants.
C_ALPHA_SAFETY = 1.05
# Edge of the bump's open support below which the profile is set to zero.
_BUMP_EDGE = 1e-12


@dataclass(frozen=True)
class DecayReport:
    ratios: tuple[float, float, float]
    constants: tuple[float, float, float]
    passed: bool
    witness: Optional[np.ndarray] = None
    witness_order: Optional[int] = None
    sample_count: int = 0


def load_table(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a two-column (radius, value) text table; '#' starts a comment."""
    df = pd.read_csv(path, sep=r"[\s,]+", comment="#", header=None, engine="python")
    if df.shape[1] < 2:
        raise DomainError(f"Tabulated potential {path} needs two columns, found {df.shape[1]}")
    radius = df.iloc[:, 0].to_numpy(dtype=float)
    value = df.iloc[:, 1].to_numpy(dtype=float)
    return radius, value


def _fibonacci_directions(count: int, dimension: int) -> np.ndarray:
    if dimension == 2:
        angles = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(count)
        return np.column_stack([np.cos(angles), np.sin(angles)])
    if dimension == 3:
        i = np.arange(count) + 0.5
        polar = np.arccos(1.0 - 2.0 * i / count)
        azimuth = np.pi * (1.0 + np.sqrt(5.0)) * i
        return np.column_stack(
            [np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)]
        )
    rng = np.random.default_rng(count)
    d = rng.normal(size=(count, dimension))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _uniform_directions(count: int, dimension: int) -> np.ndarray:
    if dimension == 2:
        angles = 2.0 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(angles), np.sin(angles)])
    return _fibonacci_directions(count, dimension)


class PotentialModel:
    """Immutable potential V on R^n with analytic (or spline) derivatives."""

    def __init__(
        self,
        kind: str,
        params: Optional[Mapping[str, float]] = None,
        *,
        rho: float = 2.0,
        dimension: int = 2,
        table: Optional[tuple[Sequence[float], Sequence[float]]] = None,
        center: Optional[Sequence[float]] = None,
        aspect: Optional[Sequence[float]] = None,
        c_alpha: Optional[Sequence[float]] = None,
        extrapolation: str = "zero",
    ):
        if kind not in KINDS:
            raise DomainError(f"Unknown potential kind '{kind}', expected one of {KINDS}")
        if dimension < 2:
            raise DomainError(f"dimension must be >= 2, got {dimension}")
        self.kind = kind
        self.dimension = int(dimension)
        self.rho = float(rho)
        merged = dict(DEFAULT_PARAMS[kind])
        merged.update(params or {})
        self.params = merged

        self.center = np.zeros(self.dimension) if center is None else np.asarray(center, dtype=float)
        self.aspect = np.ones(self.dimension) if aspect is None else np.asarray(aspect, dtype=float)
        if self.center.shape != (self.dimension,) or self.aspect.shape != (self.dimension,):
            raise DomainError("center and aspect must have one entry per dimension")
        if np.any(self.aspect <= 0):
            raise DomainError("aspect entries must be positive")

        if extrapolation not in ("zero", "none"):
            raise DomainError(f"extrapolation must be 'zero' or 'none', got '{extrapolation}'")
        self.extrapolation = extrapolation
        self._spline: Optional[CubicSpline] = None
        self._table_end = 0.0
        if kind == "radial-tabulated":
            self._init_table(table)
        self._check_params()

        self._env_r = np.linspace(0.0, self._far_radius_y(), 4001)
        f, g, f2 = self._profile(self._env_r)
        self._env_f = f
        self._env_df = np.abs(g * self._env_r)

        if c_alpha is None:
            self.c_alpha = self._compute_c_alpha()
        else:
            self.c_alpha = tuple(float(c) for c in c_alpha)
            if len(self.c_alpha) != 3:
                raise DomainError("c_alpha needs three constants (orders 0, 1, 2)")
        logger.debug(f"Potential {self.kind}: params={self.params} C_alpha={self.c_alpha}")

    # construction helpers

    def _init_table(self, table) -> None:
        if table is None:
            raise DomainError("radial-tabulated potential needs a (radius, value) table")
        r = np.asarray(table[0], dtype=float)
        v = np.asarray(table[1], dtype=float)
        if r.ndim != 1 or r.shape != v.shape or r.size < 4:
            raise DomainError("table must be two equal-length columns with at least 4 rows")
        if np.any(np.diff(r) <= 0):
            raise DomainError("table radii must be strictly increasing")
        if r[0] != 0.0:
            raise DomainError("table radii must start at 0")
        scale = max(np.max(np.abs(v)), 1e-300)
        if self.extrapolation == "zero" and abs(v[-1]) > 1e-12 * scale:
            raise DomainError("last tabulated value must vanish for the clamped-zero tail")
        self._spline = CubicSpline(r, v, bc_type=((1, 0.0), (1, 0.0)))
        self._table_end = float(r[-1])

    def _check_params(self) -> None:
        p = self.params
        if self.kind == "gaussian" and p["width"] <= 0:
            raise DomainError("gaussian width must be positive")
        if self.kind == "compact-bump" and p["radius"] <= 0:
            raise DomainError("compact-bump radius must be positive")
        if self.kind == "yukawa-smoothed" and (p["width"] <= 0 or p["softening"] <= 0):
            raise DomainError("yukawa-smoothed width and softening must be positive")

    @property
    def width(self) -> float:
        """Characteristic length of the profile in y coordinates."""
        p = self.params
        if self.kind == "gaussian":
            return float(p["width"])
        if self.kind == "compact-bump":
            return 0.5 * float(p["radius"])
        if self.kind == "yukawa-smoothed":
            return float(max(p["width"], p["softening"]))
        if self.kind == "radial-tabulated":
            return 0.5 * self._table_end
        return 1.0

    @property
    def scale(self) -> float:
        """Characteristic length in x coordinates (includes center offset and aspect)."""
        return float(np.linalg.norm(self.center) + np.max(self.aspect) * self.width)

    def _far_radius_y(self) -> float:
        if self.kind == "compact-bump":
            return 1.5 * float(self.params["radius"])
        if self.kind == "radial-tabulated":
            return 1.5 * self._table_end
        if self.kind == "zero":
            return 10.0
        return 60.0 * self.width

    @property
    def is_radial(self) -> bool:
        return bool(np.all(self.center == 0.0) and np.all(self.aspect == 1.0))

    @property
    def is_compact(self) -> bool:
        return self.kind in COMPACT_KINDS

    @property
    def support_radius(self) -> Optional[float]:
        if self.kind == "zero":
            return 0.0
        if self.kind == "compact-bump":
            r_y = float(self.params["radius"])
        elif self.kind == "radial-tabulated":
            r_y = self._table_end
        else:
            return None
        return float(np.linalg.norm(self.center) + np.max(self.aspect) * r_y)

    # radial profiles: (f, f'/r, f'')

    def _profile(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        r = np.asarray(r, dtype=float)
        p = self.params
        if self.kind == "zero":
            z = np.zeros_like(r)
            return z, z.copy(), z.copy()

        if self.kind == "gaussian":
            a, w = p["amplitude"], p["width"]
            f = a * np.exp(-0.5 * (r / w) ** 2)
            g = -f / w**2
            f2 = (r**2 / w**4 - 1.0 / w**2) * f
            return f, g, f2

        if self.kind == "compact-bump":
            a, rc = p["amplitude"], p["radius"]
            u = r / rc
            inside = u < 1.0 - _BUMP_EDGE
            s = np.where(inside, 1.0 - u**2, 1.0)
            bump = np.where(inside, np.exp(1.0 - 1.0 / s), 0.0)
            f = a * bump
            g = np.where(inside, a * bump * (-2.0 / (s**2 * rc**2)), 0.0)
            d2u = bump * (4.0 * u**2 / s**4 - 2.0 / s**2 - 8.0 * u**2 / s**3)
            f2 = np.where(inside, a * d2u / rc**2, 0.0)
            return f, g, f2

        if self.kind == "yukawa-smoothed":
            a, w, soft = p["amplitude"], p["width"], p["softening"]
            rr = np.sqrt(r**2 + soft**2)
            big_f = a * soft * np.exp(-(rr - soft) / w) / rr
            g = -big_f * (1.0 / (w * rr) + 1.0 / rr**2)
            d_big_f = big_f * (-1.0 / w - 1.0 / rr)
            dg = -(d_big_f * (1.0 / (w * rr) + 1.0 / rr**2) + big_f * (-1.0 / (w * rr**2) - 2.0 / rr**3))
            f2 = g + r**2 * dg / rr
            return big_f, g, f2

        # radial-tabulated
        inside = r <= self._table_end
        rc = np.clip(r, 0.0, self._table_end)
        f = np.where(inside, self._spline(rc), 0.0)
        d1 = np.where(inside, self._spline(rc, 1), 0.0)
        f2 = np.where(inside, self._spline(rc, 2), 0.0)
        small = r < 1e-8
        g = np.where(small, f2, d1 / np.where(small, 1.0, r))
        return f, g, f2

    # point evaluation

    def _prepare(self, x) -> tuple[np.ndarray, bool]:
        arr = np.asarray(x, dtype=float)
        single = arr.ndim == 1
        pts = np.atleast_2d(arr)
        if pts.shape[-1] != self.dimension:
            raise DomainError(f"expected points of dimension {self.dimension}, got shape {arr.shape}")
        if not np.all(np.isfinite(pts)):
            raise DomainError("non-finite point passed to potential")
        return pts, single

    def _local(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = (pts - self.center) / self.aspect
        r = np.linalg.norm(y, axis=1)
        if self._strict_table and np.any(r > self._table_end):
            raise DomainError(
                f"radius {float(np.max(r)):.6g} beyond the table end {self._table_end:.6g} "
                "and extrapolation is disabled"
            )
        return y, r

    @property
    def _strict_table(self) -> bool:
        return self.kind == "radial-tabulated" and self.extrapolation == "none"

    def _in_range(self, pts: np.ndarray) -> np.ndarray:
        if not self._strict_table:
            return pts
        r = np.linalg.norm((pts - self.center) / self.aspect, axis=1)
        return pts[r <= self._table_end]

    def value(self, x):
        pts, single = self._prepare(x)
        _, r = self._local(pts)
        f, _, _ = self._profile(r)
        return float(f[0]) if single else f

    __call__ = value

    def grad(self, x):
        pts, single = self._prepare(x)
        y, r = self._local(pts)
        _, g, _ = self._profile(r)
        out = g[:, None] * y / self.aspect
        return out[0] if single else out

    def hess(self, x):
        pts, single = self._prepare(x)
        y, r = self._local(pts)
        _, g, f2 = self._profile(r)
        safe = np.where(r > 1e-12, r, 1.0)
        radial = np.where(r > 1e-12, (f2 - g) / safe**2, 0.0)
        inner = g[:, None, None] * np.eye(self.dimension) + radial[:, None, None] * (
            y[:, :, None] * y[:, None, :]
        )
        scale = 1.0 / self.aspect
        out = inner * scale[None, :, None] * scale[None, None, :]
        return out[0] if single else out

    # decay bookkeeping

    def _ratios(self, pts: np.ndarray) -> np.ndarray:
        bracket = np.sqrt(1.0 + np.sum(pts**2, axis=1))
        v = np.abs(self.value(pts))
        dv = np.linalg.norm(self.grad(pts), axis=1)
        hv = np.linalg.norm(self.hess(pts), ord=2, axis=(1, 2))
        return np.column_stack(
            [v * bracket**self.rho, dv * bracket ** (self.rho + 1), hv * bracket ** (self.rho + 2)]
        )

    def _construction_points(self) -> np.ndarray:
        far = float(np.linalg.norm(self.center)) + float(np.max(self.aspect)) * self._far_radius_y()
        radii = np.unique(np.concatenate([np.linspace(0.0, far, 2000), np.geomspace(1.0, 1e3 * (1.0 + far), 400)]))
        if self.is_radial:
            directions = _uniform_directions(1, self.dimension)
        else:
            directions = _uniform_directions(64 if self.dimension == 2 else 128, self.dimension)
        return (radii[:, None, None] * directions[None, :, :]).reshape(-1, self.dimension)

    def _compute_c_alpha(self) -> tuple[float, float, float]:
        pts = self._in_range(self._construction_points())
        if pts.shape[0] == 0:
            return (0.0, 0.0, 0.0)
        ratios = self._ratios(pts)
        return tuple(float(C_ALPHA_SAFETY * m) for m in ratios.max(axis=0))

    def verify_decay(self, sample_count: int = 256) -> DecayReport:
        """Check |d^a V(x)| <ρ,a> bounds against the stored C_alpha on |x| >= 1."""
        if sample_count < 1:
            raise DomainError("sample_count must be >= 1")
        far = 1e3 * (1.0 + self.scale)
        radii = np.geomspace(1.0, far, sample_count)
        directions = _fibonacci_directions(sample_count, self.dimension)
        pts = self._in_range(radii[:, None] * directions)
        if pts.shape[0] == 0:
            return DecayReport((0.0, 0.0, 0.0), self.c_alpha, True, sample_count=sample_count)
        ratios = self._ratios(pts)
        maxima = tuple(float(m) for m in ratios.max(axis=0))
        excess = ratios - np.asarray(self.c_alpha)[None, :] * (1.0 + 1e-12)
        bad = np.argwhere(excess > 0.0)
        if bad.size == 0:
            return DecayReport(maxima, self.c_alpha, True, sample_count=sample_count)
        worst = int(np.argmax(excess.max(axis=1)))
        order = int(np.argmax(excess[worst]))
        logger.warning(f"Decay bound violated at x={pts[worst]} order {order}")
        return DecayReport(maxima, self.c_alpha, False, pts[worst].copy(), order, sample_count)

    # radii derived from the profile envelope

    def _x_radius(self, r_y: float) -> float:
        return float(np.linalg.norm(self.center) + np.max(self.aspect) * r_y)

    def _tail_start(self, envelope: np.ndarray, level: float) -> float:
        above = np.nonzero(envelope > level)[0]
        if above.size == 0:
            return 0.0
        last = above[-1]
        if last + 1 >= self._env_r.size:
            return float(self._env_r[-1])
        return float(self._env_r[last + 1])

    def negligible_radius(self, level: float) -> float:
        """Smallest radius beyond which |V| <= level."""
        if self.is_compact:
            return float(self.support_radius)
        return self._x_radius(self._tail_start(np.abs(self._env_f), level))

    def escape_radius(self, lam: float) -> float:
        """Radius beyond which |x||grad V| + 2|V| < 2 lam, so d^2|q|^2/dt^2 > 0."""
        c = float(np.linalg.norm(self.center))
        amax, amin = float(np.max(self.aspect)), float(np.min(self.aspect))
        env = (c + amax * self._env_r) * self._env_df / amin + 2.0 * np.abs(self._env_f)
        return self._x_radius(self._tail_start(env, 2.0 * lam * (1.0 - 1e-9)))

    def gradient_tail(self, radius: float) -> float:
        """Bound on the integral of |grad V| along a ray beyond the given radius."""
        amax, amin = float(np.max(self.aspect)), float(np.min(self.aspect))
        r_y = max(0.0, (radius - float(np.linalg.norm(self.center))) / amax)
        if self.is_compact and r_y >= self._far_radius_y() / 1.5:
            return 0.0

        def integrand(r: float) -> float:
            _, g, _ = self._profile(np.array([r]))
            return abs(float(g[0]) * r)

        value, _ = quad(integrand, r_y, np.inf, limit=200)
        return value / amin

    @property
    def sup_value(self) -> float:
        return float(np.max(self._env_f))

    def __repr__(self) -> str:
        extra = "" if self.is_radial else f", center={self.center.tolist()}, aspect={self.aspect.tolist()}"
        return f"PotentialModel({self.kind!r}, {self.params}, rho={self.rho}, dimension={self.dimension}{extra})"
