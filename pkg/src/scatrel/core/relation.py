"""
Scattering relation on a parameter patch and its Lagrangian test.

A relation point pairs (omega, z) with (theta, -x_inf) where theta = xi_inf.
Base points are written in chart coordinates; covectors are the pairings of z
(resp. -x_inf) with the chart tangent vectors, so the canonical form on each
factor is sum_c d(cov_c) ^ d(base_c).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from scatrel.core.asymptotics import DEFAULT_INCOMING_TOL, orthonormal_frame, scatter
from scatrel.core.charts import AngleChart, chart_for
from scatrel.core.errors import (
    DiagonalExcludedError,
    DomainError,
    GeometryError,
    NoAsymptoticsError,
    PatchInvalidError,
    ScatrelError,
)
from scatrel.core.flow import NON_TRAPPED, HamiltonianSystem, Tolerances

logger = logging.getLogger(__name__)

BAD_FRACTION_LIMIT = 0.10
DIAGONAL_DISTANCE = 1e-6


@dataclass(frozen=True)
class Patch:
    """Rectangle in (omega chart coordinate, z frame coordinate).

    For n = 3 the omega coordinate moves along ``omega_axis`` of the
    stereographic chart adapted to ``omega_base``; the z coordinate is the
    ``z_axis`` component in the omega-perp frame, the other one held at ``z_fixed``.
    """

    omega_range: tuple[float, float]
    z_range: tuple[float, float]
    omega_axis: int = 0
    z_axis: int = 0
    omega_base: Optional[tuple[float, ...]] = None
    z_fixed: float = 0.0

    def __post_init__(self):
        for name in ("omega_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise DomainError(f"patch {name} must be a nonempty interval, got {(lo, hi)}")
        if self.omega_axis not in (0, 1) or self.z_axis not in (0, 1):
            raise DomainError("patch axes must be 0 or 1")

    def omega_chart(self, dimension: int):
        if dimension == 2:
            return AngleChart(center=0.5 * (self.omega_range[0] + self.omega_range[1]))
        base = np.asarray(self.omega_base if self.omega_base is not None else (1.0, 0.0, 0.0), dtype=float)
        return chart_for(base / np.linalg.norm(base))

    def base_coords(self, dimension: int, t: float) -> np.ndarray:
        if dimension == 2:
            return np.array([t])
        chart = self.omega_chart(dimension)
        base = np.asarray(self.omega_base if self.omega_base is not None else (1.0, 0.0, 0.0), dtype=float)
        u = chart.from_sphere(base / np.linalg.norm(base)).astype(float)
        u[self.omega_axis] += t
        return u

    def impact(self, omega: np.ndarray, c: float) -> np.ndarray:
        frame = orthonormal_frame(omega)
        if frame.shape[0] == 1:
            return c * frame[0]
        coords = np.full(frame.shape[0], self.z_fixed)
        coords[self.z_axis] = c
        return coords @ frame


@dataclass
class RelationSample:
    """Relation points on a regular parameter grid (first index: omega, second: z)."""

    params1: np.ndarray
    params2: np.ndarray
    base1: np.ndarray
    cov1: np.ndarray
    base2: np.ndarray
    cov2: np.ndarray
    extraction_error: np.ndarray
    lam: float
    momentum_scale: float = 1.0
    twist_applied: bool = True
    on_diagonal: Optional[np.ndarray] = None
    patch: Optional[Patch] = None
    omega: Optional[np.ndarray] = field(default=None, repr=False)
    z: Optional[np.ndarray] = field(default=None, repr=False)
    theta: Optional[np.ndarray] = field(default=None, repr=False)
    x_inf: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.params1.size, self.params2.size

    @property
    def steps(self) -> tuple[float, float]:
        return float(np.mean(np.diff(self.params1))), float(np.mean(np.diff(self.params2)))

    def flipped(self) -> "RelationSample":
        """Same sample with the sign twist on the second factor undone."""
        return RelationSample(
            self.params1,
            self.params2,
            self.base1,
            self.cov1,
            self.base2,
            -self.cov2,
            self.extraction_error,
            self.lam,
            self.momentum_scale,
            not self.twist_applied,
            self.on_diagonal,
            self.patch,
            self.omega,
            self.z,
            self.theta,
            self.x_inf,
        )

    def to_frame(self) -> pd.DataFrame:
        m1, m2 = self.shape
        u1, u2 = np.meshgrid(self.params1, self.params2, indexing="ij")
        data = {"u1": u1.ravel(), "u2": u2.ravel()}
        for name in ("base1", "cov1", "base2", "cov2"):
            arr = getattr(self, name).reshape(m1 * m2, -1)
            for c in range(arr.shape[1]):
                data[f"{name}_{c + 1}"] = arr[:, c]
        for name in ("omega", "z", "theta", "x_inf"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = arr.reshape(m1 * m2, -1)
            for c in range(arr.shape[1]):
                data[f"{name}_{c + 1}"] = arr[:, c]
        data["extraction_error"] = self.extraction_error.ravel()
        return pd.DataFrame(data)


def graph_sample(
    grad_first: Callable[[np.ndarray, np.ndarray], np.ndarray],
    grad_second: Callable[[np.ndarray, np.ndarray], np.ndarray],
    first_values: Sequence[float],
    second_values: Sequence[float],
    lam: float = 0.5,
) -> RelationSample:
    """Graph of dS for a function S(alpha, beta) on a grid (n = 2 charts)."""
    a = np.asarray(first_values, dtype=float)
    b = np.asarray(second_values, dtype=float)
    aa, bb = np.meshgrid(a, b, indexing="ij")
    return RelationSample(
        params1=a,
        params2=b,
        base1=aa[..., None],
        cov1=np.asarray(grad_first(aa, bb), dtype=float)[..., None],
        base2=bb[..., None],
        cov2=np.asarray(grad_second(aa, bb), dtype=float)[..., None],
        extraction_error=np.zeros_like(aa),
        lam=lam,
    )


def _relation_point(system, patch: Patch, t: float, c: float, tol, incoming_tol, t_max=None):
    n = system.dimension
    chart = patch.omega_chart(n)
    base = patch.base_coords(n, t)
    omega = chart.to_sphere(base)
    z = patch.impact(omega, c)
    try:
        datum, _ = scatter(system, omega, z, tol, incoming_tol, t_max=t_max)
        return omega, z, datum.xi_inf, datum.x_inf, datum.extraction_error, NON_TRAPPED
    except NoAsymptoticsError as exc:
        return omega, z, None, None, np.nan, exc.classification
    except ScatrelError as exc:
        logger.warning(f"Relation point (t={t:.6g}, c={c:.6g}) failed: {exc}")
        return omega, z, None, None, np.nan, "failed"


def _trim(bad: np.ndarray) -> tuple[slice, slice]:
    lo1, hi1, lo2, hi2 = 0, bad.shape[0], 0, bad.shape[1]
    while bad[lo1:hi1, lo2:hi2].any():
        sub = bad[lo1:hi1, lo2:hi2]
        edges = {
            "top": sub[0].sum(),
            "bottom": sub[-1].sum(),
            "left": sub[:, 0].sum(),
            "right": sub[:, -1].sum(),
        }
        worst = max(edges, key=edges.get)
        if edges[worst] == 0:
            raise PatchInvalidError("trapped or undecided points in the patch interior cannot be trimmed away")
        if worst == "top":
            lo1 += 1
        elif worst == "bottom":
            hi1 -= 1
        elif worst == "left":
            lo2 += 1
        else:
            hi2 -= 1
        if hi1 - lo1 < 3 or hi2 - lo2 < 3:
            raise PatchInvalidError("patch trimmed below 3 points per direction")
    return slice(lo1, hi1), slice(lo2, hi2)


def sample(
    system: HamiltonianSystem,
    patch: Patch,
    resolution: int | tuple[int, int],
    tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
    n_jobs: int = 1,
    *,
    t_max: Optional[float] = None,
) -> RelationSample:
    """Scattering data on a resolution grid over the patch; trapped or undecided edges are trimmed."""
    n = system.dimension
    if n not in (2, 3):
        raise DomainError(f"relation sampling supports n = 2, 3; got {n}")
    m1, m2 = (resolution, resolution) if isinstance(resolution, int) else resolution
    if m1 < 2 or m2 < 2:
        raise DomainError("resolution must be at least 2 per direction")
    p1 = np.linspace(*patch.omega_range, m1)
    p2 = np.linspace(*patch.z_range, m2)
    tasks = [(t, c) for t in p1 for c in p2]
    if n_jobs == 1:
        rows = [_relation_point(system, patch, t, c, tol, incoming_tol, t_max) for t, c in tasks]
    else:
        rows = Parallel(n_jobs=n_jobs)(
            delayed(_relation_point)(system, patch, t, c, tol, incoming_tol, t_max) for t, c in tasks
        )

    bad = np.array([r[5] != NON_TRAPPED for r in rows]).reshape(m1, m2)
    if bad.any():
        fraction = float(bad.mean())
        idx = np.argwhere(bad)
        region = {
            "omega": (float(p1[idx[:, 0].min()]), float(p1[idx[:, 0].max()])),
            "z": (float(p2[idx[:, 1].min()]), float(p2[idx[:, 1].max()])),
        }
        if fraction > BAD_FRACTION_LIMIT:
            raise PatchInvalidError(
                f"{fraction:.1%} of the patch is trapped or undecided in {region}", bad_region=region
            )
        s1, s2 = _trim(bad)
        logger.warning(f"Trimmed patch to rows {s1.start}:{s1.stop}, columns {s2.start}:{s2.stop}")
    else:
        s1, s2 = slice(0, m1), slice(0, m2)

    def grid(i: int, width: int) -> np.ndarray:
        out = np.full((m1, m2, width), np.nan)
        for j, r in enumerate(rows):
            if r[i] is not None:
                out.flat[j * width : (j + 1) * width] = r[i]
        return out[s1, s2]

    omega, z, theta, x_inf = grid(0, n), grid(1, n), grid(2, n), grid(3, n)
    err = np.array([r[4] for r in rows]).reshape(m1, m2)[s1, s2]
    p1, p2 = p1[s1], p2[s2]

    chart1 = patch.omega_chart(n)
    chart2 = AngleChart(center=float(np.arctan2(theta[0, 0, 1], theta[0, 0, 0]))) if n == 2 else chart_for(
        np.mean(theta.reshape(-1, n), axis=0) / np.linalg.norm(np.mean(theta.reshape(-1, n), axis=0))
    )
    base1 = np.array([[patch.base_coords(n, t) for _ in p2] for t in p1])
    cov1 = np.einsum("ijnc,ijn->ijc", chart1.jacobian(base1), z)
    base2 = chart2.from_sphere(theta)
    cov2 = -np.einsum("ijnc,ijn->ijc", chart2.jacobian(base2), x_inf)
    on_diag = np.linalg.norm(theta - omega, axis=-1) < DIAGONAL_DISTANCE
    logger.info(f"Sampled relation patch {p1.size}x{p2.size}, max extraction error {np.nanmax(err):.2e}")
    return RelationSample(
        params1=p1,
        params2=p2,
        base1=base1,
        cov1=cov1,
        base2=base2,
        cov2=cov2,
        extraction_error=err,
        lam=system.lam,
        momentum_scale=system.k,
        twist_applied=True,
        on_diagonal=on_diag,
        patch=patch,
        omega=omega,
        z=z,
        theta=theta,
        x_inf=x_inf,
    )


def _central(values: np.ndarray, step: float, axis: int) -> np.ndarray:
    fwd = np.roll(values, -1, axis=axis)
    bwd = np.roll(values, 1, axis=axis)
    return ((fwd - bwd) / (2.0 * step))[1:-1, 1:-1]


def residual_field(sample: RelationSample) -> tuple[np.ndarray, np.ndarray]:
    """Pullback of the summed symplectic form on interior points, and its term scale."""
    m1, m2 = sample.shape
    if m1 < 3 or m2 < 3:
        raise GeometryError(f"need at least 3 points per direction, got {m1}x{m2}")
    if sample.on_diagonal is not None and np.any(sample.on_diagonal):
        raise DiagonalExcludedError("relation sample touches the diagonal theta = omega")
    h1, h2 = sample.steps
    total = np.zeros((m1 - 2, m2 - 2))
    scale = np.zeros_like(total)
    tangent1, tangent2 = [], []
    for base, cov in ((sample.base1, sample.cov1), (sample.base2, sample.cov2)):
        for c in range(base.shape[-1]):
            a1, a2 = _central(base[..., c], h1, 0), _central(base[..., c], h2, 1)
            p1, p2 = _central(cov[..., c], h1, 0), _central(cov[..., c], h2, 1)
            total += p1 * a2 - p2 * a1
            scale += np.abs(p1 * a2) + np.abs(p2 * a1)
            tangent1 += [a1, p1]
            tangent2 += [a2, p2]
    t1 = np.stack(tangent1, axis=-1)
    t2 = np.stack(tangent2, axis=-1)
    if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2))):
        raise GeometryError("relation parametrization has non-finite derivatives")
    n1, n2 = np.linalg.norm(t1, axis=-1), np.linalg.norm(t2, axis=-1)
    if np.min(n1) < 1e-12 or np.min(n2) < 1e-12:
        raise GeometryError("collapsed tangent vector in the relation parametrization")
    cos = np.abs(np.sum(t1 * t2, axis=-1)) / (n1 * n2)
    if np.max(cos) > 1.0 - 1e-10:
        raise GeometryError("parallel tangent vectors in the relation parametrization")
    return total, scale


def lagrangian_residual(sample: RelationSample) -> float:
    """Max |pullback| over interior points, relative to the largest form term."""
    total, scale = residual_field(sample)
    return float(np.max(np.abs(total)) / max(float(np.max(scale)), 1e-300))


def residual_convergence(
    system: HamiltonianSystem,
    patch: Patch,
    resolutions: Sequence[int],
    tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """Residual against grid step, with the fitted constant of residual = C step^2."""
    if len(resolutions) < 2:
        raise DomainError("residual_convergence needs at least two resolutions")
    rows = []
    for res in sorted(resolutions):
        s = sample(system, patch, res, tol, incoming_tol, n_jobs)
        h = max(s.steps)
        rows.append({"resolution": res, "step": h, "residual": lagrangian_residual(s)})
    frame = pd.DataFrame(rows)
    frame["ratio"] = frame["residual"].shift(1) / frame["residual"]
    steps2 = frame["step"].to_numpy() ** 2
    c = float(np.sum(frame["residual"].to_numpy() * steps2) / np.sum(steps2**2))
    frame["fitted_C"] = c
    logger.info(f"Residual convergence: C={c:.3e}, ratios {frame['ratio'].round(2).tolist()[1:]}")
    return frame
