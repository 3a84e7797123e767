"""
Boundary-value problem (omega, theta) -> connecting trajectories.

For n = 2 the impact line is scanned on a uniform grid, sign changes of the
wrapped angle xi_inf(b) - theta are bracketed and refined with brentq, then
polished by Newton with the variational Jacobian. For n = 3 seeds at local
minima of the angular residual start a damped Newton iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import brentq
from sklearn.neighbors import NearestNeighbors

from scatrel.core.asymptotics import (
    DEFAULT_INCOMING_TOL,
    AsymptoticDatum,
    final_direction_jacobian,
    orthonormal_frame,
    scatter,
)
from scatrel.core.charts import wrap_angle
from scatrel.core.errors import (
    DegenerateEndpointError,
    DiagonalExcludedError,
    DomainError,
    NoAsymptoticsError,
    ScatrelError,
    StencilInvalidError,
)
from scatrel.core.flow import HamiltonianSystem, Tolerances, Trajectory

logger = logging.getLogger(__name__)

SIGMA_THRESHOLD = 1e-8
MASLOV_GRID = 10_000
NEWTON_MAX_ITER = 40


@dataclass
class TrajectorySolution:
    index: int
    omega: np.ndarray
    theta: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x_inf: np.ndarray
    sigma_hat: float
    condition: float
    maslov: Optional[int] = None
    action: Optional[float] = None
    degenerate: bool = False
    extraction_error: float = 0.0
    xi_inf: Optional[np.ndarray] = None
    trajectory: Any = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "z_l": self.z.tolist(),
            "w_l": self.w.tolist(),
            "sigma_hat": self.sigma_hat,
            "maslov": self.maslov,
            "S_l": self.action,
            "condition": self.condition,
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class ImpactScan:
    """Final directions over a grid of impact coordinates for one omega."""

    omega: np.ndarray
    coords: np.ndarray
    xi: np.ndarray
    classification: tuple
    radial: bool

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.xi), axis=1)

    def rotated(self, omega) -> "ImpactScan":
        """Same scan for another omega, available for radial potentials in n = 2."""
        if not self.radial or self.omega.size != 2:
            raise DomainError("scan reuse by rotation needs a radial potential in n = 2")
        w = np.asarray(omega, dtype=float)
        a = np.arctan2(w[1], w[0]) - np.arctan2(self.omega[1], self.omega[0])
        c, s = np.cos(a), np.sin(a)
        rot = np.array([[c, -s], [s, c]])
        return replace(self, omega=w, xi=self.xi @ rot.T)


def _scan_point(system, omega, u, tol, incoming_tol):
    z = u @ orthonormal_frame(omega)
    try:
        datum, _ = scatter(system, omega, z, tol, incoming_tol)
        return datum.xi_inf, datum.classification
    except NoAsymptoticsError as exc:
        return np.full(omega.size, np.nan), exc.classification
    except ScatrelError as exc:
        logger.warning(f"Seed z={u.tolist()} failed: {exc}")
        return np.full(omega.size, np.nan), "failed"


def _seed_grid(dimension: int, search_radius: float, grid_density: float) -> np.ndarray:
    count = max(int(np.ceil(2.0 * search_radius * grid_density)), 2) + 1
    line = np.linspace(-search_radius, search_radius, count)
    if dimension == 2:
        return line[:, None]
    u1, u2 = np.meshgrid(line, line, indexing="ij")
    pts = np.column_stack([u1.ravel(), u2.ravel()])
    return pts[np.linalg.norm(pts, axis=1) <= search_radius * (1.0 + 1e-12)]


def default_search_radius(system: HamiltonianSystem) -> float:
    return 4.0 * max(system.potential.scale, system.potential.width)


def scan_impacts(
    system: HamiltonianSystem,
    omega,
    search_radius: Optional[float] = None,
    grid_density: float = 20.0,
    tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
    n_jobs: int = 1,
) -> ImpactScan:
    w = np.asarray(omega, dtype=float)
    if search_radius is None:
        search_radius = default_search_radius(system)
    if search_radius <= 0 or grid_density <= 0:
        raise DomainError("search_radius and grid_density must be positive")
    seeds = _seed_grid(system.dimension, float(search_radius), float(grid_density))
    if n_jobs == 1:
        results = [_scan_point(system, w, u, tol, incoming_tol) for u in seeds]
    else:
        results = Parallel(n_jobs=n_jobs)(delayed(_scan_point)(system, w, u, tol, incoming_tol) for u in seeds)
    xi = np.array([r[0] for r in results])
    kinds = tuple(r[1] for r in results)
    skipped = sum(1 for r in results if not np.all(np.isfinite(r[0])))
    if skipped:
        logger.warning(f"{skipped} of {len(seeds)} seeds skipped (trapped or undecided)")
    return ImpactScan(w, seeds, xi, kinds, system.potential.is_radial)


def _check_off_diagonal(omega: np.ndarray, theta: np.ndarray) -> None:
    if np.linalg.norm(omega - theta) < 1e-9:
        raise DiagonalExcludedError("theta = omega lies on the excluded diagonal")


def _residual(datum: AsymptoticDatum, theta: np.ndarray) -> np.ndarray:
    return orthonormal_frame(theta) @ datum.xi_inf


def build_solution(
    system: HamiltonianSystem,
    omega,
    theta,
    coords,
    index: int = 0,
    tol: float = 1e-9,
    flow_tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
) -> TrajectorySolution:
    """Variational run at a root, Newton-polished until the condition is within tol."""
    omega = np.asarray(omega, dtype=float)
    theta = np.asarray(theta, dtype=float)
    frame = orthonormal_frame(omega)
    u = np.atleast_1d(np.asarray(coords, dtype=float)).copy()
    for _ in range(4):
        datum, traj = scatter(system, omega, u @ frame, flow_tol, incoming_tol, variational=True)
        condition = float(np.linalg.norm(datum.xi_inf - theta))
        jac = orthonormal_frame(theta) @ final_direction_jacobian(traj)
        if condition <= tol:
            break
        try:
            u = u - np.linalg.solve(jac, _residual(datum, theta))
        except np.linalg.LinAlgError:
            break
    sigma = float(np.linalg.det(jac))
    w = datum.outgoing_impact()
    solution = TrajectorySolution(
        index=index,
        omega=omega,
        theta=theta,
        z=datum.z,
        w=w,
        x_inf=datum.x_inf,
        sigma_hat=sigma,
        condition=condition,
        degenerate=abs(sigma) <= SIGMA_THRESHOLD,
        extraction_error=datum.extraction_error,
        xi_inf=datum.xi_inf,
        trajectory=traj,
    )
    if not solution.degenerate:
        try:
            solution.maslov = maslov_index(system, solution)
        except DegenerateEndpointError as exc:
            logger.warning(f"Solution z={datum.z.tolist()}: {exc}")
            solution.degenerate = True
    return solution


def _roots_2d(system, scan: ImpactScan, theta, flow_tol, incoming_tol) -> list[np.ndarray]:
    beta = np.arctan2(theta[1], theta[0])
    g = wrap_angle(np.arctan2(scan.xi[:, 1], scan.xi[:, 0]) - beta)
    b = scan.coords[:, 0]

    def gap(x: float) -> float:
        datum, _ = scatter(system, scan.omega, x * orthonormal_frame(scan.omega)[0], flow_tol, incoming_tol)
        return float(wrap_angle(np.arctan2(datum.xi_inf[1], datum.xi_inf[0]) - beta))

    roots = []
    for i in range(b.size - 1):
        g0, g1 = g[i], g[i + 1]
        if not (np.isfinite(g0) and np.isfinite(g1)):
            continue
        if abs(g0) > 0.5 * np.pi or abs(g1) > 0.5 * np.pi:
            continue
        if g0 == 0.0:
            roots.append(np.array([b[i]]))
        elif g0 * g1 < 0:
            try:
                roots.append(np.array([brentq(gap, b[i], b[i + 1], xtol=1e-14, rtol=1e-14)]))
            except (ValueError, ScatrelError) as exc:
                logger.warning(f"Bracket [{b[i]:.6g}, {b[i + 1]:.6g}] not refined: {exc}")
    return roots


def _newton(system, omega, theta, u0, tol, flow_tol, incoming_tol) -> Optional[np.ndarray]:
    frame = orthonormal_frame(omega)
    u = np.asarray(u0, dtype=float).copy()
    datum, traj = scatter(system, omega, u @ frame, flow_tol, incoming_tol, variational=True)
    r = _residual(datum, theta)
    for _ in range(NEWTON_MAX_ITER):
        if np.linalg.norm(datum.xi_inf - theta) <= tol:
            return u
        jac = orthonormal_frame(theta) @ final_direction_jacobian(traj)
        try:
            step = np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            return None
        damping = 1.0
        while damping > 1e-4:
            trial = u - damping * step
            try:
                d_new, t_new = scatter(system, omega, trial @ frame, flow_tol, incoming_tol, variational=True)
            except ScatrelError:
                damping *= 0.5
                continue
            r_new = _residual(d_new, theta)
            if d_new.xi_inf @ theta > 0 and np.linalg.norm(r_new) < np.linalg.norm(r):
                u, datum, traj, r = trial, d_new, t_new, r_new
                break
            damping *= 0.5
        else:
            return None
    return u if np.linalg.norm(datum.xi_inf - theta) <= tol else None


def _seeds_nd(scan: ImpactScan, theta: np.ndarray, spacing: float) -> list[np.ndarray]:
    valid = scan.valid
    coords = scan.coords[valid]
    if coords.shape[0] == 0:
        return []
    angle = np.arccos(np.clip(scan.xi[valid] @ theta, -1.0, 1.0))
    nn = NearestNeighbors(radius=1.5 * spacing).fit(coords)
    neighbours = nn.radius_neighbors(coords, return_distance=False)
    seeds = []
    for i, idx in enumerate(neighbours):
        if angle[i] < 0.5 and angle[i] <= np.min(angle[idx]):
            seeds.append(coords[i])
    return seeds


def _deduplicate(solutions: list[TrajectorySolution], radius: float) -> list[TrajectorySolution]:
    kept: list[TrajectorySolution] = []
    for s in sorted(solutions, key=lambda s: s.condition):
        if all(np.linalg.norm(s.z - k.z) > radius for k in kept):
            kept.append(s)
    return kept


def find_all(
    system: HamiltonianSystem,
    omega,
    theta,
    search_radius: Optional[float] = None,
    grid_density: float = 20.0,
    tol: float = 1e-9,
    *,
    flow_tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
    scan: Optional[ImpactScan] = None,
    n_jobs: int = 1,
) -> list[TrajectorySolution]:
    """All impact parameters z with xi_inf(z) = theta, sorted by |z|."""
    omega = np.asarray(omega, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if omega.size != system.dimension or theta.size != system.dimension:
        raise DomainError("omega and theta must match the system dimension")
    _check_off_diagonal(omega, theta)
    if search_radius is None:
        search_radius = default_search_radius(system)
    if scan is None:
        scan = scan_impacts(system, omega, search_radius, grid_density, flow_tol, incoming_tol, n_jobs)
    elif not np.allclose(scan.omega, omega, atol=1e-14):
        scan = scan.rotated(omega)

    if system.dimension == 2:
        starts = _roots_2d(system, scan, theta, flow_tol, incoming_tol)
    else:
        spacing = 2.0 * search_radius / max(int(np.ceil(2.0 * search_radius * grid_density)), 2)
        starts = []
        for seed in _seeds_nd(scan, theta, spacing):
            root = _newton(system, omega, theta, seed, tol, flow_tol, incoming_tol)
            if root is not None:
                starts.append(root)

    solutions = []
    for u in starts:
        try:
            solution = build_solution(system, omega, theta, u, 0, tol, flow_tol, incoming_tol)
        except ScatrelError as exc:
            logger.warning(f"Root at z={np.asarray(u).tolist()} dropped: {exc}")
            continue
        if solution.condition > tol:
            logger.warning(
                f"Root at z={solution.z.tolist()} dropped: condition {solution.condition:.2e} above tol {tol:.1e}"
            )
            continue
        solutions.append(solution)
    solutions = _deduplicate(solutions, 10.0 * tol)
    solutions.sort(key=lambda s: float(np.linalg.norm(s.z)))
    for i, s in enumerate(solutions):
        s.index = i
    logger.info(f"Found {len(solutions)} trajectories for omega={omega.tolist()} theta={theta.tolist()}")
    return solutions


def jacobi_determinant(trajectory: Trajectory, times) -> np.ndarray:
    """det[dq/dz | p] along the trajectory."""
    state = trajectory.origin
    n = trajectory.dimension
    ys = trajectory.solution(np.asarray(times, dtype=float))
    out = np.empty(ys.shape[1])
    for j in range(ys.shape[1]):
        y = ys[:, j]
        m = y[2 * n :].reshape(2 * n, 2 * n)
        dq = m[:n, :n] @ state.dq_dz + m[:n, n:] @ state.dp_dz
        out[j] = np.linalg.det(np.column_stack([dq, y[n : 2 * n]]))
    return out


def conjugate_times(trajectory: Trajectory, grid_size: int = MASLOV_GRID) -> list[float]:
    times = np.linspace(trajectory.t_start, trajectory.t_end, grid_size)
    d = jacobi_determinant(trajectory, times)
    scale = float(np.max(np.abs(d)))
    tiny = 1e-8 * scale
    if abs(d[-1]) <= tiny:
        raise DegenerateEndpointError(f"conjugate point at the final endpoint t={times[-1]:.6g}")
    found = []
    for i in range(grid_size - 1):
        if d[i] * d[i + 1] < 0:
            found.append(brentq(lambda t: float(jacobi_determinant(trajectory, [t])[0]), times[i], times[i + 1]))
    return found


def _free_tail_crossing(trajectory: Trajectory) -> bool:
    """Whether free flight after the last sample carries det[dq/dz | p] through zero."""
    state = trajectory.origin
    n = trajectory.dimension
    y = trajectory.solution(trajectory.t_end)
    m = y[2 * n :].reshape(2 * n, 2 * n)
    p = y[n : 2 * n]
    dq = m[:n, :n] @ state.dq_dz + m[:n, n:] @ state.dp_dz
    dp = m[n:, :n] @ state.dq_dz + m[n:, n:] @ state.dp_dz
    now = np.linalg.det(np.column_stack([dq, p]))
    rate = np.linalg.det(np.column_stack([dp, p]))
    return now * rate < 0


def maslov_index(system: HamiltonianSystem, solution: TrajectorySolution | Trajectory) -> int:
    """Number of conjugate points along the connecting trajectory, the free outgoing tail included."""
    traj = solution.trajectory if isinstance(solution, TrajectorySolution) else solution
    if traj is None or traj.variational is None:
        raise DomainError("maslov_index needs a trajectory with variational flow")
    found = conjugate_times(traj)
    tail = int(_free_tail_crossing(traj))
    logger.debug(f"Conjugate points at t={[round(t, 6) for t in found]}, free-tail crossing {tail}")
    return len(found) + tail


@dataclass(frozen=True)
class NondegeneracyReport:
    regular: bool
    min_abs_sigma: Optional[float]
    caustic_indices: tuple
    threshold: float
    count: int


def nondegeneracy_report(
    solutions: Sequence[TrajectorySolution], threshold: float = SIGMA_THRESHOLD
) -> NondegeneracyReport:
    if not solutions:
        return NondegeneracyReport(True, None, (), threshold, 0)
    sigmas = np.array([abs(s.sigma_hat) for s in solutions])
    caustic = tuple(int(s.index) for s in solutions if abs(s.sigma_hat) <= threshold)
    return NondegeneracyReport(not caustic, float(sigmas.min()), caustic, threshold, len(solutions))


@dataclass(frozen=True)
class ReciprocityReport:
    final_direction: np.ndarray
    impact: np.ndarray
    direction_error: float
    impact_error: float


def reciprocal_check(
    system: HamiltonianSystem,
    solution: TrajectorySolution,
    flow_tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
) -> ReciprocityReport:
    """Launch from (-theta, w_l): should end at direction -omega with impact z_l."""
    datum, _ = scatter(system, -solution.theta, solution.w, flow_tol, incoming_tol)
    impact = datum.outgoing_impact()
    return ReciprocityReport(
        datum.xi_inf,
        impact,
        float(np.linalg.norm(datum.xi_inf + solution.omega)),
        float(np.linalg.norm(impact - solution.z)),
    )


def continue_solution(
    system: HamiltonianSystem,
    omega,
    theta,
    guess: TrajectorySolution,
    tol: float = 1e-9,
    flow_tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
    max_jump: Optional[float] = None,
) -> TrajectorySolution:
    """Follow the branch of ``guess`` to nearby (omega, theta) by Newton."""
    omega = np.asarray(omega, dtype=float)
    theta = np.asarray(theta, dtype=float)
    _check_off_diagonal(omega, theta)
    u0 = orthonormal_frame(omega) @ guess.z
    root = _newton(system, omega, theta, u0, tol, flow_tol, incoming_tol)
    if root is None:
        raise StencilInvalidError(f"branch continuation from z={guess.z.tolist()} did not converge")
    limit = max_jump if max_jump is not None else 0.5 * max(1.0, system.potential.width)
    if np.linalg.norm(root - u0) > limit:
        raise StencilInvalidError(f"branch jumped by {np.linalg.norm(root - u0):.3g}")
    sol = build_solution(system, omega, theta, root, guess.index, tol, flow_tol, incoming_tol)
    if sol.degenerate != guess.degenerate or (
        sol.maslov is not None and guess.maslov is not None and sol.maslov != guess.maslov
    ):
        raise StencilInvalidError("branch crossed a caustic inside the stencil")
    return sol
