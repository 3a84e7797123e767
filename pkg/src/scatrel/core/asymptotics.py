"""
Incoming asymptotic condition and outgoing asymptotic data.

A phase trajectory is labelled by its incoming direction omega and impact
parameter z (orthogonal to omega): q(t) ~ k omega t + z as t -> -inf with
k = sqrt(2 lambda). Its outgoing data are the final direction xi_inf and the
offset x_inf with q(t) ~ k xi_inf t + x_inf as t -> +inf.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.integrate import quad, quad_vec
from scipy.optimize import brentq

from scatrel.core.errors import DomainError, NoAsymptoticsError, ScatrelError, UnsupportedDecayError
from scatrel.core.flow import (
    NON_TRAPPED,
    HamiltonianSystem,
    Tolerances,
    Trajectory,
    classify,
    integrate,
)

logger = logging.getLogger(__name__)

DEFAULT_INCOMING_TOL = 1e-10


def orthonormal_frame(omega) -> np.ndarray:
    """Rows form an orthonormal basis of the complement of omega.

    n = 2 uses the rotation e = (-w2, w1). For n >= 3 the coordinate axis most
    aligned with omega (lowest index on ties) is dropped and the remaining axes
    are Gram-Schmidt orthogonalized in index order.
    """
    w = np.asarray(omega, dtype=float)
    n = w.size
    if n == 2:
        return np.array([[-w[1], w[0]]])
    drop = int(np.argmax(np.abs(w)))
    basis = [w]
    for i in range(n):
        if i == drop:
            continue
        v = np.zeros(n)
        v[i] = 1.0
        for b in basis:
            v = v - (v @ b) * b
        basis.append(v / np.linalg.norm(v))
    return np.array(basis[1:])


def unit_vector(angle: float) -> np.ndarray:
    return np.array([np.cos(angle), np.sin(angle)])


def _check_direction(omega) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    if w.ndim != 1 or not np.all(np.isfinite(w)):
        raise DomainError("direction must be a finite vector")
    if abs(np.linalg.norm(w) - 1.0) > 1e-10:
        raise DomainError(f"direction must be a unit vector, |omega| = {np.linalg.norm(w):.12g}")
    return w / np.linalg.norm(w)


@dataclass(frozen=True)
class IncomingState:
    omega: np.ndarray
    z: np.ndarray
    q: np.ndarray
    p: np.ndarray
    t_start: float
    dq_dz: np.ndarray
    dp_dz: np.ndarray
    tol: float

    @property
    def frame(self) -> np.ndarray:
        return orthonormal_frame(self.omega)


@dataclass(frozen=True)
class AsymptoticDatum:
    omega: np.ndarray
    z: np.ndarray
    xi_inf: np.ndarray
    x_inf: np.ndarray
    classification: str
    extraction_error: float

    @property
    def theta_angle(self) -> float:
        return float(np.arctan2(self.xi_inf[1], self.xi_inf[0]))

    def outgoing_impact(self) -> np.ndarray:
        """Component of x_inf orthogonal to xi_inf."""
        return self.x_inf - (self.x_inf @ self.xi_inf) * self.xi_inf


def _start_radius(system: HamiltonianSystem, tol: float) -> float:
    potential = system.potential
    radius = max(1.0, potential.scale)
    while potential.gradient_tail(radius) / system.k >= tol:
        radius *= 1.25
        if radius > 1e8:
            raise DomainError("potential tail too heavy for the requested incoming tolerance")
    return radius


def prepare_incoming(
    system: HamiltonianSystem, omega, z, tol: float = DEFAULT_INCOMING_TOL
) -> IncomingState:
    """Initial data at t_start < 0 matching free flight k*omega*t + z in the past.

    Compact potentials start 0.5 outside the support with no correction. Otherwise
    one Picard step of the momentum integral of -grad V along the free line is
    applied, and p is put back on the energy shell.
    """
    potential = system.potential
    if potential.rho <= 1.0:
        raise UnsupportedDecayError(f"decay exponent rho={potential.rho} <= 1 is long range")
    if not tol > 0:
        raise DomainError("incoming tolerance must be positive")
    w = _check_direction(omega)
    z = np.asarray(z, dtype=float)
    if z.shape != w.shape:
        raise DomainError("impact parameter and direction must have the same dimension")
    if abs(z @ w) > 1e-9 * (1.0 + np.linalg.norm(z)):
        raise DomainError(f"impact parameter not orthogonal to omega (<z, omega> = {z @ w:.3e})")
    z = z - (z @ w) * w
    n = w.size
    k = system.k
    frame = orthonormal_frame(w)

    if potential.is_compact:
        t_start = -(float(potential.support_radius) + 0.5) / k
        q0 = k * w * t_start + z
        return IncomingState(w, z, q0, k * w, t_start, frame.T.copy(), np.zeros((n, n - 1)), tol)

    t_start = -_start_radius(system, tol) / k

    def tail(s: float) -> np.ndarray:
        x = k * w * s + z
        g = potential.grad(x)
        hv = potential.hess(x) @ frame.T
        lag = t_start - s
        return np.concatenate([-lag * g, -g, (-lag * hv).ravel(), (-hv).ravel()])

    total, _ = quad_vec(tail, -np.inf, t_start, epsabs=tol * 1e-3, epsrel=1e-10)
    dq = total[:n]
    dp = total[n : 2 * n]
    jq = total[2 * n : 2 * n + n * (n - 1)].reshape(n, n - 1)
    jp = total[2 * n + n * (n - 1) :].reshape(n, n - 1)
    q0 = k * w * t_start + z + dq
    p0 = system.shell_momentum(q0, k * w + dp)
    logger.debug(f"Incoming start t={t_start:.4g}, correction |dp|={np.linalg.norm(dp):.2e}")
    return IncomingState(w, z, q0, p0, t_start, frame.T + jq, jp, tol)


def radius_event(radius: float, n: int, terminal: bool):
    def crossing(t, y):
        return float(y[:n] @ y[:n]) - radius**2

    crossing.terminal = terminal
    crossing.direction = 1.0
    return crossing


def extraction_radii(system: HamiltonianSystem, q, reach: Optional[float] = None) -> tuple[float, ...]:
    """Outward crossing radii used for extraction: (R1, R2), or (R_exit,) for compact V.

    ``reach`` bounds the radius of the free part of the path for compact V
    (|z| for a launch from incoming data); it defaults to |q|.
    """
    potential = system.potential
    radius = float(np.linalg.norm(q))
    if potential.is_compact:
        return (max(float(potential.support_radius), radius if reach is None else reach) + 0.5,)
    r_cert = potential.escape_radius(system.lam)
    r1 = max(20.0 * max(1.0, potential.scale), 2.0 * radius, 1.5 * r_cert)
    return (r1, 2.0 * r1)


def propagate(
    system: HamiltonianSystem,
    q,
    p,
    t0: float,
    tol: Tolerances = Tolerances(),
    *,
    variational: bool = True,
    reach: Optional[float] = None,
    t_max: Optional[float] = None,
) -> Trajectory:
    """Integrate (q, p) from t0 until it crosses the extraction radii outward."""
    n = system.dimension
    radii = extraction_radii(system, q, reach)
    events = [radius_event(r, n, i == len(radii) - 1) for i, r in enumerate(radii)]
    if t_max is None:
        t_max = 50.0 * (radii[-1] + float(np.linalg.norm(q))) / float(np.linalg.norm(p))
    traj = integrate(system, (q, p), (t0, t0 + t_max), tol, variational=variational, events=events)
    if traj.events[-1][0].size:
        traj.classification = NON_TRAPPED
    else:
        verdict = classify(system, (traj.q[-1], traj.p[-1]), radii[0], t_max, tol)
        traj.classification = verdict.kind
        logger.debug(f"Trajectory from q={np.asarray(q).tolist()} did not escape: {verdict.kind}")
    return traj


def launch(
    system: HamiltonianSystem,
    state: IncomingState,
    tol: Tolerances = Tolerances(),
    *,
    variational: bool = True,
    t_max: Optional[float] = None,
) -> Trajectory:
    """Integrate the prepared state forward until it crosses the extraction radii."""
    traj = propagate(
        system,
        state.q,
        state.p,
        state.t_start,
        tol,
        variational=variational,
        reach=float(np.linalg.norm(state.z)),
        t_max=t_max,
    )
    traj.origin = state
    return traj


def _event_state(trajectory: Trajectory, index: int) -> tuple[float, np.ndarray]:
    t_events, y_events = trajectory.events[index]
    return float(t_events[0]), np.asarray(y_events[0])


def _richardson(v1: np.ndarray, v2: np.ndarray, t1: float, t2: float, exponent: float) -> np.ndarray:
    a = abs(t1) ** exponent
    b = abs(t2) ** exponent
    if not np.isfinite(a) or not np.isfinite(b) or abs(a - b) < 1e-300:
        return v2
    return (v2 * a - v1 * b) / (a - b)


@dataclass(frozen=True)
class OutgoingLimits:
    p_inf: np.ndarray
    x_inf: np.ndarray
    discrepancy: float
    floor: float
    t_last: float
    state_last: np.ndarray


def outgoing_limits(
    system: HamiltonianSystem, trajectory: Trajectory, tol: Tolerances = Tolerances()
) -> OutgoingLimits:
    """Asymptotic momentum and offset, q(t) ~ p_inf t + x_inf, from the radius crossings."""
    if trajectory.classification != NON_TRAPPED:
        raise NoAsymptoticsError(f"trajectory is {trajectory.classification}", str(trajectory.classification))
    n = system.dimension
    if len(trajectory.events) == 1:
        t, y = _event_state(trajectory, 0)
        q, p = y[:n], y[n : 2 * n]
        floor = 10.0 * tol.rtol * (1.0 + float(np.linalg.norm(q)))
        return OutgoingLimits(p, q - p * t, 0.0, floor, t, y)

    t1, y1 = _event_state(trajectory, 0)
    t2, y2 = _event_state(trajectory, 1)
    q1, p1 = y1[:n], y1[n : 2 * n]
    q2, p2 = y2[:n], y2[n : 2 * n]
    rho = system.potential.rho
    x1, x2 = q1 - p1 * t1, q2 - p2 * t2
    p_inf = _richardson(p1, p2, t1, t2, -rho)
    x_inf = _richardson(x1, x2, t1, t2, 1.0 - rho)
    discrepancy = max(float(np.linalg.norm(p2 - p1)) / system.k, float(np.linalg.norm(x2 - x1)))
    floor = 10.0 * tol.rtol * (1.0 + float(np.linalg.norm(q2)))
    return OutgoingLimits(p_inf, x_inf, discrepancy, floor, t2, y2)


def extract_outgoing(
    system: HamiltonianSystem, trajectory: Trajectory, tol: Tolerances = Tolerances()
) -> AsymptoticDatum:
    """Outgoing (xi_inf, x_inf) from a launched trajectory."""
    state = trajectory.origin
    if not isinstance(state, IncomingState):
        raise DomainError("trajectory was not produced by launch()")
    if trajectory.classification != NON_TRAPPED:
        raise NoAsymptoticsError(
            f"trajectory from z={state.z.tolist()} is {trajectory.classification}",
            str(trajectory.classification),
        )
    limits = outgoing_limits(system, trajectory, tol)
    xi = limits.p_inf / np.linalg.norm(limits.p_inf)
    err = limits.discrepancy + limits.floor
    if len(trajectory.events) > 1:
        err += state.tol
    logger.debug(f"Extracted at T={limits.t_last:.4g}, error {err:.2e}")
    return AsymptoticDatum(state.omega, state.z, xi, limits.x_inf, NON_TRAPPED, err)


def scatter(
    system: HamiltonianSystem,
    omega,
    z,
    tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
    *,
    variational: bool = False,
    t_max: Optional[float] = None,
) -> tuple[AsymptoticDatum, Trajectory]:
    """prepare_incoming -> launch -> extract_outgoing."""
    state = prepare_incoming(system, omega, z, incoming_tol)
    traj = launch(system, state, tol, variational=variational, t_max=t_max)
    return extract_outgoing(system, traj, tol), traj


def final_direction_jacobian(trajectory: Trajectory) -> np.ndarray:
    """d(xi_inf)/d(frame coordinates of z) in ambient coordinates, shape (n, n-1)."""
    state: IncomingState = trajectory.origin
    n = trajectory.dimension
    _, y = _event_state(trajectory, len(trajectory.events) - 1)
    if y.size <= 2 * n:
        raise DomainError("trajectory has no variational flow attached")
    p = y[n : 2 * n]
    m = y[2 * n :].reshape(2 * n, 2 * n)
    dp = m[n:, :n] @ state.dq_dz + m[n:, n:] @ state.dp_dz
    speed = np.linalg.norm(p)
    xi = p / speed
    return (np.eye(n) - np.outer(xi, xi)) @ dp / speed


def dxi_dz(
    system: HamiltonianSystem,
    omega,
    z,
    tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
) -> np.ndarray:
    """Jacobian of z -> xi_inf in the frames of omega-perp and xi_inf-perp."""
    datum, traj = scatter(system, omega, z, tol, incoming_tol, variational=True)
    full = final_direction_jacobian(traj)
    return orthonormal_frame(datum.xi_inf) @ full


def deflection_function(system: HamiltonianSystem, b: float) -> float:
    """Signed classical deflection angle of a radial potential at impact parameter b.

    Positive b means z = b * e with e the rotation of omega by +90 degrees; the
    result is the signed angle from omega to xi_inf in that plane.
    """
    potential = system.potential
    if not potential.is_radial:
        raise DomainError("deflection_function needs a radial potential")
    lam = system.lam
    b = float(b)
    if b == 0.0:
        return float(np.pi) if potential.sup_value >= lam else 0.0
    ab = abs(b)

    def profile(r: float) -> float:
        x = np.zeros(potential.dimension)
        x[0] = r
        return potential.value(x)

    def gap(r: float) -> float:
        return 1.0 - profile(r) / lam - (ab / r) ** 2

    far = max(potential.negligible_radius(1e-16 * lam), ab) * 2.0 + 1.0
    grid = np.linspace(far, ab * 1e-3, 4000)
    values = np.array([gap(r) for r in grid])
    negative = np.nonzero(values <= 0.0)[0]
    if negative.size == 0:
        raise DomainError(f"no turning point found for b={b}")
    i = int(negative[0])
    r0 = brentq(gap, grid[i], grid[i - 1], xtol=1e-15, rtol=1e-15) if i > 0 else grid[0]

    def integrand(tau: float) -> float:
        s = 1.0 - tau * tau
        v = profile(r0 / s) if s > 1e-12 else 0.0
        g = 1.0 - v / lam - (ab * s / r0) ** 2
        return 2.0 * tau / np.sqrt(max(g, 1e-300))

    half, _ = quad(integrand, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12, limit=400)
    swept = 2.0 * ab / r0 * half
    return float(np.sign(b) * (np.pi - swept))


def _sweep_row(
    system: HamiltonianSystem, omega: np.ndarray, coords: np.ndarray, tol: Tolerances, incoming_tol: float
) -> dict:
    n = system.dimension
    z = coords @ orthonormal_frame(omega)
    row: dict = {}
    if n == 2:
        row["omega_angle"] = float(np.arctan2(omega[1], omega[0]))
    for i in range(n):
        row[f"omega_{i + 1}"] = float(omega[i])
    for i in range(n - 1):
        row[f"z_{i + 1}"] = float(coords[i])
    try:
        datum, _ = scatter(system, omega, z, tol, incoming_tol)
        xi, x_inf = datum.xi_inf, datum.x_inf
        row["classification"] = datum.classification
        row["extraction_error"] = datum.extraction_error
    except NoAsymptoticsError as exc:
        logger.warning(f"Sweep point omega={omega.tolist()} z={coords.tolist()} skipped: {exc}")
        xi = x_inf = np.full(n, np.nan)
        row["classification"] = exc.classification
        row["extraction_error"] = np.nan
    except ScatrelError as exc:
        logger.warning(f"Sweep point omega={omega.tolist()} z={coords.tolist()} failed: {exc}")
        xi = x_inf = np.full(n, np.nan)
        row["classification"] = "failed"
        row["extraction_error"] = np.nan
    if n == 2:
        row["theta_angle"] = float(np.arctan2(xi[1], xi[0]))
    for i in range(n):
        row[f"theta_{i + 1}"] = float(xi[i])
    for i in range(n):
        row[f"x_inf_{i + 1}"] = float(x_inf[i])
    if system.potential.is_radial and n == 2 and row["classification"] == NON_TRAPPED:
        row["deflection_quadrature"] = deflection_function(system, float(coords[0]))
    return row


def sweep(
    system: HamiltonianSystem,
    omegas: Sequence,
    impacts: Sequence,
    tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """Tabulate (omega, z) -> (theta, x_inf) over a product grid.

    ``omegas`` are unit vectors (or angles for n = 2); ``impacts`` are frame
    coordinates in omega-perp (scalars for n = 2).
    """
    n = system.dimension
    dirs = []
    for w in omegas:
        w = np.atleast_1d(np.asarray(w, dtype=float))
        dirs.append(unit_vector(float(w[0])) if n == 2 and w.size == 1 else _check_direction(w))
    coords = [np.atleast_1d(np.asarray(c, dtype=float)) for c in impacts]
    tasks = [(w, c) for w in dirs for c in coords]
    logger.info(f"Sweeping {len(tasks)} (omega, z) points with {n_jobs} worker(s)")
    if n_jobs == 1:
        rows = [_sweep_row(system, w, c, tol, incoming_tol) for w, c in tasks]
    else:
        rows = Parallel(n_jobs=n_jobs)(delayed(_sweep_row)(system, w, c, tol, incoming_tol) for w, c in tasks)
    return pd.DataFrame(rows)
