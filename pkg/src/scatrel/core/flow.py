"""
Hamiltonian flow of p(x, xi) = |xi|^2 / 2 + V(x) with its variational flow.

The base flow and the linearized flow are integrated together as one augmented
system (q, p, M) with dM/dt = A(q) M, A = [[0, I], [-Hess V(q), 0]].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from scatrel.core.errors import DomainError, IntegrationError, RejectedTrajectoryError
from scatrel.core.potential import PotentialModel

logger = logging.getLogger(__name__)

METHOD = "DOP853"
NON_TRAPPED = "non_trapped"
TRAPPED = "trapped"
UNDECIDED = "undecided"
# Re-entries into the r-ball, short of the escape certificate, that count as trapping.
RETURNS_FOR_TRAPPED = 2


@dataclass(frozen=True)
class Tolerances:
    rtol: float = 1e-10
    atol: float = 1e-12
    energy: float = 1e-9

    def tightened(self, factor: float) -> "Tolerances":
        return replace(self, rtol=self.rtol / factor, atol=self.atol / factor, energy=self.energy / factor)


class HamiltonianSystem:
    def __init__(self, potential: PotentialModel, lam: float):
        if not lam > 0:
            raise DomainError(f"energy lambda must be positive, got {lam}")
        self.potential = potential
        self.lam = float(lam)
        self.dimension = potential.dimension
        self.k = float(np.sqrt(2.0 * self.lam))

    def energy(self, q, p):
        q = np.asarray(q, dtype=float)
        p = np.asarray(p, dtype=float)
        return 0.5 * np.sum(p**2, axis=-1) + self.potential.value(q)

    def shell_momentum(self, q, direction) -> np.ndarray:
        """Momentum of magnitude sqrt(2(lambda - V(q))) along the given direction."""
        kinetic = 2.0 * (self.lam - self.potential.value(q))
        if kinetic < 0:
            raise DomainError(f"point {np.asarray(q).tolist()} is classically forbidden at lambda={self.lam}")
        d = np.asarray(direction, dtype=float)
        return np.sqrt(kinetic) * d / np.linalg.norm(d)

    def principal_type_violations(self, sample_count: int = 512) -> list[np.ndarray]:
        """Sampled points of the energy surface where both xi and grad V vanish."""
        n = self.dimension
        radii = np.linspace(0.0, self.potential.scale * 6.0 + 1.0, sample_count)
        if n == 2:
            angles = np.linspace(0.0, 2.0 * np.pi, 16, endpoint=False)
            dirs = np.column_stack([np.cos(angles), np.sin(angles)])
        else:
            dirs = np.vstack([np.eye(n), -np.eye(n)])
        bad = []
        for d in dirs:
            pts = radii[:, None] * d
            gap = self.potential.value(pts) - self.lam
            flips = np.nonzero(np.sign(gap[:-1]) * np.sign(gap[1:]) <= 0)[0]
            for i in flips:
                x = pts[i] if gap[i] == 0 else pts[i + 1]
                if np.linalg.norm(self.potential.grad(x)) < 1e-12:
                    bad.append(x)
        return bad

    def rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        n = self.dimension
        q = y[:n]
        p = y[n : 2 * n]
        out = np.empty_like(y)
        out[:n] = p
        out[n : 2 * n] = -self.potential.grad(q)
        if y.size > 2 * n:
            m = y[2 * n :].reshape(2 * n, 2 * n)
            hv = self.potential.hess(q)
            dm = np.empty_like(m)
            dm[:n] = m[n:]
            dm[n:] = -hv @ m[:n]
            out[2 * n :] = dm.ravel()
        return out

    def __repr__(self) -> str:
        return f"HamiltonianSystem({self.potential!r}, lam={self.lam})"


@dataclass
class Trajectory:
    times: np.ndarray
    q: np.ndarray
    p: np.ndarray
    variational: Optional[np.ndarray]
    energy_error: np.ndarray
    energy_drift: float
    solution: Any = field(default=None, repr=False)
    events: list = field(default_factory=list, repr=False)
    origin: Any = field(default=None, repr=False)
    classification: Optional[str] = None

    @property
    def dimension(self) -> int:
        return self.q.shape[1]

    @property
    def t_start(self) -> float:
        return float(self.times[0])

    @property
    def t_end(self) -> float:
        return float(self.times[-1])

    def state(self, t: float) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        if self.solution is None:
            raise DomainError("trajectory was integrated without dense output")
        n = self.dimension
        y = self.solution(t)
        m = y[2 * n :].reshape(2 * n, 2 * n) if y.size > 2 * n else None
        return y[:n], y[n : 2 * n], m

    def positions(self, t) -> np.ndarray:
        n = self.dimension
        return self.solution(np.asarray(t, dtype=float))[:n].T

    def to_frame(self) -> pd.DataFrame:
        n = self.dimension
        data = {"t": self.times}
        for i in range(n):
            data[f"q{i + 1}"] = self.q[:, i]
        for i in range(n):
            data[f"p{i + 1}"] = self.p[:, i]
        data["energy_error"] = self.energy_error
        return pd.DataFrame(data)


def integrate(
    system: HamiltonianSystem,
    initial: tuple[Sequence[float], Sequence[float]],
    t_span: tuple[float, float],
    tol: Tolerances = Tolerances(),
    *,
    t_eval: Optional[np.ndarray] = None,
    variational: bool = True,
    events: Optional[Sequence[Callable]] = None,
    initial_variation: Optional[np.ndarray] = None,
) -> Trajectory:
    n = system.dimension
    q0 = np.asarray(initial[0], dtype=float)
    p0 = np.asarray(initial[1], dtype=float)
    if q0.shape != (n,) or p0.shape != (n,):
        raise DomainError(f"initial state must have dimension {n}")
    if not (np.all(np.isfinite(q0)) and np.all(np.isfinite(p0))):
        raise DomainError("initial state must be finite")
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t0 == t1:
        raise DomainError("t_span must be nondegenerate")

    y0 = np.concatenate([q0, p0])
    if variational:
        m0 = np.eye(2 * n) if initial_variation is None else np.asarray(initial_variation, dtype=float)
        y0 = np.concatenate([y0, m0.ravel()])

    sol = solve_ivp(
        system.rhs,
        (t0, t1),
        y0,
        method=METHOD,
        rtol=tol.rtol,
        atol=tol.atol,
        t_eval=t_eval,
        dense_output=True,
        events=events,
    )
    if sol.status == -1:
        last = float(sol.t[-1]) if sol.t.size else t0
        raise IntegrationError(f"integration failed: {sol.message}", last)

    q = sol.y[:n].T
    p = sol.y[n : 2 * n].T
    var = sol.y[2 * n :].T.reshape(-1, 2 * n, 2 * n) if variational else None
    energy = system.energy(q, p)
    energy_error = energy - system.lam
    h0 = float(system.energy(q0, p0))
    drift = float(np.max(np.abs(energy - h0))) / (1.0 + system.lam)
    if drift > 10.0 * tol.energy:
        raise RejectedTrajectoryError(
            f"energy drift {drift:.3e} exceeds 10x tolerance {tol.energy:.1e}", drift
        )
    logger.debug(f"Integrated [{t0:.4g}, {float(sol.t[-1]):.4g}] in {sol.t.size} samples, drift {drift:.2e}")
    trajectory = Trajectory(
        times=sol.t,
        q=q,
        p=p,
        variational=var,
        energy_error=energy_error,
        energy_drift=drift,
        solution=sol.sol,
    )
    trajectory.events = list(zip(sol.t_events, sol.y_events)) if events else []
    return trajectory


def symplectic_defect(m: np.ndarray) -> float:
    """max-norm of M^T J M - J."""
    two_n = m.shape[-1]
    n = two_n // 2
    j = np.zeros((two_n, two_n))
    j[:n, n:] = np.eye(n)
    j[n:, :n] = -np.eye(n)
    return float(np.max(np.abs(m.T @ j @ m - j)))


@dataclass(frozen=True)
class Classification:
    kind: str
    t_escape: Optional[float] = None
    t_forward: Optional[float] = None
    t_backward: Optional[float] = None


def _escape_time(trajectory: Trajectory, r: float, t_cert: float) -> float:
    """Last |s| on [0, t_cert] with |q(s)| <= r."""
    grid = np.linspace(0.0, t_cert, 2001)
    radius = np.linalg.norm(trajectory.positions(grid), axis=1)
    inside = np.nonzero(radius <= r)[0]
    if inside.size == 0:
        return 0.0
    i = int(inside[-1])
    if i == grid.size - 1:
        return abs(t_cert)

    def gap(s: float) -> float:
        return float(np.linalg.norm(trajectory.positions(s))) - r

    a, b = sorted((float(grid[i]), float(grid[i + 1])))
    return abs(brentq(gap, a, b, xtol=1e-13))


def _radial_barrier(system: HamiltonianSystem, q0: np.ndarray, p0: np.ndarray, r_cert: float) -> bool:
    """Radial V only: the effective potential exceeds the energy somewhere between |q0| and r_cert."""
    if not system.potential.is_radial:
        return False
    rho0 = float(np.linalg.norm(q0))
    if rho0 >= r_cert:
        return False
    ang2 = max(rho0**2 * float(p0 @ p0) - float(q0 @ p0) ** 2, 0.0)
    radii = np.linspace(rho0, r_cert, 2001)[1:]
    pts = np.zeros((radii.size, system.dimension))
    pts[:, 0] = radii
    v_eff = system.potential.value(pts) + ang2 / (2.0 * radii**2)
    energy = float(system.energy(q0, p0))
    return bool(np.any(v_eff > energy + 1e-9 * (1.0 + abs(energy))))


def _returns(trajectory: Trajectory, r: float) -> int:
    """Number of re-entries into |q| <= r after having been outside."""
    outside = np.linalg.norm(trajectory.q, axis=1) > r
    return int(np.count_nonzero(outside[:-1] & ~outside[1:]))


def _classify_direction(
    system: HamiltonianSystem,
    q0: np.ndarray,
    p0: np.ndarray,
    r: float,
    t_max: float,
    sign: float,
    tol: Tolerances,
) -> tuple[str, Optional[float]]:
    r_cert = max(r, system.potential.escape_radius(system.lam))
    if np.linalg.norm(q0) >= r_cert and sign * float(q0 @ p0) > 0:
        return NON_TRAPPED, 0.0

    n = system.dimension

    def leaves(t, y):
        return float(y[:n] @ y[:n]) - r_cert**2

    leaves.terminal = True
    leaves.direction = 1.0

    traj = integrate(system, (q0, p0), (0.0, sign * t_max), tol, variational=False, events=[leaves])
    hit_times = traj.events[0][0] if traj.events else np.array([])
    if hit_times.size:
        t_cert = float(hit_times[0])
        return NON_TRAPPED, _escape_time(traj, r, t_cert)
    if _radial_barrier(system, q0, p0, r_cert) or _returns(traj, r) >= RETURNS_FOR_TRAPPED:
        return TRAPPED, None
    return UNDECIDED, None


def classify(
    system: HamiltonianSystem,
    initial: tuple[Sequence[float], Sequence[float]],
    r: float,
    t_max: float,
    tol: Tolerances = Tolerances(),
) -> Classification:
    """Non-trapped iff both time directions pass the outward escape certificate.

    Trapped needs positive evidence: a radial effective-potential barrier the
    orbit cannot cross, or repeated returns into the r-ball. Anything else
    short of escape by t_max is undecided.
    """
    if r <= 0 or t_max <= 0:
        raise DomainError("classify needs r > 0 and t_max > 0")
    q0 = np.asarray(initial[0], dtype=float)
    p0 = np.asarray(initial[1], dtype=float)
    fwd, t_fwd = _classify_direction(system, q0, p0, r, t_max, 1.0, tol)
    bwd, t_bwd = _classify_direction(system, q0, p0, r, t_max, -1.0, tol)
    if fwd == NON_TRAPPED and bwd == NON_TRAPPED:
        return Classification(NON_TRAPPED, max(t_fwd, t_bwd), t_fwd, t_bwd)
    if TRAPPED in (fwd, bwd):
        return Classification(TRAPPED, None, t_fwd, t_bwd)
    return Classification(UNDECIDED, None, t_fwd, t_bwd)
