"""
Modified actions along connecting trajectories and the WKB phases Phi_plus/minus.

S = int (|p|^2/2 - V - lambda) dt - <x_inf, k theta> for the incoming
normalization q ~ k omega t + z. Split at times s and s + t0 it reads
Phi_minus(y, k omega) + int_0^t0 L dt - Phi_plus(x(t0), k theta) + lambda t0,
where Phi_plus(x, xi) = <x_inf, xi> + 2 int_0^inf V dt along the outgoing
characteristic through x, and Phi_minus(x, xi) = -Phi_plus(x, -xi).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Optional

import numpy as np
from joblib import Parallel, delayed
from scipy.integrate import quad
from scipy.optimize import brentq

from scatrel.core.asymptotics import outgoing_limits, propagate, radius_event
from scatrel.core.bvsolve import TrajectorySolution, continue_solution
from scatrel.core.charts import chart_for
from scatrel.core.errors import DegenerateSolutionError, DomainError, NoAsymptoticsError, RegionError
from scatrel.core.flow import NON_TRAPPED, HamiltonianSystem, Tolerances, Trajectory, integrate

logger = logging.getLogger(__name__)

SHELL_FACTOR = 20.0
QUAD_OPTS = {"epsabs": 1e-13, "epsrel": 1e-12, "limit": 500}
CHARACTERISTIC_TOL = Tolerances(rtol=1e-12, atol=1e-14, energy=1e-11)


@dataclass(frozen=True)
class ActionRecord:
    value: float
    phi_minus_part: float
    lagrangian_integral: float
    phi_plus_part: float
    energy_term: float
    alt_value: float
    alt_value_shell: float
    t0: float
    s_choice: float
    r_bar: float

    @property
    def consistency(self) -> float:
        return abs(self.value - self.alt_value)

    @property
    def shell_consistency(self) -> float:
        return abs(self.alt_value - self.alt_value_shell)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["consistency"] = self.consistency
        out["shell_consistency"] = self.shell_consistency
        return out


@dataclass
class _Path:
    """Solution trajectory extended backward and forward through the shell."""

    backward: Optional[Trajectory]
    forward: Trajectory
    t_start: float
    t_closest: float

    @property
    def t_a(self) -> float:
        return self.backward.t_end if self.backward is not None else self.t_start

    @property
    def t_b(self) -> float:
        return self.forward.t_end

    def state(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        traj = self.backward if (t < self.t_start and self.backward is not None) else self.forward
        q, p, _ = traj.state(t)
        return q, p

    def radius(self, t: float) -> float:
        return float(np.linalg.norm(self.state(t)[0]))


def _extend(system: HamiltonianSystem, solution: TrajectorySolution, r_bar: float, tol: Tolerances) -> _Path:
    traj = solution.trajectory
    if traj is None or traj.origin is None:
        raise DomainError("action needs a solution with its launched trajectory")
    state = traj.origin
    n = system.dimension
    k = system.k
    backward = None
    outer = r_bar + 1.5
    if np.linalg.norm(state.q) < outer:
        span = 4.0 * outer / k + 10.0
        backward = integrate(
            system,
            (state.q, state.p),
            (state.t_start, state.t_start - span),
            tol,
            variational=False,
            events=[radius_event(outer, n, True)],
        )
    r_out = r_bar + 2.0 + 2.0 * k
    forward = integrate(
        system,
        (state.q, state.p),
        (state.t_start, state.t_start + 50.0 * (r_out + np.linalg.norm(state.q)) / k),
        tol,
        variational=False,
        events=[radius_event(r_out, n, True)],
    )
    if not forward.events[0][0].size:
        raise NoAsymptoticsError("solution trajectory did not leave the action shell", "undecided")
    t_closest = float(forward.times[int(np.argmin(np.linalg.norm(forward.q, axis=1)))])
    return _Path(backward, forward, state.t_start, t_closest)


def _crossing(path: _Path, radius: float, lo: float, hi: float) -> float:
    return brentq(lambda t: path.radius(t) - radius, lo, hi, xtol=1e-13)


def _potential_integral(system: HamiltonianSystem, path: _Path, a: float, b: float) -> float:
    if b <= a:
        return 0.0
    v = system.potential.value
    cuts = sorted({a, b} | {c for c in (path.t_start, path.t_closest) if a < c < b})
    return float(sum(quad(lambda t: v(path.state(t)[0]), lo, hi, **QUAD_OPTS)[0] for lo, hi in zip(cuts, cuts[1:])))


def _lagrangian_integral(system: HamiltonianSystem, path: _Path, a: float, b: float, shift: float) -> float:
    v = system.potential.value

    def integrand(t: float) -> float:
        q, p = path.state(t)
        return 0.5 * float(p @ p) - v(q) - shift

    cuts = sorted({a, b} | {c for c in (path.t_start, path.t_closest) if a < c < b})
    return float(sum(quad(integrand, lo, hi, **QUAD_OPTS)[0] for lo, hi in zip(cuts, cuts[1:])))


def default_shell_radius(system: HamiltonianSystem) -> float:
    return SHELL_FACTOR * system.potential.scale


def admissible_s(
    system: HamiltonianSystem, solution: TrajectorySolution, r_bar: Optional[float] = None, tol: Tolerances = Tolerances()
) -> tuple[float, float]:
    """Interval of s for which y = q(s) lies in the inbound shell r_bar < |y| < r_bar + 1."""
    r_bar = default_shell_radius(system) if r_bar is None else r_bar
    path = _extend(system, solution, r_bar, tol)
    return (_crossing(path, r_bar + 1.0, path.t_a, path.t_closest), _crossing(path, r_bar, path.t_a, path.t_closest))


def action(
    system: HamiltonianSystem,
    solution: TrajectorySolution,
    t0: Optional[float] = None,
    s: Optional[float] = None,
    *,
    r_bar: Optional[float] = None,
    tol: Tolerances = Tolerances(),
) -> ActionRecord:
    """Modified action by the three-term split and by the single-integral form."""
    if solution.degenerate:
        raise DegenerateSolutionError(f"solution {solution.index} has sigma_hat = {solution.sigma_hat:.3e}")
    r_bar = default_shell_radius(system) if r_bar is None else float(r_bar)
    path = _extend(system, solution, r_bar, tol)
    lam, k = system.lam, system.k
    omega = solution.omega
    theta = solution.xi_inf if solution.xi_inf is not None else solution.theta
    z, x_inf = solution.z, solution.x_inf

    if s is None:
        s = _crossing(path, r_bar + 0.5, path.t_a, path.t_closest)
    s = float(s)
    if not (s < 0 and path.t_a <= s <= path.t_closest and r_bar < path.radius(s) < r_bar + 1.0):
        raise DomainError(f"s={s:.6g} does not place y in the inbound shell ({r_bar:g}, {r_bar + 1:g})")
    if t0 is None:
        t_out = _crossing(path, r_bar, path.t_closest, path.t_b)
        t0 = t_out - s + 1.0
    t0 = float(t0)
    t_end = s + t0
    if not (path.t_closest < t_end <= path.t_b and path.radius(t_end) > r_bar):
        raise DomainError(f"t0={t0:.6g} does not place x(t0) outbound beyond the shell")

    v = system.potential.value
    tail_in = quad(lambda t: v(k * omega * t + z), -np.inf, path.t_a, **QUAD_OPTS)[0]
    tail_out = quad(lambda t: v(k * theta * t + x_inf), path.t_b, np.inf, **QUAD_OPTS)[0]
    pairing = k * float(x_inf @ theta)

    phi_minus = 2.0 * lam * s - 2.0 * (tail_in + _potential_integral(system, path, path.t_a, s))
    lagrangian = _lagrangian_integral(system, path, s, t_end, 0.0)
    phi_plus = pairing + 2.0 * lam * t_end + 2.0 * (_potential_integral(system, path, t_end, path.t_b) + tail_out)
    value = phi_minus + lagrangian - phi_plus + lam * t0

    alt = _lagrangian_integral(system, path, path.t_a, path.t_b, lam) - 2.0 * (tail_in + tail_out) - pairing
    alt_shell = -2.0 * (_potential_integral(system, path, path.t_a, path.t_b) + tail_in + tail_out) - pairing
    record = ActionRecord(value, phi_minus, lagrangian, -phi_plus, lam * t0, alt, alt_shell, t0, s, r_bar)
    logger.debug(f"Action S={value:.12g}, consistency {record.consistency:.2e}")
    return record


@dataclass(frozen=True)
class GradientCheck:
    d_omega: np.ndarray
    d_theta: np.ndarray
    expected_omega: np.ndarray
    expected_theta: np.ndarray
    mismatch_omega: float
    mismatch_theta: float

    @property
    def mismatch(self) -> float:
        return max(self.mismatch_omega, self.mismatch_theta)


def _richardson_derivative(f: Callable[[float], float], h: float) -> float:
    d1 = (f(h) - f(-h)) / (2.0 * h)
    d2 = (f(2.0 * h) - f(-2.0 * h)) / (4.0 * h)
    return (4.0 * d1 - d2) / 3.0


def action_gradients(
    system: HamiltonianSystem,
    omega,
    theta,
    solution: TrajectorySolution,
    fd_step: float = 1e-4,
    *,
    action_fn: Optional[Callable[[np.ndarray, np.ndarray], float]] = None,
    r_bar: Optional[float] = None,
    tol: Tolerances = Tolerances(),
) -> GradientCheck:
    """Finite-difference chart gradients of S(omega, theta) against (k z, -k w)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if action_fn is None:

        def action_fn(om: np.ndarray, th: np.ndarray) -> float:
            branch = continue_solution(system, om, th, solution, flow_tol=tol)
            return action(system, branch, r_bar=r_bar, tol=tol).value

    chart_w, chart_t = chart_for(omega), chart_for(theta)
    u0, v0 = chart_w.from_sphere(omega), chart_t.from_sphere(theta)
    m = u0.size

    def along_omega(c: int) -> Callable[[float], float]:
        e = np.eye(m)[c]
        return lambda h: action_fn(chart_w.to_sphere(u0 + h * e), theta)

    def along_theta(c: int) -> Callable[[float], float]:
        e = np.eye(m)[c]
        return lambda h: action_fn(omega, chart_t.to_sphere(v0 + h * e))

    d_omega = np.array([_richardson_derivative(along_omega(c), fd_step) for c in range(m)])
    d_theta = np.array([_richardson_derivative(along_theta(c), fd_step) for c in range(m)])
    k = system.k
    expected_omega = k * chart_w.jacobian(u0).T @ solution.z
    expected_theta = -k * chart_t.jacobian(v0).T @ solution.x_inf

    def mismatch(d: np.ndarray, e: np.ndarray) -> float:
        return float(np.linalg.norm(d - e) / max(float(np.linalg.norm(e)), k * 1e-2))

    return GradientCheck(
        d_omega,
        d_theta,
        expected_omega,
        expected_theta,
        mismatch(d_omega, expected_omega),
        mismatch(d_theta, expected_theta),
    )


# WKB phases along characteristics


@dataclass(frozen=True)
class PhaseRegion:
    """Gamma_plus/minus(R, d, sigma): |x| > R, 1/d < |xi| < d, +-cos(x, xi) > sigma."""

    sign: int
    radius: float
    band: float
    sigma: float

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise DomainError("region sign must be +1 or -1")
        if not (self.radius > 1.0 and self.band > 1.0 and -1.0 < self.sigma < 1.0):
            raise DomainError(f"invalid region parameters R={self.radius}, d={self.band}, sigma={self.sigma}")

    def contains(self, x, xi) -> bool:
        x = np.asarray(x, dtype=float)
        xi = np.asarray(xi, dtype=float)
        rx, rxi = float(np.linalg.norm(x)), float(np.linalg.norm(xi))
        if not (rx > self.radius and 1.0 / self.band < rxi < self.band):
            return False
        return self.sign * float(x @ xi) / (rx * rxi) > self.sigma


@dataclass(frozen=True)
class Characteristic:
    sign: int
    x: np.ndarray
    xi: np.ndarray
    p0: np.ndarray
    x_inf: np.ndarray
    value: float
    a0: float
    mixed_hessian: np.ndarray
    hessian_x: np.ndarray
    residual: float
    trajectory: Any = field(default=None, repr=False)

    @property
    def grad_x(self) -> np.ndarray:
        return self.p0


def _outgoing_characteristic(
    potential, x: np.ndarray, xi: np.ndarray, tol: Tolerances
) -> tuple[np.ndarray, Any, Trajectory, np.ndarray, float]:
    n = x.size
    speed = float(np.linalg.norm(xi))
    sub = HamiltonianSystem(potential, 0.5 * speed**2)
    kinetic = speed**2 - 2.0 * potential.value(x)
    if kinetic <= 0:
        raise RegionError(f"point {x.tolist()} is classically forbidden for |xi|={speed:.6g}")
    p0 = np.sqrt(kinetic) * xi / speed
    best = np.inf
    used = p0
    for _ in range(30):
        used = p0
        traj = propagate(sub, x, used, 0.0, tol, variational=True)
        if traj.classification != NON_TRAPPED:
            raise RegionError(f"characteristic through {x.tolist()} is {traj.classification}")
        limits = outgoing_limits(sub, traj, tol)
        res = limits.p_inf - xi
        best = float(np.linalg.norm(res))
        m = limits.state_last[2 * n :].reshape(2 * n, 2 * n)
        if best <= 1e-12 * (1.0 + speed):
            break
        p0 = p0 - np.linalg.solve(m[n:, n:], res)
    if best > 1e-9 * (1.0 + speed):
        raise RegionError(f"no characteristic with asymptotic momentum {xi.tolist()} through {x.tolist()}")
    return used, limits, traj, m, best


def characteristic(
    system: HamiltonianSystem,
    sign: int,
    x,
    xi,
    region: Optional[PhaseRegion] = None,
    tol: Tolerances = CHARACTERISTIC_TOL,
) -> Characteristic:
    """Phi_sign and a0 at (x, xi) from the characteristic with the required asymptotics."""
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1")
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if region is not None and (region.sign != sign or not region.contains(x, xi)):
        raise RegionError(f"(x, xi) = ({x.tolist()}, {xi.tolist()}) outside the configured region")
    n = x.size
    target = sign * xi
    p0, limits, traj, m, best = _outgoing_characteristic(system.potential, x, target, tol)
    v = system.potential.value
    t_last = limits.t_last
    bulk = quad(lambda t: v(traj.state(t)[0]), 0.0, t_last, **QUAD_OPTS)[0]
    tail = quad(lambda t: v(limits.x_inf + target * t), t_last, np.inf, **QUAD_OPTS)[0]
    value_plus = float(limits.x_inf @ target) + 2.0 * (bulk + tail)
    mpp_inv = np.linalg.inv(m[n:, n:])
    hess_plus = -mpp_inv @ m[n:, :n]
    jac = m[:n, :n] + m[:n, n:] @ hess_plus
    amp = float(np.sqrt(abs(np.linalg.det(jac))))
    if sign == 1:
        return Characteristic(1, x, xi, p0, limits.x_inf, value_plus, amp, mpp_inv, hess_plus, best, traj)
    return Characteristic(-1, x, xi, -p0, limits.x_inf, -value_plus, amp, mpp_inv, -hess_plus, best, traj)


def phi(system: HamiltonianSystem, sign: int, x, xi, region: Optional[PhaseRegion] = None) -> float:
    return characteristic(system, sign, x, xi, region).value


def a0(system: HamiltonianSystem, sign: int, x, xi, region: Optional[PhaseRegion] = None) -> float:
    return characteristic(system, sign, x, xi, region).a0


def _fd_gradient(f: Callable[[np.ndarray], float], point: np.ndarray, step: float) -> np.ndarray:
    grad = np.empty(point.size)
    for i in range(point.size):
        e = np.zeros(point.size)
        e[i] = 1.0
        grad[i] = _richardson_derivative(lambda h: f(point + h * e), step)
    return grad


def eikonal_residual(system: HamiltonianSystem, sign: int, x, xi, step: float = 1e-3) -> float:
    """|grad_x Phi|^2 / 2 + V - |xi|^2 / 2 with grad_x Phi by finite differences."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    grad = _fd_gradient(lambda y: phi(system, sign, y, xi), x, step)
    return float(0.5 * grad @ grad + system.potential.value(x) - 0.5 * xi @ xi)


def sample_region(region: PhaseRegion, count: int, seed: int = 0, dimension: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic sample of (x, xi) pairs inside the region."""
    rng = np.random.default_rng(seed)
    xs = np.empty((count, dimension))
    xis = np.empty((count, dimension))
    lo_cos = region.sigma + 0.05 * (1.0 - region.sigma)
    for i in range(count):
        u = rng.normal(size=dimension)
        u /= np.linalg.norm(u)
        v = rng.normal(size=dimension)
        v -= (v @ u) * u
        v /= np.linalg.norm(v)
        r = region.radius * rng.uniform(1.05, 2.0)
        speed = rng.uniform(1.05 / region.band, region.band / 1.05)
        c = rng.uniform(lo_cos, 1.0)
        direction = region.sign * (c * u) + np.sqrt(1.0 - c * c) * v
        xs[i] = r * u
        xis[i] = speed * direction
    return xs, xis


@dataclass(frozen=True)
class WkbPhase:
    region: PhaseRegion
    x: np.ndarray
    xi: np.ndarray
    values: np.ndarray
    a0: np.ndarray
    mixed_defect: np.ndarray
    phase_offset: np.ndarray


def wkb_phase(system: HamiltonianSystem, region: PhaseRegion, xs, xis, n_jobs: int = 1) -> WkbPhase:
    xs = np.asarray(xs, dtype=float)
    xis = np.asarray(xis, dtype=float)
    if n_jobs == 1:
        chars = [characteristic(system, region.sign, x, xi, region) for x, xi in zip(xs, xis)]
    else:
        chars = Parallel(n_jobs=n_jobs)(
            delayed(characteristic)(system, region.sign, x, xi, region) for x, xi in zip(xs, xis)
        )
    eye = np.eye(xs.shape[1])
    return WkbPhase(
        region,
        xs,
        xis,
        np.array([c.value for c in chars]),
        np.array([c.a0 for c in chars]),
        np.array([float(np.max(np.abs(c.mixed_hessian - eye))) for c in chars]),
        np.array([c.value - float(x @ xi) for c, x, xi in zip(chars, xs, xis)]),
    )


@dataclass(frozen=True)
class OffsetCheck:
    horizons: tuple[float, float]
    defects: tuple[float, float]

    @property
    def converging(self) -> bool:
        return self.defects[1] <= self.defects[0] + 1e-6


def xi_gradient_check(
    system: HamiltonianSystem, solution: TrajectorySolution, step: float = 1e-4
) -> OffsetCheck:
    """|x_inf + k theta tau - grad_xi Phi_plus(q(tau), k theta)| at two outgoing horizons."""
    traj = solution.trajectory
    if traj is None:
        raise DomainError("xi_gradient_check needs the solution trajectory")
    theta = solution.xi_inf if solution.xi_inf is not None else solution.theta
    xi = system.k * theta
    tau1 = float(traj.events[0][0][0])
    tau2 = float(traj.events[-1][0][0]) if len(traj.events) > 1 else 2.0 * tau1

    def position(tau: float) -> np.ndarray:
        if tau <= traj.t_end:
            return traj.state(tau)[0]
        return solution.x_inf + xi * tau

    defects = []
    for tau in (tau1, tau2):
        x = position(tau)
        grad = _fd_gradient(lambda e: phi(system, 1, x, e), xi, step)
        defects.append(float(np.linalg.norm(solution.x_inf + xi * tau - grad)))
    return OffsetCheck((tau1, tau2), (defects[0], defects[1]))
