"""
Partial-wave scattering amplitude for radial potentials in n = 2 and n = 3.

Phase shifts come from the variable-phase equation
    delta'(r) = -(U(r) / kq) [jh(kq r) cos delta - yh(kq r) sin delta]^2
with U = 2V / h^2, kq = sqrt(2 lambda) / h, jh(x) = sqrt(pi x / 2) J_nu(x),
yh(x) = sqrt(pi x / 2) Y_nu(x) and nu = l + (n - 2) / 2.

Amplitude conventions:
    n = 3: f(phi) = (2 i kq)^-1 sum_l (2l + 1)(exp(2 i delta_l) - 1) P_l(cos phi)
    n = 2: f(phi) = (2 pi i kq)^-1/2 sum_m (exp(2 i delta_|m|) - 1) exp(i m phi)
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from numpy.polynomial import legendre
from scipy.integrate import quad, solve_ivp
from scipy.special import eval_legendre, j0, jv, yv

from scatrel.core.amplitude import DIAGONAL_BAND, AmplitudeGrid, EntryFlag
from scatrel.core.errors import DiagonalExcludedError, DomainError, OracleBudgetError
from scatrel.core.potential import PotentialModel

logger = logging.getLogger(__name__)

TAIL_THRESHOLD = 1e-12
NEGLIGIBLE_FRACTION = 1e-14
MAX_L = 4000
MAX_RADIUS_FACTOR = 1e4
BATCH = 8
CHUNK = 4096


class OracleAccuracyWarning(UserWarning):
    """Partial-wave series truncated above the tail threshold."""


@dataclass(frozen=True)
class PartialWaveSolution:
    k: float
    lam: float
    h: float
    dimension: int
    phase_shifts: np.ndarray
    tail_estimate: float
    matching_radius: float
    tail_threshold: float = TAIL_THRESHOLD
    method: str = "variable-phase"
    truncated: bool = False
    meta: dict = field(default_factory=dict, repr=False)

    @property
    def lmax(self) -> int:
        return int(self.phase_shifts.size - 1)


def _riccati(nu: float, x):
    x = np.asarray(x, dtype=float)
    s = np.sqrt(0.5 * np.pi * x)
    return s * jv(nu, x), s * yv(nu, x)


def _check_model(model: PotentialModel, lam: float, h: float) -> None:
    if not model.is_radial:
        raise DomainError("the partial-wave oracle needs a radial potential")
    if model.dimension not in (2, 3):
        raise DomainError(f"the partial-wave oracle supports n = 2, 3; got {model.dimension}")
    if not (lam > 0 and h > 0):
        raise DomainError("lambda and h must be positive")


def matching_radius(model: PotentialModel, lam: float, budget: Optional[float] = None) -> float:
    """Radius beyond which |V| < 1e-14 lambda."""
    radius = max(model.negligible_radius(NEGLIGIBLE_FRACTION * lam), 1e-3)
    limit = MAX_RADIUS_FACTOR * max(1.0, model.scale) if budget is None else budget
    if radius > limit:
        raise OracleBudgetError(f"matching radius {radius:.4g} exceeds the budget {limit:.4g}")
    return radius


def _profile(model: PotentialModel):
    n = model.dimension

    def v(r):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        pts = np.zeros((r.size, n))
        pts[:, 0] = r
        return model.value(pts)

    return v


def _single_shift(model: PotentialModel, lam: float, h: float, ell: int, r_match: float) -> float:
    kq = np.sqrt(2.0 * lam) / h
    nu = ell + 0.5 * (model.dimension - 2)
    v = _profile(model)
    grid = np.geomspace(1e-8 * r_match, r_match, 2000)
    jh, _ = _riccati(nu, kq * grid)
    usable = np.nonzero(np.abs(jh) > 1e-25)[0]
    if usable.size == 0:
        return 0.0
    r0 = float(grid[usable[0]])

    def u(r):
        return 2.0 * v(r) / h**2

    start = -quad(lambda r: float(u(r)[0] * _riccati(nu, kq * r)[0] ** 2), 0.0, r0, limit=100)[0] / kq

    def rhs(r, y):
        jr, yr = _riccati(nu, kq * r)
        return [-(float(u(r)[0]) / kq) * (jr * np.cos(y[0]) - yr * np.sin(y[0])) ** 2]

    sol = solve_ivp(rhs, (r0, r_match), [start], method="DOP853", rtol=1e-12, atol=1e-14)
    if sol.status == -1:
        raise OracleBudgetError(f"phase equation for l={ell} failed: {sol.message}")
    return float(sol.y[0, -1])


def phase_shifts(
    model: PotentialModel,
    lam: float,
    h: float,
    lmax: Optional[int] = None,
    *,
    tail_threshold: float = TAIL_THRESHOLD,
    radius_budget: Optional[float] = None,
    l_budget: int = MAX_L,
    r_match: Optional[float] = None,
    n_jobs: int = 1,
) -> PartialWaveSolution:
    """delta_l for l = 0..lmax, extending lmax until three consecutive |delta| < threshold."""
    _check_model(model, lam, h)
    kq = np.sqrt(2.0 * lam) / h
    r_match = matching_radius(model, lam, radius_budget) if r_match is None else float(r_match)

    def batch(ells: Sequence[int]) -> list[float]:
        if n_jobs == 1:
            return [_single_shift(model, lam, h, ell, r_match) for ell in ells]
        return Parallel(n_jobs=n_jobs)(delayed(_single_shift)(model, lam, h, ell, r_match) for ell in ells)

    if lmax is not None:
        if lmax < 0:
            raise DomainError("lmax must be nonnegative")
        shifts = np.array(batch(range(lmax + 1)))
        tail = float(abs(shifts[-1]))
        truncated = tail > tail_threshold
    else:
        values: list[float] = []
        while True:
            start = len(values)
            if start >= l_budget:
                raise OracleBudgetError(f"phase shifts not below {tail_threshold:g} by l={l_budget}")
            values.extend(batch(range(start, start + BATCH)))
            small = 0
            for i, d in enumerate(values):
                small = small + 1 if abs(d) < tail_threshold else 0
                if small == 3:
                    values = values[: i + 1]
                    break
            if small == 3:
                break
        shifts = np.array(values)
        tail = float(np.max(np.abs(shifts[-3:])))
        truncated = False
    logger.info(f"Phase shifts at h={h:g}: lmax={shifts.size - 1}, matching radius {r_match:.4g}")
    return PartialWaveSolution(
        k=float(kq),
        lam=float(lam),
        h=float(h),
        dimension=model.dimension,
        phase_shifts=shifts,
        tail_estimate=tail,
        matching_radius=r_match,
        tail_threshold=tail_threshold,
        truncated=truncated,
    )


def born_phase_shifts(model: PotentialModel, lam: float, h: float, lmax: int) -> PartialWaveSolution:
    """First Born phase shifts -(1/kq) int U jh^2 dr."""
    _check_model(model, lam, h)
    kq = np.sqrt(2.0 * lam) / h
    r_match = matching_radius(model, lam)
    v = _profile(model)
    shifts = []
    for ell in range(lmax + 1):
        nu = ell + 0.5 * (model.dimension - 2)
        val = quad(
            lambda r: float(2.0 * v(r)[0] / h**2 * _riccati(nu, kq * r)[0] ** 2), 0.0, r_match, limit=400, epsabs=1e-15
        )[0]
        shifts.append(-val / kq)
    shifts = np.array(shifts)
    return PartialWaveSolution(
        float(kq), float(lam), float(h), model.dimension, shifts, float(abs(shifts[-1])), r_match, method="born"
    )


def scattering_angle(omega, theta) -> float:
    w = np.asarray(omega, dtype=float)
    t = np.asarray(theta, dtype=float)
    return float(np.arccos(np.clip(w @ t / (np.linalg.norm(w) * np.linalg.norm(t)), -1.0, 1.0)))


def amplitude_at_angle(solution: PartialWaveSolution, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    delta = solution.phase_shifts
    terms = np.exp(2j * delta) - 1.0
    ells = np.arange(delta.size)
    if solution.dimension == 3:
        basis = np.array([eval_legendre(ell, np.cos(phi)) for ell in ells])
        total = np.tensordot((2 * ells + 1) * terms, basis, axes=1)
        return total / (2j * solution.k)
    weights = np.where(ells == 0, 1.0, 2.0)
    total = np.tensordot(weights * terms, np.cos(np.multiply.outer(ells, phi)), axes=1)
    return total / np.sqrt(2j * np.pi * solution.k)


def _warn_tail(solution: PartialWaveSolution) -> None:
    if solution.tail_estimate > solution.tail_threshold:
        msg = f"partial-wave tail {solution.tail_estimate:.2e} above threshold {solution.tail_threshold:.0e}"
        logger.warning(msg)
        warnings.warn(msg, OracleAccuracyWarning, stacklevel=3)


def amplitude(solution: PartialWaveSolution, omega, theta) -> complex:
    """Scattering amplitude at the angle between omega and theta."""
    phi = scattering_angle(omega, theta)
    if phi < 1e-12:
        raise DiagonalExcludedError("forward direction omega = theta is excluded")
    _warn_tail(solution)
    return complex(amplitude_at_angle(solution, phi))


@dataclass(frozen=True)
class OpticalReport:
    cross_section: float
    forward_term: float
    numerical_defect: float
    tail_defect: float
    tail_responsible: bool

    @property
    def defect(self) -> float:
        return max(self.numerical_defect, self.tail_defect)


def optical_check(solution: PartialWaveSolution) -> OpticalReport:
    """Integral of |f|^2 over the sphere against the forward-amplitude identity."""
    delta = solution.phase_shifts
    kq = solution.k
    if solution.dimension == 3:
        nodes, weights = legendre.leggauss(2 * delta.size + 16)
        f = amplitude_at_angle(solution, np.arccos(nodes))
        integral = 2.0 * np.pi * float(np.sum(weights * np.abs(f) ** 2))
        forward = 4.0 * np.pi / kq * float(np.imag(amplitude_at_angle(solution, 0.0)))
        last_weight = 2.0 * solution.lmax + 1.0
        missing = 4.0 * np.pi / kq**2 * last_weight * np.sin(solution.tail_estimate) ** 2
    else:
        count = 4 * delta.size + 16
        phis = 2.0 * np.pi * np.arange(count) / count
        integral = 2.0 * np.pi / count * float(np.sum(np.abs(amplitude_at_angle(solution, phis)) ** 2))
        f0 = complex(amplitude_at_angle(solution, 0.0))
        forward = -2.0 * np.sqrt(2.0 * np.pi / kq) * float(np.real(np.exp(0.25j * np.pi) * f0))
        missing = 4.0 / kq * 2.0 * np.sin(solution.tail_estimate) ** 2
    scale = max(abs(integral), abs(forward))
    if scale == 0.0:
        return OpticalReport(0.0, 0.0, 0.0, 0.0, False)
    numerical = abs(integral - forward) / scale
    tail = missing / scale if solution.truncated else 0.0
    return OpticalReport(integral, forward, numerical, tail, tail > numerical)


def fourier_transform(model: PotentialModel, lam: float, h: float, q) -> np.ndarray:
    """Fourier transform of U = 2V / h^2 at momentum transfer |q|."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    n = model.dimension
    if model.kind == "gaussian" and model.is_radial:
        a, w = model.params["amplitude"], model.params["width"]
        return 2.0 * a / h**2 * (2.0 * np.pi * w**2) ** (n / 2) * np.exp(-0.5 * (w * q) ** 2)
    v = _profile(model)
    r_match = matching_radius(model, lam)
    out = np.empty(q.size)
    for i, qi in enumerate(q):
        if n == 3:
            kern = (lambda r: r * r * np.sinc(qi * r / np.pi))
            out[i] = 4.0 * np.pi * quad(lambda r: float(v(r)[0]) * kern(r), 0.0, r_match, limit=400)[0]
        else:
            out[i] = 2.0 * np.pi * quad(lambda r: float(v(r)[0]) * r * j0(qi * r), 0.0, r_match, limit=400)[0]
    return 2.0 * out / h**2


def born_amplitude(model: PotentialModel, lam: float, h: float, omega, theta) -> complex:
    """First Born amplitude in the same convention as amplitude()."""
    _check_model(model, lam, h)
    kq = np.sqrt(2.0 * lam) / h
    phi = scattering_angle(omega, theta)
    q = 2.0 * kq * np.sin(0.5 * phi)
    u = complex(fourier_transform(model, lam, h, q)[0])
    if model.dimension == 3:
        return -u / (4.0 * np.pi)
    return complex(-0.5j * u / np.sqrt(2j * np.pi * kq))


def _amplitude_unique(solution: PartialWaveSolution, phi: np.ndarray) -> np.ndarray:
    unique, inverse = np.unique(np.round(phi, 13), return_inverse=True)
    values = np.concatenate(
        [amplitude_at_angle(solution, unique[i : i + CHUNK]) for i in range(0, unique.size, CHUNK)]
    )
    return values[inverse.ravel()]


def amplitude_grid(
    model: PotentialModel,
    lam: float,
    h_values: Sequence[float],
    omega_grid,
    theta_grid,
    *,
    diagonal_band: float = DIAGONAL_BAND,
    n_jobs: int = 1,
) -> AmplitudeGrid:
    """Oracle kernel on an angular grid, one phase-shift set per h."""
    grid = AmplitudeGrid.empty(lam, h_values, omega_grid, theta_grid, source="oracle", diagonal_band=diagonal_band)
    phi = np.arccos(np.clip(grid.omega_grid @ grid.theta_grid.T, -1.0, 1.0))
    off = grid.flags != EntryFlag.DIAGONAL
    for ih, h in enumerate(grid.h_values):
        pw = phase_shifts(model, lam, float(h), n_jobs=n_jobs)
        _warn_tail(pw)
        grid.kernel[ih][off] = _amplitude_unique(pw, phi[off])
        grid.normalization[f"lmax_h{h:g}"] = pw.lmax
    grid.flags[off] = EntryFlag.FILLED
    grid.normalization["convention"] = "partial-wave"
    return grid
