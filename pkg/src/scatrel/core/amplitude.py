"""
Semiclassical scattering amplitude and its comparison with the partial-wave oracle.

The leading-order kernel at an off-diagonal pair (omega, theta) is
    K(omega, theta; h) = sum_l |sigma_l|^-1/2 exp(i S_l / h - i mu_l pi / 2)
summed over the connecting trajectories. The sign of sigma_l is carried by the
Maslov index, so only its modulus enters. Classical data does not depend on h
and is computed once per pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from scatrel.core.action_wkb import action
from scatrel.core.asymptotics import DEFAULT_INCOMING_TOL, unit_vector
from scatrel.core.bvsolve import find_all, scan_impacts
from scatrel.core.errors import DomainError, PatchInvalidError, ScatrelError
from scatrel.core.flow import HamiltonianSystem, Tolerances

logger = logging.getLogger(__name__)

DIAGONAL_BAND = np.deg2rad(10.0)
BEAT_TOLERANCE = 0.05


class EntryFlag(str, Enum):
    FILLED = "filled"
    DEGENERATE = "degenerate"
    SHADOW = "shadow"
    DIAGONAL = "diagonal"


def _directions(grid) -> np.ndarray:
    arr = np.asarray(grid, dtype=float)
    if arr.ndim == 1:
        return np.array([unit_vector(a) for a in arr]).reshape(-1, 2)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise DomainError(f"direction grid must be angles or an (m, n) array, got shape {arr.shape}")
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


def separation(omega, theta) -> float:
    return float(np.arccos(np.clip(np.dot(omega, theta), -1.0, 1.0)))


@dataclass
class AmplitudeGrid:
    lam: float
    h_values: np.ndarray
    omega_grid: np.ndarray
    theta_grid: np.ndarray
    kernel: np.ndarray
    flags: np.ndarray
    source: str
    normalization: dict = field(default_factory=dict)
    diagonal_band: float = DIAGONAL_BAND

    @classmethod
    def empty(
        cls,
        lam: float,
        h_values: Sequence[float],
        omega_grid,
        theta_grid,
        source: str,
        diagonal_band: float = DIAGONAL_BAND,
    ) -> "AmplitudeGrid":
        hs = np.asarray(h_values, dtype=float)
        if hs.ndim != 1 or hs.size == 0 or np.any(hs <= 0) or np.any(np.diff(hs) >= 0):
            raise DomainError(f"h_values must be positive and strictly decreasing, got {hs.tolist()}")
        if source not in ("semiclassical", "oracle"):
            raise DomainError(f"unknown amplitude source '{source}'")
        omegas, thetas = _directions(omega_grid), _directions(theta_grid)
        if omegas.shape[1] != thetas.shape[1]:
            raise DomainError("omega and theta grids live in different dimensions")
        flags = np.full((len(omegas), len(thetas)), EntryFlag.SHADOW, dtype=object)
        for iw, w in enumerate(omegas):
            for it, t in enumerate(thetas):
                if separation(w, t) < diagonal_band:
                    flags[iw, it] = EntryFlag.DIAGONAL
        kernel = np.zeros((hs.size, len(omegas), len(thetas)), dtype=complex)
        return cls(float(lam), hs, omegas, thetas, kernel, flags, source, {}, float(diagonal_band))

    @property
    def dimension(self) -> int:
        return int(self.omega_grid.shape[1])

    @property
    def filled(self) -> np.ndarray:
        return self.flags == EntryFlag.FILLED

    def angles(self, which: str) -> np.ndarray:
        grid = self.omega_grid if which == "omega" else self.theta_grid
        if self.dimension != 2:
            raise DomainError("angle coordinates exist only for n = 2")
        return np.arctan2(grid[:, 1], grid[:, 0])

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for ih, h in enumerate(self.h_values):
            for iw, w in enumerate(self.omega_grid):
                for it, t in enumerate(self.theta_grid):
                    row = {"h": h}
                    if self.dimension == 2:
                        row["omega"] = float(np.arctan2(w[1], w[0]))
                        row["theta"] = float(np.arctan2(t[1], t[0]))
                    else:
                        row.update({f"omega_{c + 1}": float(w[c]) for c in range(self.dimension)})
                        row.update({f"theta_{c + 1}": float(t[c]) for c in range(self.dimension)})
                    value = self.kernel[ih, iw, it]
                    row.update(re_K=float(value.real), im_K=float(value.imag), flag=self.flags[iw, it].value)
                    rows.append(row)
        return pd.DataFrame(rows)


@dataclass(frozen=True)
class Branch:
    sigma_hat: float
    action: float
    maslov: int
    index: int = 0


@dataclass(frozen=True)
class ClassicalEntry:
    flag: EntryFlag
    branches: tuple[Branch, ...] = ()


class ClassicalCache:
    """Write-once store of classical data per (omega, theta) pair."""

    def __init__(self):
        self._entries: dict[tuple, ClassicalEntry] = {}
        self.misses = 0
        self.hits = 0

    @staticmethod
    def key(omega, theta) -> tuple:
        return tuple(np.round(omega, 14)) + tuple(np.round(theta, 14))

    def get(self, omega, theta) -> Optional[ClassicalEntry]:
        entry = self._entries.get(self.key(omega, theta))
        if entry is not None:
            self.hits += 1
        return entry

    def put(self, omega, theta, entry: ClassicalEntry) -> None:
        key = self.key(omega, theta)
        if key not in self._entries:
            self.misses += 1
            self._entries[key] = entry

    def __len__(self) -> int:
        return len(self._entries)


def kernel_value(branches: Sequence[Branch], h: float) -> complex:
    """Leading-order kernel for one pair at one h."""
    total = 0j
    for b in branches:
        total += abs(b.sigma_hat) ** -0.5 * np.exp(1j * b.action / h - 0.5j * np.pi * b.maslov)
    return complex(total)


def classical_cross_section(branches: Sequence[Branch]) -> float:
    """Sum of |sigma_l|^-1: |K|^2 with the interference terms averaged out."""
    return float(sum(1.0 / abs(b.sigma_hat) for b in branches))


def _classical_row(system, omega, thetas, flags_row, options) -> list[Optional[ClassicalEntry]]:
    scan = scan_impacts(
        system, omega, options["search_radius"], options["grid_density"], options["flow_tol"], options["incoming_tol"]
    )
    row: list[Optional[ClassicalEntry]] = []
    for theta, flag in zip(thetas, flags_row):
        if flag == EntryFlag.DIAGONAL:
            row.append(None)
            continue
        try:
            solutions = find_all(
                system,
                omega,
                theta,
                options["search_radius"],
                options["grid_density"],
                options["tol"],
                flow_tol=options["flow_tol"],
                incoming_tol=options["incoming_tol"],
                scan=scan,
            )
        except ScatrelError as exc:
            logger.warning(f"Pair omega={omega.tolist()} theta={theta.tolist()} unresolved: {exc}")
            row.append(ClassicalEntry(EntryFlag.DEGENERATE))
            continue
        if not solutions:
            row.append(ClassicalEntry(EntryFlag.SHADOW))
            continue
        if any(s.degenerate for s in solutions):
            row.append(ClassicalEntry(EntryFlag.DEGENERATE))
            continue
        branches = []
        try:
            for s in solutions:
                s.action = action(system, s).value
                branches.append(Branch(s.sigma_hat, s.action, int(s.maslov), s.index))
        except ScatrelError as exc:
            logger.warning(f"Action failed at omega={omega.tolist()} theta={theta.tolist()}: {exc}")
            row.append(ClassicalEntry(EntryFlag.DEGENERATE))
            continue
        row.append(ClassicalEntry(EntryFlag.FILLED, tuple(branches)))
    return row


def synthesize(
    system: HamiltonianSystem,
    omega_grid,
    theta_grid,
    h_values: Sequence[float],
    *,
    search_radius: Optional[float] = None,
    grid_density: float = 20.0,
    tol: float = 1e-9,
    flow_tol: Tolerances = Tolerances(),
    incoming_tol: float = DEFAULT_INCOMING_TOL,
    diagonal_band: float = DIAGONAL_BAND,
    cache: Optional[ClassicalCache] = None,
    n_jobs: int = 1,
) -> AmplitudeGrid:
    """Semiclassical kernel on a direction grid for every h in h_values."""
    grid = AmplitudeGrid.empty(system.lam, h_values, omega_grid, theta_grid, "semiclassical", diagonal_band)
    if grid.dimension != system.dimension:
        raise DomainError(f"grid dimension {grid.dimension} does not match the system ({system.dimension})")
    cache = ClassicalCache() if cache is None else cache
    options = dict(
        search_radius=search_radius, grid_density=grid_density, tol=tol, flow_tol=flow_tol, incoming_tol=incoming_tol
    )

    pending = [
        iw
        for iw, w in enumerate(grid.omega_grid)
        if any(
            grid.flags[iw, it] != EntryFlag.DIAGONAL and cache.get(w, t) is None
            for it, t in enumerate(grid.theta_grid)
        )
    ]
    if n_jobs == 1:
        rows = [_classical_row(system, grid.omega_grid[iw], grid.theta_grid, grid.flags[iw], options) for iw in pending]
    else:
        rows = Parallel(n_jobs=n_jobs)(
            delayed(_classical_row)(system, grid.omega_grid[iw], grid.theta_grid, grid.flags[iw], options)
            for iw in pending
        )
    for iw, row in zip(pending, rows):
        for it, entry in enumerate(row):
            if entry is not None:
                cache.put(grid.omega_grid[iw], grid.theta_grid[it], entry)

    branch_table: dict[tuple[int, int], tuple[Branch, ...]] = {}
    for iw, w in enumerate(grid.omega_grid):
        for it, t in enumerate(grid.theta_grid):
            if grid.flags[iw, it] == EntryFlag.DIAGONAL:
                continue
            entry = cache.get(w, t)
            grid.flags[iw, it] = entry.flag
            if entry.flag == EntryFlag.FILLED:
                branch_table[(iw, it)] = entry.branches
                for ih, h in enumerate(grid.h_values):
                    grid.kernel[ih, iw, it] = kernel_value(entry.branches, h)
    grid.normalization.update(convention="leading-order", maslov_phase="exp(-i mu pi / 2)")
    grid.normalization["branches"] = branch_table
    counts = {f.value: int(np.sum(grid.flags == f)) for f in EntryFlag}
    logger.info(f"Synthesized {len(grid.h_values)} h-values over {grid.flags.size} pairs: {counts}")
    return grid


@dataclass(frozen=True)
class Calibration:
    constant: complex
    raw: complex
    eighth_turns: int
    residual: float
    snapped: bool


def calibrate(semiclassical: AmplitudeGrid, oracle: AmplitudeGrid, snap: bool = False) -> Calibration:
    """Global constant c with oracle ~ c * semiclassical, least squares at the largest h."""
    if semiclassical.kernel.shape != oracle.kernel.shape:
        raise DomainError("calibration needs grids of the same shape")
    mask = semiclassical.filled & oracle.filled
    if not mask.any():
        raise DomainError("no pair is filled in both grids")
    s = semiclassical.kernel[0][mask]
    o = oracle.kernel[0][mask]
    raw = complex(np.vdot(s, o) / np.vdot(s, s))
    j = int(np.round(np.angle(raw) / (0.25 * np.pi))) % 8
    constant = abs(raw) * np.exp(0.25j * np.pi * j) if snap else raw
    if snap and abs(np.angle(raw / constant)) > 0.05:
        logger.warning(f"Calibration phase {np.angle(raw):.4f} snapped to {j} eighth turns")
    residual = float(np.linalg.norm(o - constant * s) / max(np.linalg.norm(o), 1e-300))
    logger.info(f"Calibration constant {constant:.6g} (residual {residual:.3e})")
    return Calibration(complex(constant), raw, j, residual, snap)


@dataclass(frozen=True)
class Comparison:
    frame: pd.DataFrame
    slope: Optional[float]
    calibration: Calibration


def compare(semiclassical: AmplitudeGrid, oracle: AmplitudeGrid, calibration: Optional[Calibration] = None) -> Comparison:
    """Relative error of the calibrated semiclassical kernel per h."""
    calibration = calibrate(semiclassical, oracle) if calibration is None else calibration
    mask = semiclassical.filled & oracle.filled
    rows = []
    for ih, h in enumerate(semiclassical.h_values):
        s = calibration.constant * semiclassical.kernel[ih][mask]
        o = oracle.kernel[ih][mask]
        rel = np.abs(s - o) / np.maximum(np.abs(o), 1e-300)
        rows.append({"h": h, "max_error": float(rel.max()), "median_error": float(np.median(rel)), "pairs": int(mask.sum())})
    frame = pd.DataFrame(rows)
    slope = None
    if len(frame) >= 2 and np.all(frame["max_error"] > 0):
        slope = float(np.polyfit(np.log(frame["h"]), np.log(frame["max_error"]), 1)[0])
    return Comparison(frame, slope, calibration)


def interference_frequency(u, values, pad: int = 1) -> tuple[float, float]:
    """Angular frequency of the dominant oscillation of values over a uniform u grid, and the bin width."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(values, dtype=float)
    if u.size < 4 or u.size != v.size:
        raise DomainError("interference_frequency needs at least four matching samples")
    du = np.diff(u)
    if not np.allclose(du, du[0], rtol=1e-9, atol=0.0):
        raise DomainError("the u grid must be uniform")
    size = pad * u.size
    spectrum = np.abs(np.fft.rfft(v - v.mean(), n=size))
    freqs = 2.0 * np.pi * np.fft.rfftfreq(size, d=abs(du[0]))
    peak = int(np.argmax(spectrum[1:])) + 1
    return float(freqs[peak]), float(freqs[1])


@dataclass(frozen=True)
class BranchData:
    """One branch's classical action (and optionally amplitude data) on a direction grid."""

    actions: np.ndarray
    sigma_hat: Optional[np.ndarray] = None
    maslov: Optional[np.ndarray] = None

    @classmethod
    def from_grid(cls, grid: AmplitudeGrid, index: int = 0) -> "BranchData":
        table = grid.normalization.get("branches")
        if grid.source != "semiclassical" or table is None:
            raise DomainError("branch data comes from a synthesized semiclassical grid")
        shape = grid.flags.shape
        actions = np.full(shape, np.nan)
        sigma = np.full(shape, np.nan)
        maslov = np.zeros(shape, dtype=int)
        for (iw, it), branches in table.items():
            for b in branches:
                if b.index == index:
                    actions[iw, it], sigma[iw, it], maslov[iw, it] = b.action, b.sigma_hat, b.maslov
        return cls(actions, sigma, maslov)


@dataclass(frozen=True)
class FitReport:
    h_values: np.ndarray
    modulus_flatness: float
    phase_derivative: np.ndarray
    phase_slope: Optional[float]
    beating: np.ndarray
    pairs: int

    def to_dict(self) -> dict:
        return {
            "h_values": self.h_values.tolist(),
            "modulus_flatness": self.modulus_flatness,
            "phase_derivative": self.phase_derivative.tolist(),
            "phase_slope": self.phase_slope,
            "beating": self.beating.tolist(),
            "pairs": self.pairs,
        }


def _arc_steps(directions: np.ndarray) -> np.ndarray:
    chords = np.linalg.norm(np.diff(directions, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(2.0 * np.arcsin(np.clip(0.5 * chords, 0.0, 1.0)))])


def _beat(modulus: np.ndarray, coord: np.ndarray) -> float:
    """Relative residual of a cubic fit of the modulus along one grid line."""
    if modulus.size < 6:
        return 0.0
    fit = np.polyval(np.polyfit(coord, modulus, 3), coord)
    return float(np.max(np.abs(modulus - fit)) / max(np.mean(np.abs(modulus)), 1e-300))


def microlocal_fit(
    oracle_grid: AmplitudeGrid, branch: BranchData, beat_tolerance: float = BEAT_TOLERANCE
) -> FitReport:
    """Fit exp(-i S_l / h) K(h) on a single-branch patch: flat modulus, vanishing phase slope."""
    actions = np.asarray(branch.actions, dtype=float)
    if actions.shape != oracle_grid.flags.shape:
        raise DomainError(f"branch actions have shape {actions.shape}, grid is {oracle_grid.flags.shape}")
    mask = oracle_grid.filled & np.isfinite(actions)
    if mask.sum() < 2:
        raise DomainError("microlocal fit needs at least two filled pairs")
    theta_coord = _arc_steps(oracle_grid.theta_grid)
    omega_coord = _arc_steps(oracle_grid.omega_grid)
    hs = oracle_grid.h_values

    symbols = np.exp(-1j * np.where(mask, actions, 0.0)[None] / hs[:, None, None]) * oracle_grid.kernel
    modulus = np.abs(symbols)

    # flatness in h: linear fit of |a| against h per pair, relative leading drift
    flat = 0.0
    if hs.size >= 2:
        for iw, it in zip(*np.nonzero(mask)):
            m = modulus[:, iw, it]
            slope, icpt = np.polyfit(hs, m, 1)
            flat = max(flat, abs(slope) * hs[0] / max(abs(icpt), 1e-300))

    derivative = np.zeros(hs.size)
    beating = np.zeros(hs.size)
    for ih in range(hs.size):
        worst = 0.0
        for iw in range(mask.shape[0]):
            cols = np.nonzero(mask[iw])[0]
            if cols.size >= 2:
                phase = np.unwrap(np.angle(symbols[ih, iw, cols]))
                worst = max(worst, float(np.max(np.abs(np.gradient(phase, theta_coord[cols])))))
                beating[ih] = max(beating[ih], _beat(modulus[ih, iw, cols], theta_coord[cols]))
        for it in range(mask.shape[1]):
            rows = np.nonzero(mask[:, it])[0]
            if rows.size >= 2:
                phase = np.unwrap(np.angle(symbols[ih, rows, it]))
                worst = max(worst, float(np.max(np.abs(np.gradient(phase, omega_coord[rows])))))
                beating[ih] = max(beating[ih], _beat(modulus[ih, rows, it], omega_coord[rows]))
        derivative[ih] = worst

    if np.any(beating > beat_tolerance):
        bad = np.nonzero(beating > beat_tolerance)[0]
        raise PatchInvalidError(
            f"modulus beats on the patch (relative {beating.max():.3g}); more than one branch contributes",
            bad_region={"h": [float(hs[i]) for i in bad]},
        )
    slope = None
    if hs.size >= 2 and np.all(derivative > 1e-12):
        slope = float(np.polyfit(np.log(hs), np.log(derivative), 1)[0])
    logger.info(f"Microlocal fit: flatness {flat:.3e}, phase derivative {derivative.tolist()}")
    return FitReport(hs, float(flat), derivative, slope, beating, int(mask.sum()))
