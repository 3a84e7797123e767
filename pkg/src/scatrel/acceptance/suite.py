"""
Acceptance checks behind ``scatrel verify``.

Each check returns a result dict with its metrics, a pass flag and the
resource usage measured while it ran. ``quick`` selects reduced problem
sizes; thresholds stay the same unless a check says otherwise.
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from scatrel.acceptance.monitor import ResourceMonitor
from scatrel.api.commands import patch_from_config
from scatrel.api.models import RunConfig
from scatrel.core import amplitude as amp
from scatrel.core import oracle
from scatrel.core.action_wkb import (
    PhaseRegion,
    action,
    action_gradients,
    admissible_s,
    eikonal_residual,
    sample_region,
    wkb_phase,
)
from scatrel.core.asymptotics import orthonormal_frame, scatter, unit_vector
from scatrel.core.bvsolve import find_all
from scatrel.core.errors import ScatrelError
from scatrel.core.fio_test import SymbolSupport, order_test, synthetic_lagrangian_kernel, torus_angles
from scatrel.core.flow import HamiltonianSystem, symplectic_defect
from scatrel.core.potential import PotentialModel
from scatrel.core.relation import graph_sample, residual_convergence, sample
from scatrel.lifecycle import RunContext

logger = logging.getLogger(__name__)

Check = Callable[[RunConfig, RunContext], dict]


def _launch(angle: float, z: float):
    omega = unit_vector(angle)
    return omega, np.array([z]) @ orthonormal_frame(omega)


def check_energy(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    rng = np.random.default_rng(ctx.seed)
    count = 20 if ctx.quick else 100
    energy, symplectic, skipped = 0.0, 0.0, 0
    for angle, z in zip(rng.uniform(0.0, 2.0 * np.pi, count), rng.uniform(-3.0, 3.0, count)):
        omega, impact = _launch(angle, z)
        try:
            _, traj = scatter(system, omega, impact, cfg.tolerances.flow(), cfg.tolerances.incoming, variational=True)
        except ScatrelError as exc:
            logger.warning(f"Energy check skipped (angle {angle:.3f}, z {z:.3f}): {exc}")
            skipped += 1
            continue
        energy = max(energy, float(np.max(np.abs(traj.energy_error))) / (1.0 + system.lam))
        symplectic = max(symplectic, max(symplectic_defect(m) for m in traj.variational))
    return {
        "trajectories": count - skipped,
        "max_energy_error": energy,
        "max_symplectic_defect": symplectic,
        "passed": skipped == 0 and energy <= 1e-9 and symplectic <= 1e-7,
    }


def check_extraction(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    m = 6 if ctx.quick else 20
    tol = cfg.tolerances.flow()
    fine = tol.tightened(100.0)
    worst_ratio, worst_change = 0.0, 0.0
    for angle in np.linspace(*cfg.patch.omega_range, m):
        for z in np.linspace(*cfg.patch.z_range, m):
            omega, impact = _launch(angle, z)
            coarse_datum, _ = scatter(system, omega, impact, tol, cfg.tolerances.incoming)
            fine_datum, _ = scatter(system, omega, impact, fine, cfg.tolerances.incoming)
            change = max(
                float(np.max(np.abs(coarse_datum.xi_inf - fine_datum.xi_inf))),
                float(np.max(np.abs(coarse_datum.x_inf - fine_datum.x_inf))),
            )
            # absolute floor at the integrator tolerance for exact (compact) extraction
            allowed = 2.0 * max(coarse_datum.extraction_error, fine_datum.extraction_error) + 10.0 * tol.rtol
            worst_ratio = max(worst_ratio, change / allowed)
            worst_change = max(worst_change, change)
    return {"grid": m, "max_change": worst_change, "max_change_over_allowed": worst_ratio, "passed": worst_ratio <= 1.0}


def check_lagrangian(cfg: RunConfig, ctx: RunContext) -> dict:
    # radial relations are exactly Lagrangian; stretch the potential so the residual is pure discretization
    skewed = cfg.potential.model_copy(update={"aspect": [1.0, 1.3]})
    system = HamiltonianSystem(skewed.build(cfg.dimension, ctx.base_dir), cfg.lam)
    resolutions = [16, 32] if ctx.quick else [25, 50, 100]
    frame = residual_convergence(
        system, patch_from_config(cfg), resolutions, cfg.tolerances.flow(), cfg.tolerances.incoming, ctx.threads
    )
    ratio = float(frame["ratio"].iloc[-1])
    finest = float(frame["residual"].iloc[-1])
    bound = 1e-5 * (100.0 / resolutions[-1]) ** 2
    return {
        "resolutions": resolutions,
        "residuals": frame["residual"].tolist(),
        "last_ratio": ratio,
        "fitted_C": float(frame["fitted_C"].iloc[0]),
        "passed": ratio >= 3.5 and finest <= bound,
    }


def _solutions_on(system: HamiltonianSystem, cfg: RunConfig, omega_angle: float, theta_angle: float):
    tol = cfg.tolerances
    return find_all(
        system,
        unit_vector(omega_angle),
        unit_vector(theta_angle),
        cfg.solve.search_radius,
        cfg.solve.grid_density,
        tol.newton,
        flow_tol=tol.flow(),
        incoming_tol=tol.incoming,
    )


def check_gradients(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    m = 2 if ctx.quick else 5
    worst, count = 0.0, 0
    for wa in np.linspace(-0.1, 0.1, m):
        for ta in np.linspace(1.0, 1.4, m):
            for s in _solutions_on(system, cfg, wa, ta):
                if s.degenerate:
                    continue
                check = action_gradients(
                    system, s.omega, s.theta, s, cfg.action.fd_step, r_bar=cfg.action.r_bar, tol=cfg.tolerances.flow()
                )
                worst = max(worst, check.mismatch)
                count += 1
    return {"solutions": count, "max_relative_mismatch": worst, "passed": count > 0 and worst <= 1e-3}


def check_action(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    tol = cfg.tolerances.flow()
    target = 5 if ctx.quick else 25
    worst_form, worst_shell, used = 0.0, 0.0, 0
    for ta in np.linspace(np.deg2rad(40.0), np.deg2rad(160.0), target):
        for s in _solutions_on(system, cfg, 0.0, ta):
            if s.degenerate or used >= target:
                continue
            rec = action(system, s, r_bar=cfg.action.r_bar, tol=tol)
            lo, hi = admissible_s(system, s, cfg.action.r_bar, tol)
            values = [action(system, s, None, float(v), r_bar=cfg.action.r_bar, tol=tol).value for v in np.linspace(lo, hi, 5)[1:-1]]
            scale = 1.0 + abs(rec.value)
            worst_form = max(worst_form, rec.consistency / scale)
            worst_shell = max(worst_shell, float(np.ptp(values)) / scale)
            used += 1
    return {
        "solutions": used,
        "max_form_mismatch": worst_form,
        "max_s_spread": worst_shell,
        "passed": used == target and worst_form <= 1e-7 and worst_shell <= 1e-8,
    }


def check_eikonal(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    count = 20 if ctx.quick else 100
    a = cfg.action
    near = PhaseRegion(1, a.region_radius, a.region_band, a.region_sigma)
    far = PhaseRegion(1, 2.0 * a.region_radius, a.region_band, a.region_sigma)
    xs, xis = sample_region(near, count, ctx.seed, cfg.dimension)
    residual = max(abs(eikonal_residual(system, 1, x, xi)) for x, xi in zip(xs, xis))
    defect_near = float(np.max(wkb_phase(system, near, xs, xis, ctx.threads).mixed_defect))
    xs_far, xis_far = sample_region(far, count, ctx.seed, cfg.dimension)
    defect_far = float(np.max(wkb_phase(system, far, xs_far, xis_far, ctx.threads).mixed_defect))
    return {
        "samples": count,
        "max_eikonal_residual": residual,
        "mixed_defect_R0": defect_near,
        "mixed_defect_2R0": defect_far,
        "passed": residual <= 1e-6 and defect_far < defect_near,
    }


def _amplitude_pair(cfg: RunConfig, ctx: RunContext) -> tuple[amp.AmplitudeGrid, amp.AmplitudeGrid]:
    system = cfg.system(ctx.base_dir)
    thetas = np.linspace(*cfg.grid.theta_range, 5 if ctx.quick else cfg.grid.theta_count)
    omegas = cfg.grid.omegas()
    band = np.deg2rad(cfg.grid.diagonal_band_deg)
    sc = amp.synthesize(
        system,
        omegas,
        thetas,
        cfg.h_values,
        search_radius=cfg.solve.search_radius,
        grid_density=cfg.solve.grid_density,
        tol=cfg.tolerances.newton,
        flow_tol=cfg.tolerances.flow(),
        incoming_tol=cfg.tolerances.incoming,
        diagonal_band=band,
        n_jobs=ctx.threads,
    )
    reference = oracle.amplitude_grid(system.potential, cfg.lam, cfg.h_values, omegas, thetas, diagonal_band=band)
    return sc, reference


def check_semiclassical(cfg: RunConfig, ctx: RunContext) -> dict:
    sc, reference = _amplitude_pair(cfg, ctx)
    comparison = amp.compare(sc, reference)
    last = float(comparison.frame["max_error"].iloc[-1])
    slope = comparison.slope
    return {
        "errors": comparison.frame["max_error"].tolist(),
        "slope": slope,
        "error_at_smallest_h": last,
        "calibration": comparison.calibration.constant,
        "passed": slope is not None and 0.7 <= slope <= 1.3 and last <= 0.15,
    }


def check_microlocal(cfg: RunConfig, ctx: RunContext) -> dict:
    sc, reference = _amplitude_pair(cfg, ctx)
    fit = amp.microlocal_fit(reference, amp.BranchData.from_grid(sc, 0))
    slope = fit.phase_slope
    return {**fit.to_dict(), "passed": slope is not None and 0.7 <= slope <= 1.3}


def check_fio(cfg: RunConfig, ctx: RunContext) -> dict:
    n_synth = 256
    hs_synth = [0.2, 0.1, 0.05, 0.025]
    kernel = synthetic_lagrangian_kernel(
        lambda a, b: np.cos(a - b), lambda a, b: 2.0 + np.sin(a) * np.sin(b), n_synth, hs_synth, cfg.lam
    )
    box = SymbolSupport((0.5, 2.0), (2.5, 4.0))
    graph = graph_sample(
        lambda a, b: -np.sin(a - b),
        lambda a, b: np.sin(a - b),
        np.linspace(0.2, 2.3, 90),
        np.linspace(2.2, 4.3, 90),
        cfg.lam,
    )
    synthetic = order_test(kernel, graph, box)

    system = cfg.system(ctx.base_dir)
    resolution = 256 if ctx.quick else cfg.fio.resolution
    hs = cfg.h_values[:4] if ctx.quick else cfg.h_values
    angles = torus_angles(resolution)
    exact = oracle.amplitude_grid(
        system.potential, cfg.lam, hs, angles, angles, diagonal_band=np.deg2rad(cfg.grid.diagonal_band_deg)
    )
    relation = sample(
        system, patch_from_config(cfg), cfg.patch.resolution, cfg.tolerances.flow(), cfg.tolerances.incoming, ctx.threads
    )
    measured = order_test(
        exact, relation, SymbolSupport(cfg.fio.alpha_range, cfg.fio.beta_range), direction=cfg.fio.direction, margin=cfg.fio.margin
    )
    gain = measured.slope_gain
    return {
        "synthetic": synthetic.to_dict(),
        "oracle": measured.to_dict(),
        "passed": synthetic.passed and (measured.vacuous or (gain is not None and gain >= 0.5)),
    }


def check_oracle(cfg: RunConfig, ctx: RunContext) -> dict:
    model = cfg.potential.build(cfg.dimension, ctx.base_dir)
    hs = cfg.h_values[:2] if ctx.quick else cfg.h_values
    defects = []
    reciprocity = 0.0
    for h in hs:
        pw = oracle.phase_shifts(model, cfg.lam, h, tail_threshold=cfg.oracle.tail_threshold, n_jobs=ctx.threads)
        report = oracle.optical_check(pw)
        defects.append(report.defect)
        for wa, ta in ((0.0, 1.0), (0.3, 2.2), (-1.0, 0.4)):
            w, t = unit_vector(wa), unit_vector(ta)
            forward = oracle.amplitude(pw, w, t)
            backward = oracle.amplitude(pw, -t, -w)
            reciprocity = max(reciprocity, abs(forward - backward) / max(abs(forward), 1e-300))

    born_errors = {}
    h = cfg.h_values[0]
    w, t = unit_vector(0.0), unit_vector(1.0)
    for strength in (1e-3, 1e-2):
        weak = PotentialModel("gaussian", {"amplitude": strength, "width": 1.0}, dimension=cfg.dimension)
        exact = oracle.amplitude(oracle.phase_shifts(weak, cfg.lam, h), w, t)
        born = oracle.born_amplitude(weak, cfg.lam, h, w, t)
        born_errors[strength] = abs(exact - born) / abs(born)
    growth = born_errors[1e-2] / max(born_errors[1e-3], 1e-300)
    return {
        "optical_defects": defects,
        "reciprocity": reciprocity,
        "born_relative_errors": {str(k): v for k, v in born_errors.items()},
        "born_error_growth": growth,
        "passed": max(defects) <= 1e-8 and reciprocity <= 1e-10 and 5.0 <= growth <= 20.0,
    }


CHECKS: list[tuple[str, Check, float]] = [
    ("energy_symplectic", check_energy, 60.0),
    ("asymptotic_extraction", check_extraction, 120.0),
    ("lagrangian_residual", check_lagrangian, 300.0),
    ("action_gradients", check_gradients, 180.0),
    ("action_consistency", check_action, 120.0),
    ("eikonal", check_eikonal, 120.0),
    ("semiclassical_vs_oracle", check_semiclassical, 600.0),
    ("microlocal_symbol", check_microlocal, 300.0),
    ("fio_order_gain", check_fio, 600.0),
    ("oracle_integrity", check_oracle, 180.0),
]


def run_suite(cfg: RunConfig, ctx: RunContext, only: list[str] | None = None) -> dict:
    results = []
    for name, check, budget in CHECKS:
        if only is not None and name not in only:
            continue
        logger.info(f"Acceptance check '{name}' started")
        monitor = ResourceMonitor()
        monitor.start()
        try:
            result = check(cfg, ctx)
        except ScatrelError as exc:
            logger.error(f"Acceptance check '{name}' raised {type(exc).__name__}: {exc}")
            result = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
        usage = monitor.stop()
        result = {"name": name, **result, "usage": usage.to_dict(), "budget_seconds": budget}
        result["within_budget"] = usage.seconds <= budget
        logger.info(f"Acceptance check '{name}': {'PASS' if result['passed'] else 'FAIL'} in {usage.seconds:.1f}s")
        results.append(result)
    passed = all(r["passed"] for r in results)
    return {"quick": ctx.quick, "checks": results, "passed": passed}
