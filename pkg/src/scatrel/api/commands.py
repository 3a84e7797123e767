"""
Subcommand handlers. Each takes the validated RunConfig and the RunContext,
writes its artifacts and returns a JSON-ready summary.
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np
import pandas as pd

from scatrel.api.export import write_csv, write_json, write_plot
from scatrel.api.models import RunConfig, direction_vector
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
    xi_gradient_check,
)
from scatrel.core.asymptotics import orthonormal_frame, scatter, sweep
from scatrel.core.bvsolve import find_all, nondegeneracy_report, reciprocal_check
from scatrel.core.errors import DomainError, PatchInvalidError, ScatrelError
from scatrel.core.fio_test import SymbolSupport, order_test, torus_angles
from scatrel.core.flow import symplectic_defect
from scatrel.core.relation import Patch, lagrangian_residual, residual_convergence, sample
from scatrel.lifecycle import RunContext, timed

logger = logging.getLogger(__name__)


def _impact(cfg: RunConfig, omega: np.ndarray) -> np.ndarray:
    coords = np.atleast_1d(np.asarray(cfg.trajectory.z, dtype=float))
    if coords.size != cfg.dimension - 1:
        raise DomainError(f"trajectory.z needs {cfg.dimension - 1} frame coordinate(s)")
    return coords @ orthonormal_frame(omega)


def patch_from_config(cfg: RunConfig) -> Patch:
    p = cfg.patch
    base = tuple(p.omega_base) if p.omega_base is not None else None
    return Patch(p.omega_range, p.z_range, p.omega_axis, p.z_axis, base, p.z_fixed)


def _grid_directions(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.dimension != 2:
        raise DomainError("angular grids in the configuration are n = 2 angles")
    return cfg.grid.omegas(), cfg.grid.thetas()


def run_trajectory(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    tol = cfg.tolerances
    omega = direction_vector(cfg.trajectory.omega, cfg.dimension)
    z = _impact(cfg, omega)
    datum, traj = scatter(
        system, omega, z, tol.flow(), tol.incoming, variational=cfg.trajectory.variational, t_max=cfg.trajectory.t_max
    )
    paths = [write_csv(traj.to_frame(), ctx.path("trajectory.csv"), ctx.config_hash)]
    summary = {
        "omega": omega,
        "z": datum.z,
        "xi_inf": datum.xi_inf,
        "x_inf": datum.x_inf,
        "classification": datum.classification,
        "extraction_error": datum.extraction_error,
        "energy_drift": traj.energy_drift,
        "principal_type_violations": len(system.principal_type_violations()),
    }
    if traj.variational is not None:
        summary["symplectic_defect"] = max(symplectic_defect(m) for m in traj.variational)
    paths.append(write_json(summary, ctx.path("trajectory.json"), ctx.config_hash, "trajectory"))
    if cfg.trajectory.sweep:
        m = cfg.trajectory.sweep_resolution
        omegas = np.linspace(*cfg.patch.omega_range, m)
        impacts = np.linspace(*cfg.patch.z_range, m)
        table = sweep(system, omegas, impacts, tol.flow(), tol.incoming, ctx.threads)
        paths.append(write_csv(table, ctx.path("sweep.csv"), ctx.config_hash))
    summary["artifacts"] = [str(p) for p in paths]
    return summary


def run_relation(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    tol = cfg.tolerances
    patch = patch_from_config(cfg)
    with timed("relation sample"):
        rel = sample(
            system, patch, cfg.patch.resolution, tol.flow(), tol.incoming, ctx.threads, t_max=cfg.trajectory.t_max
        )
    residual = lagrangian_residual(rel)
    paths = [write_csv(rel.to_frame(), ctx.path("relation.csv"), ctx.config_hash)]
    convergence = residual_convergence(system, patch, cfg.patch.resolutions, tol.flow(), tol.incoming, ctx.threads)
    paths.append(write_csv(convergence, ctx.path("relation_convergence.csv"), ctx.config_hash))
    summary = {
        "shape": list(rel.shape),
        "lagrangian_residual": residual,
        "max_extraction_error": float(np.nanmax(rel.extraction_error)),
        "convergence": convergence.to_dict(orient="list"),
    }
    paths.append(write_json(summary, ctx.path("relation.json"), ctx.config_hash, "relation"))
    if ctx.plot:
        write_plot(
            ctx.path("relation_convergence.png"),
            convergence["step"],
            {"residual": convergence["residual"]},
            xlabel="grid step",
            ylabel="relative pullback residual",
        )
    summary["artifacts"] = [str(p) for p in paths]
    return summary


def _solutions(cfg: RunConfig, ctx: RunContext, system):
    omega = direction_vector(cfg.solve.omega, cfg.dimension)
    theta = direction_vector(cfg.solve.theta, cfg.dimension)
    tol = cfg.tolerances
    solutions = find_all(
        system,
        omega,
        theta,
        cfg.solve.search_radius,
        cfg.solve.grid_density,
        tol.newton,
        flow_tol=tol.flow(),
        incoming_tol=tol.incoming,
        n_jobs=ctx.threads,
    )
    return omega, theta, solutions


def run_solve(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    omega, theta, solutions = _solutions(cfg, ctx, system)
    for s in solutions:
        if not s.degenerate:
            try:
                s.action = action(system, s, tol=cfg.tolerances.flow()).value
            except ScatrelError as exc:
                logger.warning(f"Action for solution {s.index} unavailable: {exc}")
    report = nondegeneracy_report(solutions)
    rows = [s.to_dict() for s in solutions]
    reciprocity = []
    for s in solutions:
        r = reciprocal_check(system, s, cfg.tolerances.flow(), cfg.tolerances.incoming)
        reciprocity.append({"index": s.index, "direction_error": r.direction_error, "impact_error": r.impact_error})
    summary = {
        "omega": omega,
        "theta": theta,
        "count": len(solutions),
        "solutions": rows,
        "regular": report.regular,
        "min_abs_sigma": report.min_abs_sigma,
        "caustic_indices": list(report.caustic_indices),
        "reciprocity": reciprocity,
    }
    frame = pd.DataFrame(
        [
            {
                "index": s.index,
                **{f"z_{i + 1}": float(v) for i, v in enumerate(s.z)},
                **{f"w_{i + 1}": float(v) for i, v in enumerate(s.w)},
                "sigma_hat": s.sigma_hat,
                "maslov": s.maslov,
                "S": s.action,
                "condition": s.condition,
                "degenerate": s.degenerate,
            }
            for s in solutions
        ]
    )
    paths = [
        write_csv(frame, ctx.path("solutions.csv"), ctx.config_hash),
        write_json(summary, ctx.path("solutions.json"), ctx.config_hash, "solve"),
    ]
    summary["artifacts"] = [str(p) for p in paths]
    return summary


def run_action(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    omega, theta, solutions = _solutions(cfg, ctx, system)
    acfg, tol = cfg.action, cfg.tolerances.flow()
    records = []
    for s in solutions:
        if s.degenerate:
            records.append({"index": s.index, "degenerate": True})
            continue
        rec = action(system, s, acfg.t0, acfg.s, r_bar=acfg.r_bar, tol=tol)
        lo, hi = admissible_s(system, s, acfg.r_bar, tol)
        spread = [action(system, s, None, float(v), r_bar=acfg.r_bar, tol=tol).value for v in np.linspace(lo, hi, 5)[1:-1]]
        grad = action_gradients(system, omega, theta, s, acfg.fd_step, r_bar=acfg.r_bar, tol=tol)
        offset = xi_gradient_check(system, s)
        records.append(
            {
                "index": s.index,
                **rec.to_dict(),
                "s_spread": float(np.ptp(spread)),
                "gradient_mismatch_omega": grad.mismatch_omega,
                "gradient_mismatch_theta": grad.mismatch_theta,
                "d_omega_S": grad.d_omega,
                "d_theta_S": grad.d_theta,
                "offset_defects": list(offset.defects),
                "offset_converging": offset.converging,
            }
        )
    summary: dict = {"omega": omega, "theta": theta, "records": records}
    if acfg.wkb_samples > 0:
        region = PhaseRegion(1, acfg.region_radius, acfg.region_band, acfg.region_sigma)
        xs, xis = sample_region(region, acfg.wkb_samples, ctx.seed, cfg.dimension)
        phase = wkb_phase(system, region, xs, xis, ctx.threads)
        residuals = [abs(eikonal_residual(system, 1, x, xi)) for x, xi in zip(xs, xis)]
        summary["wkb"] = {
            "max_eikonal_residual": float(max(residuals)),
            "max_mixed_defect": float(np.max(phase.mixed_defect)),
            "a0_range": [float(np.min(phase.a0)), float(np.max(phase.a0))],
        }
    paths = [write_json(summary, ctx.path("action.json"), ctx.config_hash, "action")]
    summary["artifacts"] = [str(p) for p in paths]
    return summary


def run_amplitude(cfg: RunConfig, ctx: RunContext) -> dict:
    system = cfg.system(ctx.base_dir)
    omegas, thetas = _grid_directions(cfg)
    band = np.deg2rad(cfg.grid.diagonal_band_deg)
    tol = cfg.tolerances
    with timed("semiclassical synthesis"):
        sc = amp.synthesize(
            system,
            omegas,
            thetas,
            cfg.h_values,
            search_radius=cfg.solve.search_radius,
            grid_density=cfg.solve.grid_density,
            tol=tol.newton,
            flow_tol=tol.flow(),
            incoming_tol=tol.incoming,
            diagonal_band=band,
            n_jobs=ctx.threads,
        )
    paths = [write_csv(sc.to_frame(), ctx.path("amplitude.csv"), ctx.config_hash)]
    report: dict = {"flags": {f.value: int(np.sum(sc.flags == f)) for f in amp.EntryFlag}}
    if system.potential.is_radial:
        reference = oracle.amplitude_grid(
            system.potential, cfg.lam, cfg.h_values, omegas, thetas, diagonal_band=band, n_jobs=ctx.threads
        )
        comparison = amp.compare(sc, reference)
        report["calibration"] = {
            "constant": comparison.calibration.constant,
            "raw": comparison.calibration.raw,
            "eighth_turns": comparison.calibration.eighth_turns,
            "residual": comparison.calibration.residual,
        }
        report["comparison"] = comparison.frame.to_dict(orient="list")
        report["error_slope"] = comparison.slope
        try:
            fit = amp.microlocal_fit(reference, amp.BranchData.from_grid(sc, 0))
            report["microlocal_fit"] = fit.to_dict()
        except PatchInvalidError as exc:
            logger.warning(f"Microlocal fit rejected the patch: {exc}")
            report["microlocal_fit"] = {"patch_invalid": str(exc), "bad_region": exc.bad_region}
        if ctx.plot:
            write_plot(
                ctx.path("amplitude_error.png"),
                comparison.frame["h"],
                {"max relative error": comparison.frame["max_error"]},
                xlabel="h",
                ylabel="relative error",
            )
    paths.append(write_json(report, ctx.path("amplitude_report.json"), ctx.config_hash, "amplitude"))
    report["artifacts"] = [str(p) for p in paths]
    return report


def run_oracle(cfg: RunConfig, ctx: RunContext) -> dict:
    model = cfg.potential.build(cfg.dimension, ctx.base_dir)
    ocfg = cfg.oracle
    rows, optical = [], []
    for h in cfg.h_values:
        pw = oracle.phase_shifts(model, cfg.lam, h, ocfg.lmax, tail_threshold=ocfg.tail_threshold, n_jobs=ctx.threads)
        rows.extend({"h": h, "l": ell, "delta": float(d)} for ell, d in enumerate(pw.phase_shifts))
        check = oracle.optical_check(pw)
        optical.append(
            {
                "h": h,
                "lmax": pw.lmax,
                "defect": check.defect,
                "tail_responsible": check.tail_responsible,
                "cross_section": check.cross_section,
            }
        )
    paths = [write_csv(pd.DataFrame(rows), ctx.path("phase_shifts.csv"), ctx.config_hash)]
    summary: dict = {"optical": optical}
    if cfg.dimension == 2:
        omegas, thetas = _grid_directions(cfg)
        grid = oracle.amplitude_grid(
            model, cfg.lam, cfg.h_values, omegas, thetas, diagonal_band=np.deg2rad(cfg.grid.diagonal_band_deg)
        )
        paths.append(write_csv(grid.to_frame(), ctx.path("oracle_amplitude.csv"), ctx.config_hash))
        if ocfg.born:
            h = cfg.h_values[0]
            pw = oracle.phase_shifts(model, cfg.lam, h, ocfg.lmax, tail_threshold=ocfg.tail_threshold)
            w = direction_vector(float(omegas[0]), 2)
            born = []
            for t in thetas:
                tv = direction_vector(float(t), 2)
                if amp.separation(w, tv) < 1e-9:
                    continue
                exact = oracle.amplitude(pw, w, tv)
                approx = oracle.born_amplitude(model, cfg.lam, h, w, tv)
                born.append({"theta": float(t), "exact": exact, "born": approx, "ratio": exact / approx if approx else None})
            summary["born"] = born
    paths.append(write_json(summary, ctx.path("oracle.json"), ctx.config_hash, "oracle"))
    summary["artifacts"] = [str(p) for p in paths]
    return summary


def run_fio_test(cfg: RunConfig, ctx: RunContext) -> dict:
    if cfg.dimension != 2:
        raise DomainError("fio-test runs on the torus (dimension 2)")
    system = cfg.system(ctx.base_dir)
    fcfg = cfg.fio
    angles = torus_angles(fcfg.resolution)
    with timed("oracle kernel on the torus"):
        kernel = oracle.amplitude_grid(
            system.potential, cfg.lam, cfg.h_values, angles, angles, diagonal_band=np.deg2rad(cfg.grid.diagonal_band_deg)
        )
    rel = sample(system, patch_from_config(cfg), cfg.patch.resolution, cfg.tolerances.flow(), cfg.tolerances.incoming, ctx.threads)
    support = SymbolSupport(fcfg.alpha_range, fcfg.beta_range)
    report = order_test(kernel, rel, support, 1, direction=fcfg.direction, margin=fcfg.margin)
    summary = report.to_dict()
    paths = [write_json(summary, ctx.path("fio_test.json"), ctx.config_hash, "fio-test")]
    if ctx.plot and not report.vacuous:
        write_plot(
            ctx.path("fio_test.png"),
            report.h_values,
            {"vanishing cutoff": report.norms_cut, "control": report.norms_control},
            xlabel="h",
            ylabel="L2 norm",
        )
    summary["artifacts"] = [str(p) for p in paths]
    return summary


def run_verify(cfg: RunConfig, ctx: RunContext) -> dict:
    from scatrel.acceptance.suite import run_suite

    summary = run_suite(cfg, ctx)
    summary["resolved_config"] = cfg.model_dump(mode="json", by_alias=True)
    path = write_json(summary, ctx.path("verify.json"), ctx.config_hash, "verify")
    summary["artifacts"] = [str(path)]
    return summary


COMMANDS: dict[str, Callable[[RunConfig, RunContext], dict]] = {
    "trajectory": run_trajectory,
    "relation": run_relation,
    "solve": run_solve,
    "action": run_action,
    "amplitude": run_amplitude,
    "oracle": run_oracle,
    "fio-test": run_fio_test,
    "verify": run_verify,
}
