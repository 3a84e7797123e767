import numpy as np
import pytest

from scatrel.core.errors import DomainError, RejectedTrajectoryError
from scatrel.core.flow import (
    NON_TRAPPED,
    TRAPPED,
    UNDECIDED,
    HamiltonianSystem,
    Tolerances,
    classify,
    integrate,
    symplectic_defect,
)
from scatrel.core.potential import PotentialModel


def test_free_flight_is_linear(free_system):
    z = np.array([0.0, 2.0])
    p0 = free_system.k * np.array([1.0, 0.0])
    times = np.linspace(-5.0, 5.0, 11)
    traj = integrate(free_system, (z, p0), (-5.0, 5.0), t_eval=times)
    expected = z + np.outer(times, p0)
    assert np.allclose(traj.q, expected, atol=1e-10)
    assert np.allclose(traj.p, p0)


def test_energy_and_symplectic_structure(weak_gaussian):
    q0 = np.array([-20.0, 0.7])
    p0 = weak_gaussian.shell_momentum(q0, [1.0, 0.0])
    traj = integrate(weak_gaussian, (q0, p0), (0.0, 50.0))
    assert traj.energy_drift <= 1e-9
    assert np.max(np.abs(traj.energy_error)) / 1.5 <= 1e-9
    assert max(symplectic_defect(m) for m in traj.variational) <= 1e-7


def test_tighter_tolerance_agrees(weak_gaussian):
    q0 = np.array([-20.0, 0.7])
    p0 = weak_gaussian.shell_momentum(q0, [1.0, 0.0])
    loose = integrate(weak_gaussian, (q0, p0), (0.0, 50.0), variational=False)
    tight = integrate(weak_gaussian, (q0, p0), (0.0, 50.0), Tolerances().tightened(100.0), variational=False)
    assert np.allclose(loose.q[-1], tight.q[-1], atol=1e-8)


def test_radial_flow_conserves_angular_momentum(weak_gaussian):
    q0 = np.array([-15.0, 1.1])
    p0 = weak_gaussian.shell_momentum(q0, [1.0, 0.0])
    traj = integrate(weak_gaussian, (q0, p0), (0.0, 30.0), variational=False)
    ang = traj.q[:, 0] * traj.p[:, 1] - traj.q[:, 1] * traj.p[:, 0]
    assert np.max(np.abs(ang - ang[0])) <= 1e-9


def test_to_frame_columns(free_system):
    traj = integrate(free_system, ([0.0, 1.0], [1.0, 0.0]), (0.0, 1.0), variational=False)
    assert list(traj.to_frame().columns) == ["t", "q1", "q2", "p1", "p2", "energy_error"]


def test_degenerate_span_rejected(free_system):
    with pytest.raises(DomainError):
        integrate(free_system, ([0.0, 0.0], [1.0, 0.0]), (1.0, 1.0))


def test_energy_drift_rejection(weak_gaussian):
    loose = Tolerances(rtol=1e-3, atol=1e-3, energy=1e-14)
    q0 = np.array([-5.0, 0.3])
    p0 = weak_gaussian.shell_momentum(q0, [1.0, 0.0])
    with pytest.raises(RejectedTrajectoryError) as info:
        integrate(weak_gaussian, (q0, p0), (0.0, 10.0), loose, variational=False)
    assert info.value.drift > 1e-13


def test_free_escape_time(free_system):
    z = np.array([0.0, 1.0])
    p0 = np.array([1.0, 0.0])
    result = classify(free_system, (z, p0), r=3.0, t_max=100.0)
    assert result.kind == NON_TRAPPED
    assert result.t_escape == pytest.approx(np.sqrt(3.0**2 - 1.0), abs=1e-6)


def test_repulsive_gaussian_never_traps(weak_gaussian):
    rng = np.random.default_rng(3)
    for _ in range(10):
        q0 = rng.uniform(-2.0, 2.0, 2)
        angle = rng.uniform(0.0, 2 * np.pi)
        p0 = weak_gaussian.shell_momentum(q0, [np.cos(angle), np.sin(angle)])
        assert classify(weak_gaussian, (q0, p0), r=4.0, t_max=200.0).kind == NON_TRAPPED


def test_circular_orbit_in_attractive_well_is_trapped():
    model = PotentialModel("gaussian", {"amplitude": -1.0, "width": 1.0})
    r0 = 1.7
    # circular orbit p^2 / r0 = |V'(r0)|; sqrt(2) < r0 < 2 keeps lambda positive and the orbit stable
    speed = np.sqrt(r0 * abs(model.grad([r0, 0.0])[0]))
    lam = 0.5 * speed**2 + model.value([r0, 0.0])
    system = HamiltonianSystem(model, lam)
    result = classify(system, ([r0, 0.0], [0.0, speed]), r=3.0, t_max=60.0)
    assert result.kind == TRAPPED
    assert result.t_escape is None


def test_unfinished_escape_is_undecided(free_system):
    result = classify(free_system, ([0.0, 0.0], [1.0, 0.0]), r=5.0, t_max=1.0)
    assert result.kind == UNDECIDED
    assert result.t_escape is None


def test_flow_is_time_reversible(weak_gaussian):
    q0 = np.array([-5.0, 0.3])
    p0 = weak_gaussian.shell_momentum(q0, [1.0, 0.2])
    forward = integrate(weak_gaussian, (q0, p0), (0.0, 10.0), variational=False)
    back = integrate(weak_gaussian, (forward.q[-1], -forward.p[-1]), (0.0, 10.0), variational=False)
    assert np.allclose(back.q[-1], q0, atol=1e-7)
    assert np.allclose(back.p[-1], -p0, atol=1e-7)
