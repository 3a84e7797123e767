import numpy as np
import pytest

from scatrel.core.amplitude import EntryFlag
from scatrel.core.asymptotics import unit_vector
from scatrel.core.errors import DiagonalExcludedError, DomainError
from scatrel.core.oracle import (
    OracleAccuracyWarning,
    amplitude,
    amplitude_grid,
    born_amplitude,
    born_phase_shifts,
    optical_check,
    phase_shifts,
)
from scatrel.core.potential import PotentialModel

LAM = 0.5


def _gaussian(amplitude_: float, dimension: int = 2) -> PotentialModel:
    return PotentialModel("gaussian", {"amplitude": amplitude_, "width": 1.0}, dimension=dimension)


@pytest.fixture(scope="module")
def weak_waves():
    return phase_shifts(_gaussian(0.1), LAM, 0.1)


def test_free_phase_shifts_vanish():
    waves = phase_shifts(PotentialModel("zero"), LAM, 0.1)
    assert np.all(waves.phase_shifts == 0.0)
    assert amplitude(waves, unit_vector(0.0), unit_vector(1.0)) == 0.0
    assert optical_check(waves).defect == 0.0


def test_series_ends_below_tail_threshold(weak_waves):
    assert not weak_waves.truncated
    assert np.all(np.abs(weak_waves.phase_shifts[-3:]) < weak_waves.tail_threshold)
    assert weak_waves.lmax >= 3
    # repulsive potential pushes every phase shift negative
    assert np.all(weak_waves.phase_shifts[:3] < 0)


def test_optical_theorem_two_dimensions(weak_waves):
    report = optical_check(weak_waves)
    assert report.cross_section > 0
    assert report.defect <= 1e-8


def test_optical_theorem_three_dimensions():
    waves = phase_shifts(_gaussian(0.1, dimension=3), LAM, 0.2)
    assert optical_check(waves).defect <= 1e-8


def test_reciprocity(weak_waves):
    omega, theta = unit_vector(0.3), unit_vector(1.4)
    forward = amplitude(weak_waves, omega, theta)
    reverse = amplitude(weak_waves, -theta, -omega)
    assert abs(forward - reverse) <= 1e-10 * abs(forward)


def test_forward_direction_is_excluded(weak_waves):
    with pytest.raises(DiagonalExcludedError):
        amplitude(weak_waves, unit_vector(0.7), unit_vector(0.7))


def test_born_limit():
    model = _gaussian(1e-3)
    waves = phase_shifts(model, LAM, 0.1)
    omega, theta = unit_vector(0.0), unit_vector(0.1)
    exact = amplitude(waves, omega, theta)
    born = born_amplitude(model, LAM, 0.1, omega, theta)
    assert abs(exact - born) <= 0.1 * abs(born)
    shifts = born_phase_shifts(model, LAM, 0.1, 4).phase_shifts
    assert np.allclose(shifts, waves.phase_shifts[:5], rtol=0.1, atol=1e-12)


def test_non_radial_potential_is_rejected():
    shifted = PotentialModel("gaussian", {"amplitude": 0.1, "width": 1.0}, center=[0.5, 0.0])
    with pytest.raises(DomainError):
        phase_shifts(shifted, LAM, 0.1)
    with pytest.raises(DomainError):
        phase_shifts(_gaussian(0.1), -1.0, 0.1)


def test_truncated_series_warns():
    waves = phase_shifts(_gaussian(0.1), LAM, 0.1, lmax=2)
    assert waves.truncated
    with pytest.warns(OracleAccuracyWarning):
        amplitude(waves, unit_vector(0.0), unit_vector(1.0))


def test_amplitude_grid_flags_the_diagonal():
    grid = amplitude_grid(PotentialModel("zero"), LAM, [0.2, 0.1], [0.0], [0.0, 0.5, 1.0])
    assert grid.source == "oracle"
    assert grid.flags.tolist() == [[EntryFlag.DIAGONAL, EntryFlag.FILLED, EntryFlag.FILLED]]
    assert np.all(grid.kernel == 0)
