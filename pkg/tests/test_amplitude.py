import numpy as np
import pandas as pd
import pytest

from scatrel.core.amplitude import (
    AmplitudeGrid,
    Branch,
    BranchData,
    Calibration,
    ClassicalCache,
    EntryFlag,
    calibrate,
    classical_cross_section,
    compare,
    interference_frequency,
    kernel_value,
    microlocal_fit,
    synthesize,
)
from scatrel.core.errors import DomainError, PatchInvalidError

H_VALUES = [0.2, 0.1, 0.05, 0.025]


def _patch(omegas, thetas, source: str = "oracle") -> AmplitudeGrid:
    grid = AmplitudeGrid.empty(0.5, H_VALUES, omegas, thetas, source)
    grid.flags[grid.flags != EntryFlag.DIAGONAL] = EntryFlag.FILLED
    return grid


def _angles(grid: AmplitudeGrid) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.meshgrid(grid.angles("omega"), grid.angles("theta"), indexing="ij")
    return a, b


def test_single_branch_kernel():
    assert kernel_value([Branch(4.0, 0.0, 0)], 0.1) == pytest.approx(0.5)
    value = kernel_value([Branch(1.0, 0.3, 1)], 0.1)
    assert value == pytest.approx(np.exp(1j * (3.0 - 0.5 * np.pi)))
    assert classical_cross_section([Branch(4.0, 0.0, 0), Branch(-2.0, 1.0, 1)]) == pytest.approx(0.75)


def test_interference_frequency_finds_the_beat():
    u = np.linspace(0.0, 10.0, 200, endpoint=False)
    freq, width = interference_frequency(u, np.cos(3.0 * u))
    assert abs(freq - 3.0) <= width
    with pytest.raises(DomainError):
        interference_frequency(u[:3], u[:3])
    with pytest.raises(DomainError):
        interference_frequency(u**2, u)


def test_empty_grid_validation():
    with pytest.raises(DomainError):
        AmplitudeGrid.empty(0.5, [0.1, 0.2], [0.0], [1.0], "oracle")
    with pytest.raises(DomainError):
        AmplitudeGrid.empty(0.5, [0.1], [0.0], [1.0], "measured")
    with pytest.raises(DomainError):
        AmplitudeGrid.empty(0.5, [0.1], np.eye(2), np.eye(3), "oracle")
    grid = AmplitudeGrid.empty(0.5, [0.1], [0.0, 1.0], [0.0, 0.1, 1.0], "oracle")
    assert int(np.sum(grid.flags == EntryFlag.DIAGONAL)) == 3
    assert int(np.sum(grid.flags == EntryFlag.SHADOW)) == 3
    frame = grid.to_frame()
    assert list(frame.columns) == ["h", "omega", "theta", "re_K", "im_K", "flag"]
    assert len(frame) == 6


def test_calibration_recovers_constant_and_snaps():
    semi = _patch([0.0, 0.2], [1.0, 1.3, 1.6], "semiclassical")
    oracle = _patch([0.0, 0.2], [1.0, 1.3, 1.6])
    a, b = _angles(semi)
    c = 2.0 * np.exp(0.25j * np.pi)
    for ih, h in enumerate(H_VALUES):
        semi.kernel[ih] = np.exp(1j * np.cos(a - b) / h)
        oracle.kernel[ih] = c * semi.kernel[ih]
    plain = calibrate(semi, oracle)
    assert plain.constant == pytest.approx(c)
    assert plain.residual <= 1e-12
    snapped = calibrate(semi, oracle, snap=True)
    assert snapped.eighth_turns == 1
    assert snapped.constant == pytest.approx(c)


def test_comparison_slope_tracks_first_order_error():
    semi = _patch([0.0, 0.2], [1.0, 1.3, 1.6], "semiclassical")
    oracle = _patch([0.0, 0.2], [1.0, 1.3, 1.6])
    a, b = _angles(semi)
    for ih, h in enumerate(H_VALUES):
        semi.kernel[ih] = np.exp(1j * np.cos(a - b) / h)
        oracle.kernel[ih] = (1.0 + h) * semi.kernel[ih]
    result = compare(semi, oracle, Calibration(1.0 + 0j, 1.0 + 0j, 0, 0.0, False))
    assert isinstance(result.frame, pd.DataFrame)
    assert result.frame["pairs"].tolist() == [6] * len(H_VALUES)
    assert result.frame["max_error"].iloc[-1] == pytest.approx(0.025 / 1.025)
    assert 0.8 < result.slope < 1.05


def test_microlocal_fit_on_single_branch():
    grid = _patch(np.linspace(0.0, 0.3, 8), np.linspace(1.0, 1.5, 8))
    a, b = _angles(grid)
    actions = np.cos(a - b)
    for ih, h in enumerate(H_VALUES):
        grid.kernel[ih] = np.exp(1j * actions / h) * (2.0 + h * np.exp(1j * (a + b)))
    report = microlocal_fit(grid, BranchData(actions))
    assert report.pairs == 64
    assert report.modulus_flatness < 0.2
    assert np.all(np.diff(report.phase_derivative) < 0)
    assert 0.9 <= report.phase_slope <= 1.1
    assert report.to_dict()["pairs"] == 64


def test_microlocal_fit_rejects_beating_patch():
    grid = _patch(np.linspace(0.0, 0.3, 16), np.linspace(1.0, 1.5, 16))
    a, b = _angles(grid)
    actions = np.cos(a - b)
    for ih, h in enumerate(H_VALUES):
        grid.kernel[ih] = np.exp(1j * actions / h) * (1.0 + 0.5 * np.exp(10j * b / h))
    with pytest.raises(PatchInvalidError) as info:
        microlocal_fit(grid, BranchData(actions))
    assert info.value.bad_region["h"]


def test_branch_data_needs_semiclassical_grid():
    with pytest.raises(DomainError):
        BranchData.from_grid(_patch([0.0], [1.0]))


def test_synthesize_flags_and_reuses_cache(weak_gaussian):
    cache = ClassicalCache()
    grid = synthesize(
        weak_gaussian, [0.0], [0.0, 0.1, 1.0], [0.2, 0.1], search_radius=5.0, diagonal_band=0.05, cache=cache
    )
    assert grid.flags.tolist() == [[EntryFlag.DIAGONAL, EntryFlag.FILLED, EntryFlag.SHADOW]]
    branches = grid.normalization["branches"][(0, 1)]
    assert len(branches) == 2
    assert grid.kernel[1, 0, 1] == pytest.approx(kernel_value(branches, 0.1))
    data = BranchData.from_grid(grid, index=1)
    assert data.actions[0, 1] == branches[1].action
    misses = cache.misses
    again = synthesize(
        weak_gaussian, [0.0], [0.0, 0.1, 1.0], [0.2, 0.1], search_radius=5.0, diagonal_band=0.05, cache=cache
    )
    assert cache.misses == misses
    assert np.array_equal(again.kernel, grid.kernel)
