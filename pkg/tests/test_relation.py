import numpy as np
import pytest

from scatrel.core.errors import DiagonalExcludedError, DomainError, GeometryError, PatchInvalidError
from scatrel.core.flow import HamiltonianSystem
from scatrel.core.potential import PotentialModel
from scatrel.core.relation import Patch, graph_sample, lagrangian_residual, residual_convergence, sample


def _cosine_graph(m: int = 30):
    return graph_sample(
        lambda a, b: -np.sin(a - b),
        lambda a, b: np.sin(a - b),
        np.linspace(0.0, 1.0, m),
        np.linspace(1.5, 2.5, m),
    )


def test_exact_graph_is_lagrangian():
    assert lagrangian_residual(_cosine_graph()) <= 1e-10


def test_untwisted_graph_is_not_lagrangian():
    assert lagrangian_residual(_cosine_graph().flipped()) > 0.1


def test_patch_must_be_nonempty():
    with pytest.raises(DomainError):
        Patch((0.2, 0.2), (0.5, 1.5))


def test_gaussian_patch(weak_gaussian):
    rel = sample(weak_gaussian, Patch((0.0, 0.1), (0.5, 1.5)), 8)
    assert rel.shape == (8, 8)
    assert np.nanmax(rel.extraction_error) < 1e-7
    assert not rel.on_diagonal.any()
    frame = rel.to_frame()
    assert len(frame) == 64
    assert {"base1_1", "cov1_1", "base2_1", "cov2_1", "extraction_error"} <= set(frame.columns)


def test_free_relation_lies_on_diagonal(free_system):
    rel = sample(free_system, Patch((0.0, 0.1), (0.5, 1.5)), 4)
    assert rel.on_diagonal.all()
    assert np.allclose(rel.base1, rel.base2)
    with pytest.raises(DiagonalExcludedError):
        lagrangian_residual(rel)


def test_attractive_patch_past_the_horizon_is_invalid():
    well = HamiltonianSystem(PotentialModel("gaussian", {"amplitude": -1.0, "width": 1.0}), 0.5)
    with pytest.raises(PatchInvalidError) as info:
        sample(well, Patch((0.0, 0.1), (0.5, 1.5)), 4, t_max=0.5)
    assert info.value.bad_region == {"omega": (0.0, 0.1), "z": (0.5, 1.5)}


def test_collapsed_parametrization():
    flat = graph_sample(lambda a, b: 0 * a, lambda a, b: 0 * a, np.linspace(0, 1, 5), np.zeros(5) + 1.0)
    flat.params2 = np.linspace(0, 1, 5)
    with pytest.raises(GeometryError):
        lagrangian_residual(flat)


@pytest.mark.slow
def test_residual_converges_at_second_order():
    model = PotentialModel("gaussian", {"amplitude": 0.3, "width": 1.0}, aspect=[1.0, 1.3])
    system = HamiltonianSystem(model, 0.5)
    frame = residual_convergence(system, Patch((-0.3, 0.3), (0.4, 1.6)), [12, 24])
    assert frame["ratio"].iloc[-1] >= 3.0
    assert frame["fitted_C"].iloc[0] > 0
