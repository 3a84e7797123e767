import numpy as np
import pytest

from scatrel.core.charts import AngleChart, StereographicChart, chart_for, wrap_angle
from scatrel.core.errors import DomainError


def test_wrap_angle_range():
    wrapped = wrap_angle(np.array([-np.pi, 0.0, np.pi, 3 * np.pi, -7.0]))
    assert np.all(wrapped > -np.pi) and np.all(wrapped <= np.pi)
    assert wrapped[0] == pytest.approx(np.pi)


def test_angle_chart_round_trip_near_center():
    chart = AngleChart(center=3.0)
    u = np.array([[2.9], [3.2]])
    assert np.allclose(chart.from_sphere(chart.to_sphere(u)), u)


@pytest.mark.parametrize("sign", [1, -1])
def test_stereographic_chart_is_inverse_and_differentiable(sign):
    chart = StereographicChart(sign)
    u = np.array([0.3, -0.4])
    x = chart.to_sphere(u)
    assert np.linalg.norm(x) == pytest.approx(1.0)
    assert np.allclose(chart.from_sphere(x), u)
    step = 1e-6
    fd = np.column_stack([(chart.to_sphere(u + step * e) - chart.to_sphere(u - step * e)) / (2 * step) for e in np.eye(2)])
    assert np.allclose(chart.jacobian(u), fd, atol=1e-8)


def test_chart_for_picks_far_pole():
    assert isinstance(chart_for(np.array([0.0, 1.0])), AngleChart)
    north = chart_for(np.array([0.0, 0.0, 1.0]))
    assert north.sign == 1
    north.from_sphere(np.array([0.0, 0.0, 1.0]))
    with pytest.raises(DomainError):
        north.from_sphere(np.array([0.0, 0.0, -1.0]))
