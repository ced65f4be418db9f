"""Test endpoint errors and the flow color coding"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metrics import MetricReport, aee, compare, epe_map, flow_to_color, make_colorwheel
from scene_io import FlowField
from utils.validators import ContractError


def random_flow(seed: int, height: int = 4, width: int = 4, scale: float = 3.0) -> FlowField:
    return FlowField(np.random.default_rng(seed).normal(scale=scale, size=(height, width, 2)))


class TestAEE:
    def test_uniform_offset(self):
        shifted = FlowField(np.tile([3.0, 4.0], (6, 5, 1)))
        assert aee(shifted, FlowField.zeros(6, 5)) == 5.0

    def test_matches_a_plain_loop(self):
        f, g = random_flow(0), random_flow(1)
        total = 0.0
        for y in range(4):
            for x in range(4):
                du = f.vectors[y, x, 0] - g.vectors[y, x, 0]
                dv = f.vectors[y, x, 1] - g.vectors[y, x, 1]
                total += (du ** 2 + dv ** 2) ** 0.5
        assert aee(f, g) == pytest.approx(total / 16, rel=1e-12)

    def test_epe_map_shape(self):
        assert epe_map(random_flow(0, 3, 7), random_flow(1, 3, 7)).shape == (3, 7)

    def test_size_mismatch(self):
        with pytest.raises(ContractError, match="differ in size"):
            aee(FlowField.zeros(3, 4), FlowField.zeros(4, 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 2**16), st.integers(0, 2**16))
def test_aee_is_a_pseudometric(a, b, c):
    f, g, h = random_flow(a), random_flow(b), random_flow(c)
    assert aee(f, f) == 0.0
    assert aee(f, g) == pytest.approx(aee(g, f), rel=1e-12)
    assert aee(f, h) <= aee(f, g) + aee(g, h) + 1e-12


class TestColorWheel:
    def test_wheel(self):
        wheel = make_colorwheel()
        assert wheel.shape == (55, 3)
        assert wheel.min() >= 0.0 and wheel.max() <= 1.0
        np.testing.assert_array_equal(wheel[0], (1.0, 0.0, 0.0))

    def test_zero_flow_is_white(self):
        image, radius = flow_to_color(FlowField.zeros(3, 4))
        assert radius == 0.0
        np.testing.assert_array_equal(image, np.ones((3, 4, 3)))

    def test_scaled_flow_shares_colors(self):
        """Test that f and 2f map to the same image under per-image normalization."""
        f = random_flow(2, 8, 9)
        image, radius = flow_to_color(f)
        doubled, doubled_radius = flow_to_color(FlowField(2.0 * f.vectors))
        assert doubled_radius == pytest.approx(2.0 * radius)
        np.testing.assert_allclose(doubled, image, atol=1e-12)

    def test_fixed_radius_desaturates(self):
        f = random_flow(3, 5, 5)
        own, radius = flow_to_color(f)
        wide, used = flow_to_color(f, max_radius=10.0 * radius)
        assert used == pytest.approx(10.0 * radius)
        assert wide.mean() > own.mean()

    def test_opposite_directions_differ(self):
        image, _ = flow_to_color(FlowField(np.array([[[1.0, 0.0], [-1.0, 0.0]]])))
        assert not np.allclose(image[0, 0], image[0, 1])


class TestCompare:
    def test_report(self):
        benign = FlowField.zeros(4, 5)
        attacked = FlowField(np.tile([3.0, 4.0], (4, 5, 1)))
        report = compare(benign, attacked)
        assert report.robustness_aee == 5.0 and report.epe_max == 5.0
        assert report.aee == 5.0
        assert report.visualization_radius == 5.0

    def test_explicit_target(self):
        attacked = FlowField(np.tile([3.0, 4.0], (4, 5, 1)))
        report = compare(FlowField.zeros(4, 5), attacked, target=attacked)
        assert report.aee == 0.0

    def test_report_rejects_bad_values(self):
        with pytest.raises(ContractError):
            MetricReport(aee=float("nan"), robustness_aee=0.0, epe_max=0.0, visualization_radius=0.0)
