"""Test the Horn-Schunck victim, its linear building blocks and its reverse-mode pass"""

import logging

import numpy as np
import pytest

from constants import OutputNames
from gradcheck import GRADCHECK_FLOW, check_victim, gradcheck_scene
from scene_io import FlowField, synth_scene, write_flo
from utils.sampling import bilinear_sample, bilinear_scatter
from utils.validators import ContractError
from victim_flow import (
    FlowEstimatorConfig,
    _iterate,
    _Level,
    central_gradients,
    central_gradients_adjoint,
    downsample_matrix,
    estimate_flow,
    estimate_flow_recorded,
    external_flow_source,
    flow_backward,
    neighbor_average,
    neighbor_average_adjoint,
    upsample_matrix,
)


def _inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * b))


class TestLinearBlocks:
    """Test that each hand-written adjoint is the transpose of its forward map."""

    def test_neighbor_average(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(7, 9)), rng.normal(size=(7, 9))
        assert _inner(neighbor_average(x), y) == pytest.approx(_inner(x, neighbor_average_adjoint(y)), rel=1e-12)

    def test_central_gradients(self):
        rng = np.random.default_rng(1)
        x, gx, gy = rng.normal(size=(6, 5)), rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        dx, dy = central_gradients(x)
        assert _inner(dx, gx) + _inner(dy, gy) == pytest.approx(
            _inner(x, central_gradients_adjoint(gx, gy)), rel=1e-12
        )

    def test_bilinear_scatter(self):
        rng = np.random.default_rng(2)
        image = rng.normal(size=(8, 10))
        xs, ys = rng.uniform(-2.0, 11.0, size=(5, 6)), rng.uniform(-2.0, 9.0, size=(5, 6))
        weights = rng.normal(size=(5, 6))
        values, _, _ = bilinear_sample(image, xs, ys)
        scattered = bilinear_scatter(image.shape, xs, ys, weights)
        assert _inner(values, weights) == pytest.approx(_inner(image, scattered), rel=1e-12)

    @pytest.mark.parametrize("size", [8, 9, 15])
    def test_resampling_rows_sum_to_one(self, size):
        np.testing.assert_allclose(downsample_matrix(size).sum(axis=1), 1.0)
        np.testing.assert_allclose(upsample_matrix((size + 1) // 2, size).sum(axis=1), 1.0)

    def test_constant_survives_resampling(self):
        coarse = np.full((4, 5), 0.3)
        fine = upsample_matrix(4, 8) @ coarse @ upsample_matrix(5, 9).T
        np.testing.assert_allclose(fine, 0.3)


class TestEstimateFlow:
    def test_identical_frames_give_zero_flow(self, scene):
        flow = estimate_flow(scene.frame1, scene.frame1)
        assert flow.shape == (scene.height, scene.width)
        assert not np.any(flow.vectors)

    def test_recovers_uniform_translation(self):
        """Test a textured plane shifted by two pixels."""
        scene, truth = synth_scene(64, 48, texture_seed=3, camera_translation=(-0.125, 0.0, 0.0), plane_depths=(4.0,))
        np.testing.assert_allclose(truth.u, 2.0, atol=1e-9)
        flow = estimate_flow(scene.frame1, scene.frame2, FlowEstimatorConfig(iterations_per_level=300))
        interior = flow.vectors[6:-6, 6:-6]
        assert np.mean(interior[..., 0]) == pytest.approx(2.0, abs=0.5)
        assert np.mean(interior[..., 1]) == pytest.approx(0.0, abs=0.5)

    def test_deterministic(self, scene):
        a = estimate_flow(scene.frame1, scene.frame2, GRADCHECK_FLOW)
        b = estimate_flow(scene.frame1, scene.frame2, GRADCHECK_FLOW)
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_recorded_matches_plain(self, scene):
        plain = estimate_flow(scene.frame1, scene.frame2, GRADCHECK_FLOW)
        recorded, tape = estimate_flow_recorded(scene.frame1, scene.frame2, GRADCHECK_FLOW)
        np.testing.assert_array_equal(plain.vectors, recorded.vectors)
        assert len(tape.levels) == 2

    def test_smoothing_acts_on_the_increment(self):
        """Test that a textureless level adds nothing, however rough the flow carried up to it."""
        rng = np.random.default_rng(0)
        zeros = np.zeros((12, 16))
        level = _Level(
            gray1=zeros, gray2=zeros, init_flow=rng.normal(size=(12, 16, 2)),
            warp_x=zeros, warp_y=zeros, warp_dx=zeros, warp_dy=zeros,
            ix=zeros, iy=zeros, it=rng.normal(size=(12, 16)),
        )
        increment = _iterate(level, smoothness=0.1, iterations=50, record=False)
        np.testing.assert_array_equal(increment, 0.0)

    def test_size_mismatch(self, scene):
        with pytest.raises(ContractError, match="differ in size"):
            estimate_flow(scene.frame1, scene.frame2[:-2])

    def test_pyramid_is_clamped_for_small_images(self, caplog):
        cfg = FlowEstimatorConfig(pyramid_levels=3)
        with caplog.at_level(logging.WARNING, logger="victim_flow"):
            assert cfg.levels_for(20, 20) == 2
        assert "pyramid levels" in caplog.text

    @pytest.mark.parametrize("kwargs", [
        {"smoothness": 0.0}, {"pyramid_levels": 0}, {"iterations_per_level": 0}, {"downscale_factor": 0.7},
    ])
    def test_config_validation(self, kwargs):
        with pytest.raises(ContractError):
            FlowEstimatorConfig(**kwargs)


class TestFlowBackward:
    def test_matches_finite_differences(self):
        """Test 10 random pixels per image on a 32x24 pair."""
        scene = gradcheck_scene(32, 24, seed=4)
        results = check_victim(scene, seed=4, cfg=GRADCHECK_FLOW, k=10)
        assert [r.name for r in results] == ["victim/I1", "victim/I2"]
        failures = [r for r in results if not r.passed]
        assert not failures, failures

    def test_directional_derivatives(self, scene):
        rng = np.random.default_rng(5)
        weights = rng.normal(size=(scene.height, scene.width, 2))
        _, tape = estimate_flow_recorded(scene.frame1, scene.frame2, GRADCHECK_FLOW)
        grad1, grad2 = flow_backward(tape, weights)

        def objective(image1, image2):
            return float(np.sum(weights * estimate_flow(image1, image2, GRADCHECK_FLOW).vectors))

        step = 1e-6
        for _ in range(3):
            v1, v2 = rng.normal(size=scene.frame1.shape), rng.normal(size=scene.frame1.shape)
            numeric = (
                objective(scene.frame1 + step * v1, scene.frame2 + step * v2)
                - objective(scene.frame1 - step * v1, scene.frame2 - step * v2)
            ) / (2 * step)
            analytic = _inner(grad1, v1) + _inner(grad2, v2)
            assert analytic == pytest.approx(numeric, rel=1e-3, abs=1e-8)

    def test_gradient_shape_mismatch(self, scene):
        _, tape = estimate_flow_recorded(scene.frame1, scene.frame2, GRADCHECK_FLOW)
        with pytest.raises(ContractError, match="flow gradient"):
            flow_backward(tape, np.zeros((4, 4, 2)))


class TestExternalFlows:
    def test_loads_both(self, tmp_path):
        write_flo(tmp_path / OutputNames.BENIGN_FLOW, FlowField.zeros(3, 4))
        write_flo(tmp_path / OutputNames.ATTACKED_FLOW, FlowField(np.ones((3, 4, 2))))
        benign, attacked = external_flow_source(tmp_path)
        assert benign.shape == attacked.shape == (3, 4)

    def test_missing_file(self, tmp_path):
        write_flo(tmp_path / OutputNames.BENIGN_FLOW, FlowField.zeros(3, 4))
        with pytest.raises(ContractError, match="missing attacked.flo"):
            external_flow_source(tmp_path)

    def test_size_mismatch(self, tmp_path):
        write_flo(tmp_path / OutputNames.BENIGN_FLOW, FlowField.zeros(3, 4))
        write_flo(tmp_path / OutputNames.ATTACKED_FLOW, FlowField.zeros(4, 4))
        with pytest.raises(ContractError, match="sizes differ"):
            external_flow_source(tmp_path)
