"""Test projection, soft occlusion, splatting, blending and the render backward pass"""

import csv
from dataclasses import replace

import numpy as np
import pytest

from config import THREADS_ENV_VAR, config
from gradcheck import GRADCHECK_BLUR_WEATHER, check_renderer, gradcheck_scene, place_particles
from particle_system import ParticleSet, WeatherConfig, expand_motion_blur, sample_particles
from renderer import (
    FootprintPlan,
    RenderParams,
    backward,
    project_particle,
    project_points,
    render,
    splat,
    visibility_map,
    write_debug_csv,
)
from scene_io import synth_scene
from template_lib import FootprintCache, Template, make_template
from utils.sampling import CompensatedAccumulator, bilinear_grid, bilinear_sample, pad_for_grid
from utils.validators import ContractError

STILL = WeatherConfig(count=1, base_size=9, depth_decay=3.0, transparency_base=0.5)


def single_particle(scene, x, y, depth, cfg=STILL, color=(1.0, 1.0, 1.0), transparency=0.5) -> ParticleSet:
    """One motionless particle whose frame-1 center projects to pixel (x, y)."""
    point = depth * (np.linalg.inv(scene.intrinsics) @ np.array([x, y, 1.0]))
    zeros = np.zeros((1, 3))
    return ParticleSet(
        config=cfg,
        seed=0,
        positions=point[None],
        motion=zeros,
        offset1=zeros,
        offset2=zeros,
        color=np.array([color]),
        transparency=np.array([transparency]),
        template_index=np.array([0]),
        parent=np.array([0]),
        blur_offset=np.zeros(1),
        templates=make_template(cfg.template_kind, cfg.base_size, 0).alpha[None],
        relative_pose=scene.relative_pose,
    )


class TestVisibility:
    def test_equal_depth_is_half(self):
        assert visibility_map(3.0, np.array([3.0]), 250.0)[0] == 0.5

    def test_hidden_at_render_sharpness(self):
        assert visibility_map(3.1, np.array([3.0]), 250.0)[0] <= 1e-10

    def test_soft_in_front(self):
        assert visibility_map(2.9, np.array([3.0]), 30.0)[0] == pytest.approx(0.9526, abs=1e-4)

    def test_no_overflow_far_behind(self):
        assert visibility_map(1e6, np.array([1.0]), 250.0)[0] == 0.0


class TestProjection:
    def test_vertical_offset_moves_pixel(self, scene):
        point = np.array([0.2, -0.1, 4.0])
        pixels, _ = project_points(np.stack([point, point + [0.0, 0.03, 0.0]]), scene.intrinsics)
        focal = scene.intrinsics[1, 1]
        np.testing.assert_allclose(pixels[1] - pixels[0], (0.0, focal * 0.03 / 4.0), atol=1e-12)

    def test_behind_camera_is_nan(self, scene):
        pixels, depths = project_points(np.array([[0.0, 0.0, -1.0]]), scene.intrinsics)
        assert np.all(np.isnan(pixels)) and depths[0] == -1.0

    def test_particle_on_the_optical_axis(self, scene):
        cx, cy = scene.intrinsics[0, 2], scene.intrinsics[1, 2]
        pixel1, _, d1, _ = project_particle(single_particle(scene, cx, cy, depth=4.0)[0], scene)
        np.testing.assert_allclose(pixel1, (cx, cy), atol=1e-12)
        assert d1 == pytest.approx(4.0)

    def test_offset_after_motion_shifts_only_frame2(self):
        still = gradcheck_scene(48, 32, seed=0, camera_translation=(0.0, 0.0, 0.0))
        ps = single_particle(still, 20.4, 12.6, depth=2.5)
        before = project_particle(ps[0], still)
        after = project_particle(ps.with_parameters(offset2=np.array([[0.0, 0.02, 0.0]]))[0], still)
        focal = still.intrinsics[1, 1]
        np.testing.assert_allclose(after[0], before[0], atol=1e-12)
        np.testing.assert_allclose(after[1] - before[1], (0.0, focal * 0.02 / 2.5), atol=1e-12)

    def test_camera_translation_reprojects(self, scene):
        """Test frame 2 against a camera moved 5 cm along x: points shift by -f t / z."""
        ps = single_particle(scene, 30.2, 10.7, depth=3.5)
        pixel1, pixel2, d1, d2 = project_particle(ps[0], scene)
        focal = scene.intrinsics[0, 0]
        np.testing.assert_allclose(pixel2 - pixel1, (-focal * 0.05 / 3.5, 0.0), atol=1e-12)
        assert d2 == pytest.approx(d1)

    def test_particle_agrees_with_the_batch(self, scene, placed):
        pixels1, depths1 = project_points(placed.frame1_points(), scene.intrinsics)
        pixels2, depths2 = project_points(placed.frame2_points(), scene.intrinsics)
        for j, particle in enumerate(placed):
            pixel1, pixel2, d1, d2 = project_particle(particle, scene)
            np.testing.assert_allclose(pixel1, pixels1[j], atol=1e-12)
            np.testing.assert_allclose(pixel2, pixels2[j], atol=1e-12)
            assert (d1, d2) == pytest.approx((depths1[j], depths2[j]))

    def test_particle_behind_the_camera(self, scene):
        ps = single_particle(scene, 24.0, 16.0, depth=2.0).with_parameters(offset1=np.array([[0.0, 0.0, -3.0]]))
        pixel1, pixel2, d1, _ = project_particle(ps[0], scene)
        assert pixel1 is None and pixel2 is None and d1 == pytest.approx(-1.0)


class TestDepthLookup:
    def test_grid_matches_pointwise_sampling(self):
        rng = np.random.default_rng(0)
        depth = rng.uniform(1.0, 5.0, (8, 10))
        frac = (0.3, 0.6)
        values, d_dx, d_dy = bilinear_grid(pad_for_grid(depth), (-1, -1), (9, 11), frac, derivatives=True)
        xs, ys = np.meshgrid(np.arange(-1, 10) + frac[1], np.arange(-1, 8) + frac[0])
        expected, expected_dx, expected_dy = bilinear_sample(depth, xs, ys)
        np.testing.assert_allclose(values, expected, atol=1e-12)
        np.testing.assert_allclose(d_dx, expected_dx, atol=1e-12)
        np.testing.assert_allclose(d_dy, expected_dy, atol=1e-12)

    def test_derivatives_only_on_request(self):
        _, d_dx, d_dy = bilinear_grid(pad_for_grid(np.ones((4, 4))), (0, 0), (2, 2), (0.5, 0.5))
        assert d_dx is None and d_dy is None

    def test_grid_must_stay_inside_the_border(self):
        with pytest.raises(ContractError, match="padded image"):
            bilinear_grid(pad_for_grid(np.ones((4, 4))), (-2, 0), (2, 2), (0.5, 0.5))


class TestSplat:
    def test_mass_is_conserved(self):
        template = make_template("dust", 9, 0)
        acc = splat(CompensatedAccumulator((32, 48)), template, (20.3, 14.6))
        assert acc.value().sum() == pytest.approx(template.mass(), abs=1e-9)

    def test_integer_center_copies_template(self):
        template = make_template("flake", 9, 2)
        acc = splat(CompensatedAccumulator((32, 48)), template, (20.0, 14.0))
        np.testing.assert_array_equal(acc.value()[10:19, 16:25], template.alpha)
        assert acc.value().sum() == pytest.approx(template.mass())

    def test_clipped_at_border(self):
        template = Template(np.ones((5, 5)))
        acc = splat(CompensatedAccumulator((10, 10)), template, (0.0, 0.0))
        assert acc.value().sum() == pytest.approx(9.0)

    def test_entirely_outside(self):
        acc = splat(CompensatedAccumulator((10, 10)), Template(np.ones((3, 3))), (50.0, 50.0))
        assert not np.any(acc.value())


class TestRender:
    def test_additive_only_brightens(self, scene, sampled):
        out = render(scene, sampled, RenderParams.rendering("additive"))
        assert np.all(out.aug1 >= scene.frame1) and np.all(out.aug2 >= scene.frame2)
        assert np.any(out.aug1 > scene.frame1)

    @pytest.mark.parametrize("blend", ["additive", "meshkin"])
    def test_output_is_clamped(self, scene, sampled, blend):
        bright = sampled.with_parameters(transparency=np.full(len(sampled), 5.0))
        out = render(scene, bright, RenderParams.rendering(blend))
        for image in (out.aug1, out.aug2):
            assert image.min() >= 0.0 and image.max() <= 1.0

    def test_meshkin_black_particles_darken(self, scene, sampled):
        black = sampled.with_parameters(color=np.zeros((len(sampled), 3)))
        out = render(scene, black, RenderParams.rendering("meshkin"))
        assert np.all(out.aug1 <= scene.frame1 + 1e-15)
        assert np.any(out.aug1 < scene.frame1)

    @pytest.mark.parametrize("blend", ["additive", "meshkin"])
    def test_permutations_agree(self, scene, placed, blend):
        """Test that the particle list order never changes the images."""
        params = RenderParams.differentiating(blend)
        reference = render(scene, placed, params)
        rng = np.random.default_rng(0)
        for _ in range(10):
            shuffled = render(scene, placed.permuted(rng.permutation(len(placed))), params)
            assert np.max(np.abs(shuffled.aug1 - reference.aug1)) <= 1e-12
            assert np.max(np.abs(shuffled.aug2 - reference.aug2)) <= 1e-12

    def test_worker_count_does_not_change_images(self, scene, placed, monkeypatch):
        monkeypatch.setitem(config._config, "render_chunk_size", 3)
        params = RenderParams.rendering("meshkin")
        monkeypatch.setenv(THREADS_ENV_VAR, "1")
        single = render(scene, placed, params)
        monkeypatch.setenv(THREADS_ENV_VAR, "4")
        threaded = render(scene, placed, params)
        np.testing.assert_array_equal(single.aug1, threaded.aug1)
        np.testing.assert_array_equal(single.aug2, threaded.aug2)

    def test_occluded_particle_changes_nothing(self, scene):
        """Test a particle 10 cm behind the near plane at render sharpness."""
        ps = single_particle(scene, 24.3, 16.4, depth=3.1)
        out = render(scene, ps, RenderParams.rendering("additive"))
        assert np.max(np.abs(out.aug1 - scene.frame1)) <= 1e-3
        assert np.max(np.abs(out.aug2 - scene.frame2)) <= 1e-3

    def test_visible_particle_changes_pixels(self, scene):
        ps = single_particle(scene, 24.3, 16.4, depth=2.9)
        out = render(scene, ps, RenderParams.rendering("additive"))
        assert np.max(np.abs(out.aug1 - scene.frame1)) > 1e-2

    def test_particle_behind_camera_is_invisible(self, scene):
        ps = single_particle(scene, 24.0, 16.0, depth=-1.0)
        out = render(scene, ps, RenderParams.rendering("meshkin"))
        np.testing.assert_array_equal(out.aug1, scene.frame1)
        plan = FootprintPlan.for_particles(ps)
        assert plan.keys1[0].tolist() == [-1, -1]

    def test_motion_blur_conserves_mass(self, scene):
        """Test that 20 coincident replicas render like their parent."""
        cfg = WeatherConfig(
            count=6, base_size=9, depth_decay=3.0, transparency_base=0.3,
            blur_enabled=True, blur_length=0.15, blur_particles=20,
        )
        ps = sample_particles(scene, cfg, seed=2)
        expanded = expand_motion_blur(ps)
        assert len(expanded) == 120
        params = RenderParams.rendering("additive")
        whole, split = render(scene, ps, params), render(scene, expanded, params)
        np.testing.assert_allclose(split.aug1, whole.aug1, atol=1e-9)
        np.testing.assert_allclose(split.aug2, whole.aug2, atol=1e-9)

    def test_plan_length_mismatch(self, scene, placed):
        plan = FootprintPlan.for_particles(placed)
        with pytest.raises(ContractError, match="footprint plan"):
            render(scene, placed.permuted(np.arange(5)), RenderParams.rendering("additive"), plan)

    def test_particles_from_another_camera_motion(self, scene, placed):
        other, _ = synth_scene(48, 32, 0, (0.2, 0.0, 0.0), (3.0, 6.0))
        with pytest.raises(ContractError, match="camera motion"):
            render(other, placed, RenderParams.rendering("additive"))

    def test_render_params_validation(self):
        with pytest.raises(ContractError):
            RenderParams(beta=0.0)
        with pytest.raises(ContractError):
            RenderParams(beta=30.0, blend="screen")


class TestFootprintReuse:
    def test_shared_cache_reproduces_images(self, scene, placed):
        params = RenderParams.differentiating("meshkin")
        cache = FootprintCache(placed.templates)
        first = render(scene, placed, params, cache=cache)
        misses = cache.misses
        second = render(scene, placed, params, cache=cache)
        assert cache.misses == misses and cache.hits > 0
        fresh = render(scene, placed, params)
        for out in (second, fresh):
            np.testing.assert_array_equal(out.aug1, first.aug1)
            np.testing.assert_array_equal(out.aug2, first.aug2)

    def test_cache_of_another_library(self, scene, placed):
        other = FootprintCache(placed.templates[:1] * 0.5)
        with pytest.raises(ContractError, match="template library"):
            render(scene, placed, RenderParams.rendering("additive"), cache=other)

    def test_backward_reuses_forward_footprints(self, scene, placed):
        cache = FootprintCache(placed.templates)
        out = render(scene, placed, RenderParams.differentiating("additive"), cache=cache)
        misses = cache.misses
        ones = np.ones_like(scene.frame1)
        backward(out.tape, ones, ones)
        assert cache.misses == misses


class TestBackward:
    def test_needs_differentiate_mode(self, scene, placed):
        tape = render(scene, placed, RenderParams.rendering("additive")).tape
        ones = np.ones_like(scene.frame1)
        with pytest.raises(ContractError, match="differentiate"):
            backward(tape, ones, ones)

    def test_gradient_shape_mismatch(self, scene, placed):
        tape = render(scene, placed, RenderParams.differentiating("additive")).tape
        with pytest.raises(ContractError, match="gradient image"):
            backward(tape, np.ones((4, 4, 3)), np.ones_like(scene.frame1))

    def test_gradients_are_indexed_by_parent(self, scene, placed):
        """Test that gradients land on each particle's parent id whatever the list order."""
        params = RenderParams.differentiating("meshkin")
        rng = np.random.default_rng(3)
        weights = rng.normal(size=scene.frame1.shape), rng.normal(size=scene.frame1.shape)
        direct = backward(render(scene, placed, params).tape, *weights)
        shuffled = backward(render(scene, placed.permuted(rng.permutation(len(placed))), params).tape, *weights)
        np.testing.assert_array_equal(shuffled.color, direct.color)
        np.testing.assert_array_equal(shuffled.offset2, direct.offset2)
        assert np.any(direct.color)

    def test_hidden_particle_still_has_position_gradient(self, scene):
        """Test that the soft occlusion at beta=30 carries signal for a particle hidden at beta=250."""
        ps = single_particle(scene, 24.3, 16.4, depth=3.1)
        out = render(scene, ps, RenderParams.differentiating("additive"))
        ones = np.ones_like(scene.frame1)
        grads = backward(out.tape, ones, ones)
        assert abs(grads.offset1[0, 2]) > 0.0

    def test_matches_finite_differences(self, scene, placed):
        results = check_renderer(scene, placed, seed=0)
        assert len(results) == 8
        failures = [r for r in results if not r.passed]
        assert not failures, failures

    def test_blur_replicas_match_finite_differences(self):
        """Test the replica chain rule on a still camera with replicas whole pixels apart."""
        still = gradcheck_scene(48, 32, seed=0, camera_translation=(0.0, 0.0, 0.0))
        blurred = place_particles(still, 6, seed=2, cfg=GRADCHECK_BLUR_WEATHER)
        results = check_renderer(still, blurred, seed=0)
        assert results and all(r.name.startswith("render+blur/") for r in results)
        failures = [r for r in results if not r.passed]
        assert not failures, failures

    def test_blur_replicas_sum_into_parents(self, scene):
        cfg = WeatherConfig(
            count=4, base_size=9, depth_decay=3.0, transparency_base=0.2, motion_y=0.05,
            blur_enabled=True, blur_length=0.15, blur_particles=5,
        )
        ps = sample_particles(scene, cfg, seed=5)
        out = render(scene, expand_motion_blur(ps), RenderParams.differentiating("additive"))
        grads = backward(out.tape, np.ones_like(scene.frame1), np.ones_like(scene.frame1))
        assert grads.offset1.shape == (4, 3) and grads.transparency.shape == (4,)


def test_debug_csv(tmp_path, scene, sampled):
    path = tmp_path / "particles.csv"
    write_debug_csv(path, scene, sampled, RenderParams.rendering("additive"))
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["id", "p1_x", "p1_y", "p2_x", "p2_y", "d1", "d2", "mean_v1", "mean_v2"]
    assert len(rows) == len(sampled) + 1
    assert float(rows[1][5]) == pytest.approx(sampled.depth1[0])


def test_replace_keeps_sets_renderable(scene, sampled):
    moved = replace(sampled, offset1=np.full((len(sampled), 3), 0.01))
    out = render(scene, moved, RenderParams.rendering("additive"))
    assert out.aug1.shape == scene.frame1.shape
