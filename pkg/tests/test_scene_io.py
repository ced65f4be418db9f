"""Test scene bundles, image/depth/flow file formats and synthetic scenes"""

import numpy as np
import pytest

from constants import OutputNames
from particle_system import get_preset, sample_particles
from scene_io import (
    FlowField,
    SceneBundle,
    load_particles,
    load_scene,
    read_cameras,
    read_flo,
    read_pfm,
    read_ppm,
    save_particles,
    save_scene,
    synth_scene,
    write_flo,
    write_pfm,
    write_ppm,
)
from utils.validators import ContractError, ParseError


def test_scene_round_trip_is_bitwise(tmp_path, scene):
    """Test that save_scene then load_scene gives back the same bundle."""
    save_scene(tmp_path, scene)
    loaded = load_scene(tmp_path)
    for name in ("frame1", "frame2", "depth1", "depth2", "pose1", "pose2", "intrinsics"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(scene, name))


def test_relative_pose(scene):
    expected = scene.pose2 @ np.linalg.inv(scene.pose1)
    np.testing.assert_allclose(scene.relative_pose, expected)
    np.testing.assert_allclose(scene.relative_pose[:3, 3], (-0.05, 0.0, 0.0))


class TestPPM:
    def test_round_trip(self, tmp_path):
        image = np.round(np.random.default_rng(0).uniform(size=(5, 7, 3)) * 255) / 255
        write_ppm(tmp_path / "a.ppm", image)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), image)

    def test_header_comments(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
        image = read_ppm(path)
        assert image.shape == (1, 2, 3)
        np.testing.assert_array_equal(image[0, 0], (1.0, 0.0, 0.0))

    def test_ascii_variant_is_rejected(self, tmp_path):
        path = tmp_path / "p3.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ParseError, match="P3"):
            read_ppm(path)

    def test_truncated_raster_reports_offset(self, tmp_path):
        path = tmp_path / "t.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ParseError) as excinfo:
            read_ppm(path)
        assert excinfo.value.offset == len(b"P6\n2 2\n255\n") + 5
        assert "t.ppm" in str(excinfo.value)

    def test_other_maxval(self, tmp_path):
        path = tmp_path / "m.ppm"
        path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
        with pytest.raises(ParseError, match="maxval"):
            read_ppm(path)


class TestPFM:
    def test_round_trip_keeps_row_order(self, tmp_path):
        values = np.arange(12, dtype=np.float64).reshape(3, 4) + 1.0
        write_pfm(tmp_path / "d.pfm", values)
        np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), values)

    def test_big_endian(self, tmp_path):
        values = np.array([[1.0, 2.0], [3.0, 4.0]])
        path = tmp_path / "be.pfm"
        path.write_bytes(b"Pf\n2 2\n1.0\n" + np.flipud(values).astype(">f4").tobytes())
        np.testing.assert_array_equal(read_pfm(path), values)

    def test_color_pfm_is_rejected(self, tmp_path):
        path = tmp_path / "rgb.pfm"
        path.write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
        with pytest.raises(ParseError, match="magic"):
            read_pfm(path)

    def test_negative_depth_fails_scene_load(self, tmp_path, scene):
        save_scene(tmp_path, scene)
        depth = scene.depth1.copy()
        depth[4, 5] = -1.0
        write_pfm(tmp_path / OutputNames.DEPTH1, depth)
        with pytest.raises(ParseError, match="depth must be positive"):
            load_scene(tmp_path)


class TestCameras:
    def test_wrong_line_count(self, tmp_path):
        path = tmp_path / "cameras.txt"
        path.write_text("1 0 0 0 1 0 0 0 1\n")
        with pytest.raises(ParseError, match="3 non-empty lines"):
            read_cameras(path)

    def test_non_rigid_pose(self, tmp_path, scene):
        save_scene(tmp_path, scene)
        lines = (tmp_path / OutputNames.CAMERAS).read_text().splitlines()
        lines[1] = " ".join(["2.0", "0", "0", "0", "0", "1", "0", "0", "0", "0", "1", "0", "0", "0", "0", "1"])
        (tmp_path / OutputNames.CAMERAS).write_text("\n".join(lines) + "\n")
        with pytest.raises(ContractError, match="orthonormal"):
            load_scene(tmp_path)


class TestFlo:
    def test_round_trip(self, tmp_path):
        """Test a 3x2 field of (1.5, -0.25)."""
        flow = FlowField(np.tile([1.5, -0.25], (2, 3, 1)))
        write_flo(tmp_path / "f.flo", flow)
        loaded = read_flo(tmp_path / "f.flo")
        assert loaded.shape == (2, 3)
        np.testing.assert_array_equal(loaded.vectors, flow.vectors)

    def test_header_layout(self, tmp_path):
        write_flo(tmp_path / "f.flo", FlowField.zeros(2, 3))
        data = (tmp_path / "f.flo").read_bytes()
        assert data[:4] == b"PIEH"
        assert np.frombuffer(data[4:12], dtype="<i4").tolist() == [3, 2]
        assert len(data) == 12 + 3 * 2 * 2 * 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.flo"
        path.write_bytes(b"HEIP" + bytes(8))
        with pytest.raises(ParseError, match="magic"):
            read_flo(path)

    def test_empty_field(self, tmp_path):
        path = tmp_path / "empty.flo"
        path.write_bytes(b"PIEH" + np.array([0, 0], dtype="<i4").tobytes())
        with pytest.raises(ParseError, match="empty"):
            read_flo(path)


class TestSynthScene:
    def test_single_plane_translation_gives_uniform_flow(self):
        scene, flow = synth_scene(32, 24, texture_seed=0, camera_translation=(0.1, 0.0, 0.0), plane_depths=(4.0,))
        focal = scene.intrinsics[0, 0]
        np.testing.assert_allclose(flow.u, -focal * 0.1 / 4.0, atol=1e-9)
        np.testing.assert_allclose(flow.v, 0.0, atol=1e-9)

    def test_flow_matches_reprojection(self):
        scene, flow = synth_scene(40, 30, texture_seed=2, camera_translation=(0.05, 0.02, 0.1), plane_depths=(3.0, 7.0))
        ys, xs = np.mgrid[0:30, 0:40].astype(np.float64)
        rays = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ np.linalg.inv(scene.intrinsics).T
        points = rays * scene.depth1[..., None]
        moved = points @ scene.relative_pose[:3, :3].T + scene.relative_pose[:3, 3]
        projected = moved @ scene.intrinsics.T
        expected = projected[..., :2] / projected[..., 2:3] - np.stack([xs, ys], axis=-1)
        # depth1 is stored at float32 precision
        np.testing.assert_allclose(flow.vectors, expected, atol=1e-5)

    def test_near_plane_moves_more(self):
        scene, flow = synth_scene(48, 32, texture_seed=1, camera_translation=(0.1, 0.0, 0.0), plane_depths=(3.0, 8.0))
        magnitude = np.linalg.norm(flow.vectors, axis=-1)
        near = np.isclose(scene.depth1, 3.0, atol=1e-4)
        far = np.isclose(scene.depth1, 8.0, atol=1e-4)
        assert near.any() and far.any()
        assert magnitude[near].min() > magnitude[far].max()

    def test_too_small(self):
        with pytest.raises(ContractError):
            synth_scene(8, 8, 0, (0.1, 0.0, 0.0), (3.0,))

    def test_frames_are_quantized(self, scene):
        np.testing.assert_array_equal(np.round(scene.frame1 * 255) / 255, scene.frame1)


def test_mismatched_frames_are_rejected(scene):
    with pytest.raises(ContractError, match="frame sizes differ"):
        SceneBundle(
            scene.frame1, scene.frame2[:-1], scene.depth1, scene.depth2,
            scene.pose1, scene.pose2, scene.intrinsics,
        )


def test_particle_snapshot_round_trip(tmp_path, scene, small_weather):
    ps = sample_particles(scene, small_weather, seed=4)
    save_particles(tmp_path / "p.npz", ps)
    loaded = load_particles(tmp_path / "p.npz")
    assert loaded.config == ps.config
    assert loaded.seed == 4
    assert not loaded.expanded
    for name in ("positions", "motion", "color", "transparency", "template_index", "templates"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(ps, name))


def test_snapshot_keeps_preset_config(tmp_path, scene):
    ps = sample_particles(scene, get_preset("rain"), seed=0)
    save_particles(tmp_path / "rain.npz", ps)
    assert load_particles(tmp_path / "rain.npz").config == get_preset("rain")


def test_not_a_snapshot(tmp_path):
    path = tmp_path / "junk.npz"
    path.write_bytes(b"not a zip file")
    with pytest.raises(ParseError):
        load_particles(path)
