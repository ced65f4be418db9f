"""Test particle templates, depth scaling and defocus blur"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from template_lib import (
    FootprintCache,
    Template,
    defocus_blur,
    defocus_radius,
    disk_kernel,
    footprint,
    footprint_key,
    footprint_keys,
    footprint_size,
    footprint_window,
    make_template,
    round_to_odd,
    scale_by_depth,
    scaled_side,
)
from utils.validators import ContractError


@pytest.mark.parametrize("value, expected", [(3, 3), (4, 5), (5.9, 5), (6, 7), (71, 71), (2.0, 3)])
def test_round_to_odd(value, expected):
    assert round_to_odd(value) == expected


class TestMakeTemplate:
    @pytest.mark.parametrize("kind", ["flake", "dust"])
    def test_shape_and_peak(self, kind):
        t = make_template(kind, 41, seed=0)
        assert t.shape == (41, 41)
        assert t.alpha[20, 20] == pytest.approx(1.0)
        assert t.alpha.min() >= 0.0 and t.alpha.max() <= 1.0

    def test_even_size_rounds_up(self):
        assert make_template("dust", 10, seed=0).shape == (11, 11)

    def test_same_seed_same_template(self):
        np.testing.assert_array_equal(make_template("flake", 21, 5).alpha, make_template("flake", 21, 5).alpha)

    def test_six_fold_symmetry(self):
        """Test that rotating a flake by 60 degrees reproduces it."""
        t = make_template("flake", 41, seed=0, angle=0.3)
        rotated = make_template("flake", 41, seed=0, angle=0.3 + np.pi / 3)
        assert np.max(np.abs(t.alpha - rotated.alpha)) < 1e-2

    def test_unknown_kind(self):
        with pytest.raises(ContractError, match="unknown template kind"):
            make_template("hail", 11, 0)

    def test_too_small(self):
        with pytest.raises(ContractError):
            make_template("dust", 1, 0)

    def test_even_sides_are_rejected(self):
        with pytest.raises(ContractError, match="odd"):
            Template(np.ones((4, 5)))


class TestScaling:
    def test_side_follows_inverse_depth(self):
        assert scaled_side(71, depth=9.0, depth_decay=9.0) == 71
        assert scaled_side(71, depth=18.0, depth_decay=9.0) == 35
        assert scaled_side(71, depth=1000.0, depth_decay=9.0) == 3

    def test_scale_preserves_center(self):
        t = make_template("dust", 41, 0)
        scaled = scale_by_depth(t, 41, depth=0.5, depth_decay=1.0)
        assert scaled.shape == (83, 83)
        assert scaled.alpha[41, 41] == pytest.approx(1.0)

    def test_identity_scale_returns_same_template(self):
        t = make_template("dust", 21, 0)
        assert scale_by_depth(t, 21, depth=3.0, depth_decay=3.0) is t

    def test_non_positive_depth(self):
        with pytest.raises(ContractError):
            scale_by_depth(make_template("dust", 21, 0), 21, depth=0.0, depth_decay=3.0)


class TestDefocus:
    def test_radius_law(self):
        assert defocus_radius(9.0, 9.0) == 1.0
        assert defocus_radius(0.5, 9.0) == 4.0
        assert defocus_radius(100.0, 9.0) == pytest.approx(0.09)

    def test_kernel_is_normalized_disk(self):
        kernel = disk_kernel(2.0)
        assert kernel.shape == (5, 5)
        assert kernel.sum() == pytest.approx(1.0)
        assert kernel[0, 0] == 0.0 and kernel[0, 2] > 0.0

    def test_small_radius_is_identity(self):
        t = make_template("flake", 11, 0)
        assert defocus_blur(t, 0.0) is t
        assert defocus_blur(t, 0.9) is t

    def test_mass_is_preserved(self):
        t = Template(np.random.default_rng(0).uniform(size=(15, 15)))
        blurred = defocus_blur(t, 3.0)
        assert blurred.shape == (21, 21)
        assert blurred.mass() == pytest.approx(t.mass(), abs=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(
        a=st.floats(-2.0, 2.0),
        b=st.floats(-2.0, 2.0),
        radius=st.floats(0.0, 4.0),
        seed=st.integers(0, 2**16),
    )
    def test_blur_is_linear(self, a, b, radius, seed):
        rng = np.random.default_rng(seed)
        t1, t2 = rng.uniform(size=(9, 9)), rng.uniform(size=(9, 9))
        combined = defocus_blur(Template(a * t1 + b * t2), radius).alpha
        separate = a * defocus_blur(Template(t1), radius).alpha + b * defocus_blur(Template(t2), radius).alpha
        np.testing.assert_allclose(combined, separate, atol=1e-9)


class TestFootprintWindow:
    @pytest.mark.parametrize("depth", [0.7, 2.0, 4.5, 9.0, 30.0])
    def test_window_matches_full_footprint(self, depth):
        t = make_template("flake", 21, 3)
        full = footprint(t, 21, depth, 4.0).alpha
        side, extent = footprint_key(21, depth, 4.0)
        assert footprint_size(side, extent) == full.shape[0]
        rows, cols = slice(1, full.shape[0]), slice(1, full.shape[1] // 2 + 1)
        np.testing.assert_allclose(footprint_window(t, side, extent, rows, cols), full[rows, cols], atol=1e-12)

    def test_equal_keys_give_equal_footprints(self):
        t = make_template("dust", 15, 0)
        assert footprint_key(15, 5.0, 3.0) == footprint_key(15, 5.05, 3.0)
        np.testing.assert_array_equal(footprint(t, 15, 5.0, 3.0).alpha, footprint(t, 15, 5.05, 3.0).alpha)


def test_vectorized_keys_match_scalar_keys():
    depths = np.array([-2.0, 0.0, 1e-7, 0.2, 0.7, 1.0, 2.5, 4.0, 9.0, 30.0])
    keys = footprint_keys(21, depths, 4.0, min_depth=1e-6)
    for depth, key in zip(depths, keys):
        expected = footprint_key(21, depth, 4.0) if depth > 1e-6 else (-1, -1)
        assert tuple(key) == expected, depth


class TestFootprintCache:
    @pytest.fixture
    def library(self):
        return np.stack([make_template("flake", 21, seed).alpha for seed in range(3)])

    def test_small_footprints_are_cropped_from_the_whole(self, library):
        cache = FootprintCache(library)
        side, extent = footprint_key(21, 2.0, 4.0)
        rows, cols = slice(2, 30), slice(5, 17)
        window = cache.window(1, side, extent, rows, cols)
        np.testing.assert_allclose(window, footprint_window(Template(library[1]), side, extent, rows, cols), atol=1e-12)
        assert (cache.hits, cache.misses) == (0, 1)
        cache.window(1, side, extent, slice(0, 4), slice(0, 4))
        assert (cache.hits, cache.misses) == (1, 1)

    def test_large_footprints_are_kept_per_window(self, library):
        cache = FootprintCache(library)
        side, extent = footprint_key(21, 0.2, 4.0)
        assert footprint_size(side, extent) > 256
        rows, cols = slice(100, 140), slice(50, 90)
        window = cache.window(0, side, extent, rows, cols)
        assert window.shape == (40, 40)
        np.testing.assert_array_equal(window, footprint_window(Template(library[0]), side, extent, rows, cols))
        assert cache.window(0, side, extent, rows, cols) is window
        assert cache.window(0, side, extent, slice(101, 141), cols) is not window

    def test_windows_are_read_only(self, library):
        window = FootprintCache(library).window(0, 21, 0, slice(0, 21), slice(0, 21))
        with pytest.raises(ValueError):
            window[0, 0] = 1.0

    def test_budget_evicts_oldest_entries(self, library):
        cache = FootprintCache(library, budget_mb=1)
        side, extent = footprint_key(21, 0.2, 4.0)
        for index in range(3):
            cache.window(index, side, extent, slice(0, 400), slice(0, 400))
        # One 400x400 window already exceeds a megabyte; the newest stays
        assert len(cache) == 1
        cache.window(2, side, extent, slice(0, 400), slice(0, 400))
        assert cache.hits == 1

    def test_serves_equal_libraries(self, library):
        cache = FootprintCache(library)
        assert cache.serves(library.copy())
        assert not cache.serves(library[:2])
        assert not cache.serves(library * 0.5)
