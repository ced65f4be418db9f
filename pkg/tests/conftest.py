"""
Shared fixtures: small synthetic scenes and particle sets
"""

import os
import tempfile

# config.py reads this at import time; keep test runs out of the user's config directory
os.environ.setdefault("DOWNPOUR_CONFIG_DIR", tempfile.mkdtemp(prefix="downpour-test-"))

import pytest  # noqa: E402

from gradcheck import gradcheck_scene, place_particles  # noqa: E402
from particle_system import ParticleSet, WeatherConfig, sample_particles  # noqa: E402
from scene_io import SceneBundle  # noqa: E402

# Few, small particles so loop-based references stay fast
SMALL_WEATHER = WeatherConfig(
    count=15, base_size=9, depth_decay=3.0, template_kind="flake",
    transparency_base=0.3, motion_y=0.05,
)


@pytest.fixture
def scene() -> SceneBundle:
    """48x32 two-plane scene (planes at 3 m and 6 m, camera moves 5 cm sideways)."""
    return gradcheck_scene(48, 32, seed=0)


@pytest.fixture
def placed(scene: SceneBundle) -> ParticleSet:
    """20 hand-placed particles whose projections sit off the pixel grid in both frames."""
    return place_particles(scene, 20, seed=1)


@pytest.fixture
def small_weather() -> WeatherConfig:
    return SMALL_WEATHER


@pytest.fixture
def sampled(scene: SceneBundle) -> ParticleSet:
    return sample_particles(scene, SMALL_WEATHER, seed=3)
