"""
Weather particle sets: configuration presets, frustum sampling and motion-blur replicas
"""

import colorsys
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from constants import (
    FOG_TRANSPARENCY,
    PROJECTION_EPS,
    SAMPLING_MARGIN,
    SAMPLING_MAX_ATTEMPTS,
    SAMPLING_MIN_DEPTH,
    TEMPLATE_LIBRARY_SIZE,
)
from scene_io import SceneBundle
from template_lib import TEMPLATE_KINDS, Template, make_template
from utils.validators import ContractError, SamplingError, UnknownPresetError

logger = logging.getLogger(__name__)

BLEND_MODES = ("additive", "meshkin")

Color = Tuple[float, float, float]


@dataclass(frozen=True)
class WeatherConfig:
    """One weather effect: counts, sizes, color model, motion model, blur model."""

    count: int
    base_size: int
    depth_decay: float
    template_kind: str = "flake"
    base_color: Color = (1.0, 1.0, 1.0)
    color_jitter: Color = (0.0, 0.0, 0.0)  # (hue degrees, lightness, saturation)
    blend_mode: str = "additive"
    transparency_base: float = 0.75
    motion_y: float = 0.0  # meters per frame, positive falls down the image
    motion_angle_jitter: float = 0.0  # degrees
    motion_magnitude_jitter: float = 0.0  # fraction of |m|
    blur_enabled: bool = False
    blur_length: float = 0.0  # fraction of the motion vector
    blur_particles: int = 1
    constant_transparency: bool = False

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ContractError(f"count must be >= 1, got {self.count}")
        if self.base_size < 3:
            raise ContractError(f"base_size must be >= 3, got {self.base_size}")
        if not self.depth_decay > 0:
            raise ContractError(f"depth_decay must be > 0, got {self.depth_decay}")
        if self.template_kind not in TEMPLATE_KINDS:
            raise ContractError(f"template_kind must be one of {TEMPLATE_KINDS}, got {self.template_kind!r}")
        if self.blend_mode not in BLEND_MODES:
            raise ContractError(f"blend_mode must be one of {BLEND_MODES}, got {self.blend_mode!r}")
        if len(self.base_color) != 3 or not all(0.0 <= c <= 1.0 for c in self.base_color):
            raise ContractError(f"base_color components must lie in [0, 1], got {self.base_color}")
        if len(self.color_jitter) != 3 or any(j < 0 for j in self.color_jitter):
            raise ContractError(f"color_jitter values must be >= 0, got {self.color_jitter}")
        if self.transparency_base < 0:
            raise ContractError(f"transparency_base must be >= 0, got {self.transparency_base}")
        if self.motion_angle_jitter < 0 or self.motion_magnitude_jitter < 0:
            raise ContractError("motion jitter values must be >= 0")
        if self.blur_enabled and self.blur_particles < 1:
            raise ContractError(f"blur_particles must be >= 1 with blur enabled, got {self.blur_particles}")
        if self.blur_length < 0:
            raise ContractError(f"blur_length must be >= 0, got {self.blur_length}")
        object.__setattr__(self, "base_color", tuple(float(c) for c in self.base_color))
        object.__setattr__(self, "color_jitter", tuple(float(c) for c in self.color_jitter))

    @property
    def transparency_max(self) -> float:
        """Upper bound of the optimized transparency range (0, 2 * theta_base)."""
        return 2.0 * self.transparency_base

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["base_color"] = list(self.base_color)
        data["color_jitter"] = list(self.color_jitter)
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "WeatherConfig":
        return cls(**{
            key: tuple(value) if key in ("base_color", "color_jitter") else value
            for key, value in data.items()
        })

    @classmethod
    def from_mapping(cls, entries: Mapping[str, str], base: Optional["WeatherConfig"] = None) -> "WeatherConfig":
        """
        Build a config from raw key=value strings, optionally on top of a preset.

        Raises:
            ContractError: On unknown keys or unparsable values
        """
        known = {f.name: f for f in fields(cls)}
        values: Dict[str, Any] = base.to_dict() if base is not None else {}
        for key, raw in entries.items():
            if key not in known:
                raise ContractError(f"unknown weather setting {key!r}")
            values[key] = _parse_value(key, raw, values.get(key))
        missing = [name for name, f in known.items() if name not in values and f.default is f.default_factory]
        if missing:
            raise ContractError(f"missing weather settings: {', '.join(missing)}")
        return cls.from_dict(values)


def _parse_value(key: str, raw: str, current: Any) -> Any:
    try:
        if key in ("base_color", "color_jitter"):
            parts = [float(p) for p in raw.split(",")]
            if len(parts) != 3:
                raise ValueError("expected three comma-separated numbers")
            return tuple(parts)
        if key in ("count", "base_size", "blur_particles"):
            return int(raw)
        if key in ("blur_enabled", "constant_transparency"):
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {raw!r}")
            return lowered in ("true", "1", "yes")
        if key in ("template_kind", "blend_mode"):
            return raw
        return float(raw)
    except ValueError as e:
        raise ContractError(f"invalid value for {key}: {e}")


# =============================================================================
# Presets


def _rgb(r: int, g: int, b: int) -> Color:
    return (r / 255.0, g / 255.0, b / 255.0)


WHITE = _rgb(255, 255, 255)

_SNOW = WeatherConfig(
    count=3000, base_size=71, depth_decay=9.0, template_kind="flake", base_color=WHITE,
    blend_mode="additive", transparency_base=0.75, motion_y=0.2,
)
# motion_angle_jitter is in degrees, motion_magnitude_jitter a fraction of |m|; rain 4 degrees and 10 %
_RAIN = replace(
    _SNOW, base_size=51, motion_angle_jitter=4.0, motion_magnitude_jitter=0.1,
    blur_enabled=True, blur_length=0.15, blur_particles=20,
)
# Sparks scatter much wider: 60 degrees and 20 %
_SPARKS = WeatherConfig(
    count=3000, base_size=41, depth_decay=9.0, template_kind="flake", base_color=_rgb(191, 79, 64),
    color_jitter=(15.0, 0.1, 0.1), blend_mode="additive", transparency_base=1.5, motion_y=-0.05,
    motion_angle_jitter=60.0, motion_magnitude_jitter=0.2,
    blur_enabled=True, blur_length=0.3, blur_particles=10,
)
_FOG = WeatherConfig(
    count=60, base_size=451, depth_decay=0.8, template_kind="dust", base_color=WHITE,
    blend_mode="meshkin", transparency_base=FOG_TRANSPARENCY, constant_transparency=True,
)
_GREY = replace(_SNOW, base_color=_rgb(127, 127, 127), blend_mode="meshkin")

_SPARK_COLORS: Dict[str, Tuple[Color, Color]] = {
    "white": (WHITE, (0.0, 0.0, 0.0)),
    "red": (_rgb(191, 79, 64), (15.0, 0.1, 0.1)),
    "green": (_rgb(79, 191, 64), (15.0, 0.1, 0.1)),
    "blue": (_rgb(64, 79, 191), (15.0, 0.1, 0.1)),
    "color": (_rgb(205, 80, 80), (180.0, 0.1, 0.1)),
}


def _catalogue() -> Dict[str, WeatherConfig]:
    table: Dict[str, WeatherConfig] = {
        "snow": _SNOW,
        "rain": _RAIN,
        "sparks": _SPARKS,
        "fog": _FOG,
        "grey": _GREY,
    }
    for count in (1000, 2000, 3000, 4000, 5000):
        table[f"particles-{count}"] = replace(_SNOW, count=count)

    table["blur-0.0"] = _SNOW
    for length, size in ((0.0375, 67), (0.075, 61), (0.1125, 57), (0.15, 51)):
        table[f"blur-{length}"] = replace(_RAIN, base_size=size, blur_length=length)

    for name, (color, jitter) in _SPARK_COLORS.items():
        table[f"additive-{name}"] = replace(_SPARKS, base_color=color, color_jitter=jitter)
        table[f"alpha-{name}"] = replace(_SPARKS, base_color=color, color_jitter=jitter, blend_mode="meshkin")

    dust = dict(template_kind="dust", blend_mode="meshkin")
    table["size-small"] = WeatherConfig(count=3000, base_size=71, depth_decay=9.0, transparency_base=1.0, **dust)
    table["size-medium"] = WeatherConfig(count=141, base_size=161, depth_decay=1.75, transparency_base=0.78, **dust)
    table["size-large"] = WeatherConfig(count=60, base_size=451, depth_decay=0.8, transparency_base=0.1, **dust)
    table["size-fog"] = _FOG
    return table


_PRESETS = _catalogue()


def presets() -> Dict[str, WeatherConfig]:
    """All named weather configurations; highlighted effects are snow, rain, sparks, fog and grey."""
    return dict(_PRESETS)


def get_preset(name: str) -> WeatherConfig:
    """Look up a preset by name."""
    try:
        return _PRESETS[name]
    except KeyError:
        raise UnknownPresetError(name, tuple(_PRESETS))


# =============================================================================
# Particle sets


@dataclass(frozen=True)
class Particle:
    """Read-only view of one particle of a set."""

    p1: np.ndarray
    m: np.ndarray
    offset1: np.ndarray
    offset2: np.ndarray
    template: int
    color: np.ndarray
    transparency: float
    d1: float
    d2: float
    parent: int


def _as_rows(array: np.ndarray, count: int, width: Optional[int]) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    expected = (count,) if width is None else (count, width)
    if array.shape != expected:
        raise ContractError(f"particle field has shape {array.shape}, expected {expected}")
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ParticleSet:
    """
    Struct-of-arrays particle set.

    `positions` are the sampled camera-1 points p1 of each particle's parent;
    a motion-blur replica sits `blur_offset` of the way along (m + offset2)
    from it. Colors and transparencies are per entry, offsets are shared by
    the replicas of one parent.
    """

    config: WeatherConfig
    seed: int
    positions: np.ndarray
    motion: np.ndarray
    offset1: np.ndarray
    offset2: np.ndarray
    color: np.ndarray
    transparency: np.ndarray
    template_index: np.ndarray
    parent: np.ndarray
    blur_offset: np.ndarray
    templates: np.ndarray = field(repr=False)
    relative_pose: np.ndarray = field(repr=False)
    expanded: bool = False
    parent_count: int = -1

    def __post_init__(self) -> None:
        count = int(np.shape(self.positions)[0])
        for name in ("positions", "motion", "offset1", "offset2", "color"):
            object.__setattr__(self, name, _as_rows(getattr(self, name), count, 3))
        for name in ("transparency", "blur_offset"):
            object.__setattr__(self, name, _as_rows(getattr(self, name), count, None))

        template_index = np.array(self.template_index, dtype=np.intp)
        parent = np.array(self.parent, dtype=np.intp)
        templates = np.array(self.templates, dtype=np.float64)
        if template_index.shape != (count,) or parent.shape != (count,):
            raise ContractError("template_index and parent must have one entry per particle")
        if templates.ndim != 3 or (count and template_index.max() >= templates.shape[0]):
            raise ContractError("template_index points outside the template library")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ContractError("particle colors must lie in [0, 1]")
        if np.any(self.transparency < 0):
            raise ContractError("particle transparencies must be >= 0")
        for array in (template_index, parent, templates):
            array.setflags(write=False)
        object.__setattr__(self, "template_index", template_index)
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "templates", templates)
        object.__setattr__(self, "relative_pose", np.array(self.relative_pose, dtype=np.float64))
        if self.parent_count < 0:
            object.__setattr__(self, "parent_count", int(parent.max()) + 1 if count else 0)

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def __getitem__(self, index: int) -> Particle:
        return Particle(
            p1=self.base_points()[index],
            m=self.motion[index],
            offset1=self.offset1[index],
            offset2=self.offset2[index],
            template=int(self.template_index[index]),
            color=self.color[index],
            transparency=float(self.transparency[index]),
            d1=float(self.depth1[index]),
            d2=float(self.depth2[index]),
            parent=int(self.parent[index]),
        )

    def __iter__(self) -> Iterator[Particle]:
        return (self[i] for i in range(len(self)))

    @property
    def particles(self) -> List[Particle]:
        return list(self)

    def template(self, index: int) -> Template:
        """Template of the particle at `index`."""
        return Template(self.templates[self.template_index[index]])

    def base_points(self) -> np.ndarray:
        """p1 of every entry; replicas are displaced along their motion."""
        return self.positions + self.blur_offset[:, None] * (self.motion + self.offset2)

    def frame1_points(self) -> np.ndarray:
        """Camera-1 coordinates p1 + offset1."""
        return self.base_points() + self.offset1

    def frame2_points(self) -> np.ndarray:
        """Camera-2 coordinates T_rel (p1 + offset1) + (m + offset2)."""
        rotation, translation = self.relative_pose[:3, :3], self.relative_pose[:3, 3]
        return self.frame1_points() @ rotation.T + translation + self.motion + self.offset2

    @property
    def depth1(self) -> np.ndarray:
        return self.frame1_points()[:, 2]

    @property
    def depth2(self) -> np.ndarray:
        return self.frame2_points()[:, 2]

    def with_parameters(
        self,
        offset1: Optional[np.ndarray] = None,
        offset2: Optional[np.ndarray] = None,
        color: Optional[np.ndarray] = None,
        transparency: Optional[np.ndarray] = None,
    ) -> "ParticleSet":
        """Copy of an unexpanded set with some parameter blocks replaced."""
        if self.expanded:
            raise ContractError("parameters can only be replaced before motion-blur expansion")
        return replace(
            self,
            offset1=self.offset1 if offset1 is None else offset1,
            offset2=self.offset2 if offset2 is None else offset2,
            color=self.color if color is None else color,
            transparency=self.transparency if transparency is None else transparency,
        )

    def permuted(self, order: np.ndarray) -> "ParticleSet":
        """Same particles in a different list order."""
        order = np.asarray(order, dtype=np.intp)
        return replace(
            self,
            positions=self.positions[order],
            motion=self.motion[order],
            offset1=self.offset1[order],
            offset2=self.offset2[order],
            color=self.color[order],
            transparency=self.transparency[order],
            template_index=self.template_index[order],
            parent=self.parent[order],
            blur_offset=self.blur_offset[order],
            parent_count=self.parent_count,
        )


# =============================================================================
# Sampling


def jitter_color(base: Color, jitter: Color, unit_draws: np.ndarray) -> np.ndarray:
    """
    Perturb a color in HLS space.

    Args:
        base: RGB in [0, 1]
        jitter: (hue degrees, lightness, saturation) half-ranges
        unit_draws: Array (N, 3) of draws in [-1, 1]

    Returns:
        Array (N, 3) of RGB colors clamped to [0, 1]
    """
    hue, lightness, saturation = colorsys.rgb_to_hls(*base)
    out = np.empty((len(unit_draws), 3))
    for i, (dh, dl, ds) in enumerate(unit_draws):
        h = (hue + dh * jitter[0] / 360.0) % 1.0
        l = min(1.0, max(0.0, lightness + dl * jitter[1]))
        s = min(1.0, max(0.0, saturation + ds * jitter[2]))
        out[i] = colorsys.hls_to_rgb(h, l, s)
    return np.clip(out, 0.0, 1.0)


def depth_law(cfg: WeatherConfig, depth: np.ndarray) -> np.ndarray:
    """Transparency theta_base * min(1, depth_decay / d), or the constant for fog-like effects."""
    depth = np.asarray(depth, dtype=np.float64)
    if cfg.constant_transparency:
        return np.full(depth.shape, cfg.transparency_base)
    return cfg.transparency_base * np.minimum(1.0, cfg.depth_decay / depth)


def _project(points: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    image = points @ intrinsics.T
    with np.errstate(divide='ignore', invalid='ignore'):
        return image[:, :2] / image[:, 2:3]


def _inside(pixels: np.ndarray, depth: np.ndarray, width: int, height: int) -> np.ndarray:
    return (
        (depth > PROJECTION_EPS)
        & (pixels[:, 0] >= 0.0) & (pixels[:, 0] <= width - 1)
        & (pixels[:, 1] >= 0.0) & (pixels[:, 1] <= height - 1)
    )


def in_frustum(ps: ParticleSet, scene: SceneBundle) -> np.ndarray:
    """Per particle: does p1 land in image 1, or its motion-displaced point in image 2?"""
    points1 = ps.frame1_points()
    points2 = ps.frame2_points()
    inside1 = _inside(_project(points1, scene.intrinsics), points1[:, 2], scene.width, scene.height)
    inside2 = _inside(_project(points2, scene.intrinsics), points2[:, 2], scene.width, scene.height)
    return inside1 | inside2


def sample_particles(scene: SceneBundle, cfg: WeatherConfig, seed: int) -> ParticleSet:
    """
    Sample `cfg.count` particles in the visible 3D volume of a scene.

    Random stream order for a fixed seed (numpy PCG64 via default_rng):
    one 32-bit seed per library template; then batches of candidates, each
    batch drawing pixel x, pixel y, depth, motion angle and motion magnitude
    arrays in that order; then color jitter (count x 3) and template indices.

    Raises:
        SamplingError: If 10^6 candidates do not yield enough particles
    """
    rng = np.random.default_rng(seed)
    library = np.stack([
        make_template(cfg.template_kind, cfg.base_size, int(rng.integers(2**32))).alpha
        for _ in range(TEMPLATE_LIBRARY_SIZE)
    ])

    width, height = scene.width, scene.height
    max_depth = float(scene.depth1.max())
    if max_depth <= SAMPLING_MIN_DEPTH:
        raise ContractError(f"scene depth ({max_depth} m) does not exceed d_min = {SAMPLING_MIN_DEPTH} m")
    relative = scene.relative_pose
    inverse_k = np.linalg.inv(scene.intrinsics)
    margin_x, margin_y = SAMPLING_MARGIN * width, SAMPLING_MARGIN * height

    accepted_points: List[np.ndarray] = []
    accepted_motion: List[np.ndarray] = []
    remaining = cfg.count
    attempts = 0
    while remaining > 0:
        if attempts >= SAMPLING_MAX_ATTEMPTS:
            logger.error(f"Frustum sampling gave up after {attempts} attempts")
            raise SamplingError("frustum sampling failed")
        batch = min(max(64, 4 * remaining), SAMPLING_MAX_ATTEMPTS - attempts)
        attempts += batch
        xs = rng.uniform(-margin_x, width - 1 + margin_x, batch)
        ys = rng.uniform(-margin_y, height - 1 + margin_y, batch)
        zs = rng.uniform(SAMPLING_MIN_DEPTH, max_depth, batch)
        angles = np.deg2rad(rng.uniform(-1.0, 1.0, batch) * cfg.motion_angle_jitter)
        scales = 1.0 + rng.uniform(-1.0, 1.0, batch) * cfg.motion_magnitude_jitter

        points = zs[:, None] * (np.stack([xs, ys, np.ones(batch)], axis=1) @ inverse_k.T)
        # Rotate (0, m_y, 0) about the optical axis, then scale
        motion = np.stack([
            -np.sin(angles) * cfg.motion_y,
            np.cos(angles) * cfg.motion_y,
            np.zeros(batch),
        ], axis=1) * scales[:, None]

        moved = points @ relative[:3, :3].T + relative[:3, 3] + motion
        inside1 = _inside(np.stack([xs, ys], axis=1), zs, width, height)
        inside2 = _inside(_project(moved, scene.intrinsics), moved[:, 2], width, height)
        keep = np.flatnonzero(inside1 | inside2)[:remaining]
        accepted_points.append(points[keep])
        accepted_motion.append(motion[keep])
        remaining -= len(keep)

    positions = np.concatenate(accepted_points)
    motion = np.concatenate(accepted_motion)
    colors = jitter_color(cfg.base_color, cfg.color_jitter, rng.uniform(-1.0, 1.0, (cfg.count, 3)))
    template_index = rng.integers(TEMPLATE_LIBRARY_SIZE, size=cfg.count)

    zeros = np.zeros((cfg.count, 3))
    ps = ParticleSet(
        config=cfg,
        seed=seed,
        positions=positions,
        motion=motion,
        offset1=zeros,
        offset2=zeros,
        color=colors,
        transparency=depth_law(cfg, positions[:, 2]),
        template_index=template_index,
        parent=np.arange(cfg.count),
        blur_offset=np.zeros(cfg.count),
        templates=library,
        relative_pose=relative,
    )
    logger.info(f"Sampled {cfg.count} particles (seed {seed}) in {attempts} attempts")
    return ps


def expand_motion_blur(ps: ParticleSet) -> ParticleSet:
    """
    Replace each particle by K replicas spread along its motion.

    Replica i of K sits at p1 + (i / (K - 1)) * blur_length * (m + offset2)
    (K = 1: at p1) with transparency theta / K. Replicas keep their parent's
    offsets, color and template, and record the parent index so gradients
    flow back to it. Sets without blur, or already expanded, are returned as is.
    """
    cfg = ps.config
    if not cfg.blur_enabled or ps.expanded:
        return ps

    k = cfg.blur_particles
    fractions = np.zeros(1) if k == 1 else np.arange(k) / (k - 1) * cfg.blur_length
    repeat = np.repeat(np.arange(len(ps)), k)
    return replace(
        ps,
        positions=ps.positions[repeat],
        motion=ps.motion[repeat],
        offset1=ps.offset1[repeat],
        offset2=ps.offset2[repeat],
        color=ps.color[repeat],
        transparency=ps.transparency[repeat] / k,
        template_index=ps.template_index[repeat],
        parent=ps.parent[repeat],
        blur_offset=np.tile(fractions, len(ps)),
        expanded=True,
        parent_count=ps.parent_count,
    )
