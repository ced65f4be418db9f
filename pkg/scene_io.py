"""
Scene bundles and flow fields on disk: PPM frames, PFM depth, cameras.txt,
Middlebury .flo, particle snapshots, and a synthetic scene generator
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, List, Sequence, Tuple, Union

import numpy as np

from constants import FLO_MAGIC, PFM_GRAY_MAGIC, PPM_MAGIC, SNAPSHOT_VERSION, OutputNames
from utils.validators import (
    ContractError,
    ParseError,
    require_depth,
    require_flow,
    require_image,
    require_intrinsics,
    require_pose,
    require_positive,
)

if TYPE_CHECKING:
    from particle_system import ParticleSet

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


@dataclass(frozen=True)
class SceneBundle:
    """Two frames with per-frame depth, world-to-camera poses and intrinsics."""

    frame1: np.ndarray
    frame2: np.ndarray
    depth1: np.ndarray
    depth2: np.ndarray
    pose1: np.ndarray
    pose2: np.ndarray
    intrinsics: np.ndarray

    def __post_init__(self) -> None:
        frame1 = require_image(self.frame1, "frame1")
        frame2 = require_image(self.frame2, "frame2")
        depth1 = require_depth(self.depth1, "depth1")
        depth2 = require_depth(self.depth2, "depth2")
        if frame1.shape != frame2.shape:
            raise ContractError(f"frame sizes differ: {frame1.shape} vs {frame2.shape}")
        if depth1.shape != frame1.shape[:2] or depth2.shape != frame1.shape[:2]:
            raise ContractError(f"depth maps must be {frame1.shape[:2]}, got {depth1.shape} and {depth2.shape}")
        object.__setattr__(self, "frame1", frame1)
        object.__setattr__(self, "frame2", frame2)
        object.__setattr__(self, "depth1", depth1)
        object.__setattr__(self, "depth2", depth2)
        object.__setattr__(self, "pose1", require_pose(self.pose1, "pose1"))
        object.__setattr__(self, "pose2", require_pose(self.pose2, "pose2"))
        object.__setattr__(self, "intrinsics", require_intrinsics(self.intrinsics))

    @property
    def height(self) -> int:
        return int(self.frame1.shape[0])

    @property
    def width(self) -> int:
        return int(self.frame1.shape[1])

    @property
    def relative_pose(self) -> np.ndarray:
        """T_rel = T2 T1^-1, maps camera-1 coordinates to camera-2 coordinates."""
        return self.pose2 @ np.linalg.inv(self.pose1)

    def frames(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.frame1, self.frame2

    def depths(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.depth1, self.depth2


@dataclass(frozen=True)
class FlowField:
    """Dense 2D motion field; vectors[..., 0] is u, vectors[..., 1] is v."""

    vectors: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vectors", require_flow(self.vectors))

    @classmethod
    def from_components(cls, u: np.ndarray, v: np.ndarray) -> "FlowField":
        return cls(np.stack([u, v], axis=-1))

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))

    @property
    def u(self) -> np.ndarray:
        return self.vectors[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.vectors[..., 1]

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.vectors.shape[0]), int(self.vectors.shape[1])


# =============================================================================
# PPM (P6, maxval 255)


def _read_header_tokens(path: Path, data: bytes, count: int) -> Tuple[List[bytes], int]:
    """Read `count` whitespace-separated header tokens; returns them and the offset after the last one."""
    tokens: List[bytes] = []
    offset = 0
    for _ in range(count):
        match = _HEADER_TOKEN.match(data, offset)
        if match is None:
            raise ParseError(path, "truncated header", offset)
        tokens.append(match.group(1))
        offset = match.end()
    return tokens, offset


def _header_int(path: Path, token: bytes, offset: int, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ParseError(path, f"invalid {what} {token!r}", offset)
    if value <= 0:
        raise ParseError(path, f"{what} must be positive", offset)
    return value


def read_ppm(path: PathLike) -> np.ndarray:
    """
    Read a binary P6 image with maxval 255.

    Returns:
        Float image (H, W, 3) with bytes divided by 255

    Raises:
        ParseError: On wrong magic, ASCII P3 files, other maxvals or truncation
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P3":
        raise ParseError(path, "ASCII P3 images are not supported", 0)
    if data[:2] != PPM_MAGIC:
        raise ParseError(path, f"bad magic {data[:2]!r}, expected {PPM_MAGIC!r}", 0)

    tokens, offset = _read_header_tokens(path, data, 4)
    width = _header_int(path, tokens[1], offset, "width")
    height = _header_int(path, tokens[2], offset, "height")
    maxval = _header_int(path, tokens[3], offset, "maxval")
    if maxval != 255:
        raise ParseError(path, f"maxval must be 255, got {maxval}", offset)
    # Exactly one whitespace byte separates the header from the raster
    offset += 1

    expected = width * height * 3
    payload = data[offset:offset + expected]
    if len(payload) != expected:
        raise ParseError(path, f"truncated raster: {len(payload)} of {expected} bytes", offset + len(payload))
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def write_ppm(path: PathLike, image: np.ndarray) -> None:
    """Write an image in [0, 1] as binary P6; values are clipped and rounded to bytes."""
    image = require_image(image)
    height, width = image.shape[:2]
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, 'wb') as f:
        f.write(b"P6\n%d %d\n255\n" % (width, height))
        f.write(pixels.tobytes())


# =============================================================================
# PFM (grayscale)


def _read_pfm(path: Path) -> Tuple[np.ndarray, int]:
    """Decode a grayscale PFM; returns rows top-to-bottom and the raster offset."""
    data = path.read_bytes()
    if data[:2] != PFM_GRAY_MAGIC or (len(data) > 2 and not data[2:3].isspace()):
        raise ParseError(path, f"bad magic {data[:3]!r}, expected grayscale 'Pf'", 0)

    tokens, offset = _read_header_tokens(path, data, 4)
    width = _header_int(path, tokens[1], offset, "width")
    height = _header_int(path, tokens[2], offset, "height")
    try:
        scale = float(tokens[3])
    except ValueError:
        raise ParseError(path, f"invalid scale {tokens[3]!r}", offset)
    if scale == 0.0 or not np.isfinite(scale):
        raise ParseError(path, "scale must be a finite non-zero number", offset)
    offset += 1

    endian = "<" if scale < 0 else ">"
    expected = width * height * 4
    payload = data[offset:offset + expected]
    if len(payload) != expected:
        raise ParseError(path, f"truncated raster: {len(payload)} of {expected} bytes", offset + len(payload))
    # PFM stores the bottom row first
    values = np.frombuffer(payload, dtype=f"{endian}f4").reshape(height, width)
    return np.flipud(values).astype(np.float64), offset


def read_pfm(path: PathLike) -> np.ndarray:
    """Read a grayscale PFM of either endianness into a float64 (H, W) array."""
    values, _ = _read_pfm(Path(path))
    return values


def write_pfm(path: PathLike, values: np.ndarray) -> None:
    """Write a (H, W) array as little-endian grayscale PFM (float32)."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ContractError(f"PFM data must be 2D, got {array.shape}")
    height, width = array.shape
    with open(path, 'wb') as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (width, height))
        f.write(np.flipud(array).astype("<f4").tobytes())


def _read_depth(path: Path) -> np.ndarray:
    values, offset = _read_pfm(path)
    if not np.all(np.isfinite(values)):
        raise ParseError(path, "depth must be finite", offset)
    bad = np.flatnonzero(np.flipud(values).ravel() <= 0)
    if bad.size:
        raise ParseError(path, "depth must be positive", offset + 4 * int(bad[0]))
    return values


# =============================================================================
# cameras.txt


def _parse_floats(path: Path, line: str, count: int, offset: int, what: str) -> np.ndarray:
    parts = line.split()
    if len(parts) != count:
        raise ParseError(path, f"{what}: expected {count} numbers, got {len(parts)}", offset)
    try:
        return np.array([float(p) for p in parts])
    except ValueError as e:
        raise ParseError(path, f"{what}: {e}", offset)


def read_cameras(path: PathLike) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Read intrinsics and the two poses.

    Line 1 holds K row-major (9 numbers), lines 2 and 3 hold pose1 and pose2
    row-major (16 numbers each).

    Returns:
        Tuple of (K, pose1, pose2)
    """
    path = Path(path)
    text = path.read_text()
    lines: List[Tuple[int, str]] = []
    offset = 0
    for raw in text.splitlines(keepends=True):
        if raw.strip():
            lines.append((offset, raw))
        offset += len(raw.encode())
    if len(lines) != 3:
        raise ParseError(path, f"expected 3 non-empty lines, got {len(lines)}", offset)

    intrinsics = _parse_floats(path, lines[0][1], 9, lines[0][0], "intrinsics").reshape(3, 3)
    pose1 = _parse_floats(path, lines[1][1], 16, lines[1][0], "pose1").reshape(4, 4)
    pose2 = _parse_floats(path, lines[2][1], 16, lines[2][0], "pose2").reshape(4, 4)
    return intrinsics, pose1, pose2


def write_cameras(path: PathLike, intrinsics: np.ndarray, pose1: np.ndarray, pose2: np.ndarray) -> None:
    """Write cameras.txt with repr() floats so values round-trip exactly."""
    rows = [np.asarray(m, dtype=np.float64).ravel() for m in (intrinsics, pose1, pose2)]
    with open(path, 'w') as f:
        for row in rows:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


# =============================================================================
# Scene bundles


def load_scene(dir_path: PathLike) -> SceneBundle:
    """
    Load a scene bundle directory.

    Args:
        dir_path: Directory with frame1.ppm, frame2.ppm, depth1.pfm, depth2.pfm, cameras.txt

    Returns:
        A validated SceneBundle

    Raises:
        ParseError: If a file is malformed, names the file and byte offset
        ContractError: If the files disagree in size or a pose is not rigid
    """
    directory = Path(dir_path)
    frame1 = read_ppm(directory / OutputNames.FRAME1)
    frame2 = read_ppm(directory / OutputNames.FRAME2)
    depth1 = _read_depth(directory / OutputNames.DEPTH1)
    depth2 = _read_depth(directory / OutputNames.DEPTH2)
    intrinsics, pose1, pose2 = read_cameras(directory / OutputNames.CAMERAS)

    for name, depth in ((OutputNames.DEPTH1, depth1), (OutputNames.DEPTH2, depth2)):
        if depth.shape != frame1.shape[:2]:
            raise ParseError(directory / name, f"dimension mismatch: {depth.shape} vs frame {frame1.shape[:2]}", 0)
    if frame2.shape != frame1.shape:
        raise ParseError(directory / OutputNames.FRAME2, f"dimension mismatch: {frame2.shape} vs {frame1.shape}", 0)

    scene = SceneBundle(frame1, frame2, depth1, depth2, pose1, pose2, intrinsics)
    logger.info(f"Loaded scene {directory} ({scene.width}x{scene.height})")
    return scene


def save_scene(dir_path: PathLike, scene: SceneBundle) -> None:
    """Write a scene bundle in the layout load_scene reads."""
    directory = Path(dir_path)
    directory.mkdir(parents=True, exist_ok=True)
    write_ppm(directory / OutputNames.FRAME1, scene.frame1)
    write_ppm(directory / OutputNames.FRAME2, scene.frame2)
    write_pfm(directory / OutputNames.DEPTH1, scene.depth1)
    write_pfm(directory / OutputNames.DEPTH2, scene.depth2)
    write_cameras(directory / OutputNames.CAMERAS, scene.intrinsics, scene.pose1, scene.pose2)
    logger.info(f"Saved scene to {directory}")


# =============================================================================
# Middlebury .flo


def read_flo(path: PathLike) -> FlowField:
    """
    Read a Middlebury .flo file.

    Raises:
        ParseError: On wrong magic, empty fields or a truncated payload
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != FLO_MAGIC:
        raise ParseError(path, f"bad magic {data[:4]!r}, expected {FLO_MAGIC!r}", 0)
    if len(data) < 12:
        raise ParseError(path, "truncated header", len(data))
    width, height = (int(v) for v in np.frombuffer(data[4:12], dtype="<i4"))
    if width <= 0 or height <= 0:
        raise ParseError(path, "empty flow field", 4)

    expected = width * height * 2 * 4
    payload = data[12:12 + expected]
    if len(payload) != expected:
        raise ParseError(path, f"truncated payload: {len(payload)} of {expected} bytes", 12 + len(payload))
    vectors = np.frombuffer(payload, dtype="<f4").reshape(height, width, 2).astype(np.float64)
    if not np.all(np.isfinite(vectors)):
        raise ParseError(path, "flow contains non-finite values", 12)
    return FlowField(vectors)


def write_flo(path: PathLike, flow: FlowField) -> None:
    """Write a flow field as little-endian Middlebury .flo (float32 payload)."""
    vectors = require_flow(flow.vectors if isinstance(flow, FlowField) else flow)
    height, width = vectors.shape[:2]
    with open(path, 'wb') as f:
        f.write(FLO_MAGIC)
        f.write(np.array([width, height], dtype="<i4").tobytes())
        f.write(vectors.astype("<f4").tobytes())


# =============================================================================
# Synthetic scenes


def _plane_texture(rng: np.random.Generator, depth: float, focal: float, components: int = 6):
    """Random sum-of-sinusoids texture in plane coordinates, 16-40 px wavelengths at `depth`."""
    wavelengths = rng.uniform(16.0, 40.0, size=(3, components)) * depth / focal
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(3, components))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, components))
    amplitudes = rng.uniform(0.5, 1.0, size=(3, components))
    kx = 2.0 * np.pi * np.cos(angles) / wavelengths
    ky = 2.0 * np.pi * np.sin(angles) / wavelengths

    def evaluate(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.empty(x.shape + (3,))
        for channel in range(3):
            waves = np.sin(
                x[..., None] * kx[channel] + y[..., None] * ky[channel] + phases[channel]
            ) @ amplitudes[channel]
            out[..., channel] = 0.5 + 0.35 * waves / amplitudes[channel].sum()
        return out

    return evaluate


def _render_planes(planes, pose: np.ndarray, intrinsics: np.ndarray, height: int, width: int):
    """Ray-cast the plane stack from a camera; returns world hit points, colors and camera depth."""
    rotation, translation = pose[:3, :3], pose[:3, 3]
    center = -rotation.T @ translation
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    pixels = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    directions = pixels @ np.linalg.inv(intrinsics).T @ rotation

    best_depth = np.full((height, width), np.inf)
    points = np.zeros((height, width, 3))
    colors = np.zeros((height, width, 3))
    for plane_z, extent, texture in planes:
        with np.errstate(divide='ignore', invalid='ignore'):
            scale = (plane_z - center[2]) / directions[..., 2]
        hit = center + scale[..., None] * directions
        camera_depth = hit @ rotation[2] + translation[2]
        valid = (scale > 0) & (camera_depth > 0)
        if extent is not None:
            x_lo, x_hi, y_lo, y_hi = extent
            valid &= (hit[..., 0] >= x_lo) & (hit[..., 0] <= x_hi)
            valid &= (hit[..., 1] >= y_lo) & (hit[..., 1] <= y_hi)
        closer = valid & (camera_depth < best_depth)
        best_depth[closer] = camera_depth[closer]
        points[closer] = hit[closer]
        colors[closer] = texture(hit[closer][:, 0], hit[closer][:, 1])
    return points, colors, best_depth


def _project(points: np.ndarray, pose: np.ndarray, intrinsics: np.ndarray) -> np.ndarray:
    camera = points @ pose[:3, :3].T + pose[:3, 3]
    image = camera @ intrinsics.T
    return image[..., :2] / image[..., 2:3]


def synth_scene(
    width: int,
    height: int,
    texture_seed: int,
    camera_translation: Sequence[float],
    plane_depths: Sequence[float],
    focal: float = 0.0,
) -> Tuple[SceneBundle, FlowField]:
    """
    Generate a textured stack of fronto-parallel planes seen by a translating camera.

    The world frame is camera 1 (pose1 = identity); camera 2 sits at
    `camera_translation`, so pose2 = [I | -t]. The deepest plane fills the
    background; every other plane is a rectangle, nearer planes smaller and
    centered. Both frames are ray-cast from the same continuous plane
    textures, so frame 2 is the exact reprojection of frame 1 (up to 8-bit
    quantization).

    Args:
        width, height: Image size, both at least 16
        texture_seed: Seed of the texture generator
        camera_translation: Camera-2 center in camera-1 coordinates (meters)
        plane_depths: Plane depths in camera 1 (meters, positive)
        focal: Focal length in pixels; 0 means `width`

    Returns:
        Tuple of (SceneBundle, ground-truth FlowField from frame 1 to frame 2)
    """
    if width < 16 or height < 16:
        raise ContractError(f"synthetic scenes need width, height >= 16, got {width}x{height}")
    if not plane_depths:
        raise ContractError("at least one plane depth is required")
    for depth in plane_depths:
        require_positive(depth, "plane depth")
    translation = np.asarray(camera_translation, dtype=np.float64)
    if translation.shape != (3,):
        raise ContractError(f"camera_translation must be a 3-vector, got {translation.shape}")

    focal = float(focal) if focal > 0 else float(width)
    intrinsics = np.array([
        [focal, 0.0, (width - 1) / 2.0],
        [0.0, focal, (height - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])
    pose1 = np.eye(4)
    pose2 = np.eye(4)
    pose2[:3, 3] = -translation

    rng = np.random.default_rng(texture_seed)
    ordered = sorted(float(d) for d in plane_depths)
    foreground, background = ordered[:-1], ordered[-1]
    planes = [(background, None, _plane_texture(rng, background, focal))]
    for rank, depth in enumerate(foreground):
        margin = min(0.45, 0.2 + 0.1 * (len(foreground) - 1 - rank))
        x_lo, x_hi = (width * margin - intrinsics[0, 2]) * depth / focal, (width * (1 - margin) - intrinsics[0, 2]) * depth / focal
        y_lo, y_hi = (height * margin - intrinsics[1, 2]) * depth / focal, (height * (1 - margin) - intrinsics[1, 2]) * depth / focal
        planes.append((depth, (x_lo, x_hi, y_lo, y_hi), _plane_texture(rng, depth, focal)))

    points1, colors1, depth1 = _render_planes(planes, pose1, intrinsics, height, width)
    _, colors2, depth2 = _render_planes(planes, pose2, intrinsics, height, width)
    if not (np.all(np.isfinite(depth1)) and np.all(np.isfinite(depth2))):
        raise ContractError("camera translation moves a plane behind the camera")

    flow = FlowField(_project(points1, pose2, intrinsics) - _project(points1, pose1, intrinsics))
    # Quantize to what PPM/PFM can store so save/load round trips are exact
    scene = SceneBundle(
        frame1=np.round(colors1 * 255.0) / 255.0,
        frame2=np.round(colors2 * 255.0) / 255.0,
        depth1=depth1.astype(np.float32).astype(np.float64),
        depth2=depth2.astype(np.float32).astype(np.float64),
        pose1=pose1,
        pose2=pose2,
        intrinsics=intrinsics,
    )
    logger.debug(f"Synthesized {width}x{height} scene, planes {ordered}, t={translation.tolist()}")
    return scene, flow


# =============================================================================
# Particle snapshots


_SNAPSHOT_ARRAYS = (
    "positions", "motion", "offset1", "offset2", "color", "transparency",
    "template_index", "parent", "blur_offset", "templates", "relative_pose",
)


def save_particles(path: PathLike, particles: "ParticleSet") -> None:
    """Write a versioned .npz record of every particle field."""
    arrays = {name: getattr(particles, name) for name in _SNAPSHOT_ARRAYS}
    np.savez_compressed(
        path,
        version=np.array(SNAPSHOT_VERSION),
        config_json=np.array(json.dumps(particles.config.to_dict())),
        seed=np.array(particles.seed),
        expanded=np.array(particles.expanded),
        parent_count=np.array(particles.parent_count),
        **arrays,
    )
    logger.info(f"Saved {len(particles)} particles to {path}")


def load_particles(path: PathLike) -> "ParticleSet":
    """Read a snapshot written by save_particles."""
    from particle_system import ParticleSet, WeatherConfig

    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as record:
            version = int(record["version"])
            if version != SNAPSHOT_VERSION:
                raise ParseError(path, f"unsupported snapshot version {version}", 0)
            config = WeatherConfig.from_dict(json.loads(str(record["config_json"])))
            arrays = {name: np.array(record[name]) for name in _SNAPSHOT_ARRAYS}
            seed = int(record["seed"])
            expanded = bool(record["expanded"])
            parent_count = int(record["parent_count"])
    except KeyError as e:
        raise ParseError(path, f"missing field {e}", 0)
    except (OSError, ValueError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(path, f"not a particle snapshot ({e})", 0)

    return ParticleSet(config=config, seed=seed, expanded=expanded, parent_count=parent_count, **arrays)
