"""
Particle templates (billboards): procedural shapes, depth scaling and defocus blur
"""

import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage, signal

from constants import DEFOCUS_MAX_RADIUS, FOOTPRINT_CACHE_FULL_MAX, FOOTPRINT_CACHE_MB, MIN_TEMPLATE_SIZE
from utils.validators import ContractError, require_positive

logger = logging.getLogger(__name__)

TEMPLATE_KINDS = ("flake", "dust")

# Flake shape: Gaussian falloff whose width is modulated six times per turn
FLAKE_SIGMA_FRACTION = 0.35
FLAKE_MODULATION = 0.6
DUST_SIGMA_FRACTION = 0.3


@dataclass(frozen=True)
class Template:
    """A grayscale transparency mask with odd sides; the anchor is the center pixel."""

    alpha: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if alpha.ndim != 2 or alpha.shape[0] % 2 == 0 or alpha.shape[1] % 2 == 0:
            raise ContractError(f"template sides must be odd, got {alpha.shape}")
        object.__setattr__(self, "alpha", alpha)

    @property
    def shape(self):
        return self.alpha.shape

    @property
    def anchor(self):
        """Center pixel as (row, column)."""
        return (self.alpha.shape[0] - 1) // 2, (self.alpha.shape[1] - 1) // 2

    def mass(self) -> float:
        return float(self.alpha.sum())


def round_to_odd(value: float) -> int:
    """Nearest odd integer, halves rounded up."""
    return 2 * int(np.floor((value - 1.0) / 2.0 + 0.5)) + 1


def make_template(kind: str, base_size: int, seed: int, angle: Optional[float] = None) -> Template:
    """
    Build a procedural particle template.

    Args:
        kind: "flake" (six-fold star-shaped blob) or "dust" (radial falloff)
        base_size: Side length in pixels, rounded to odd, at least 3
        seed: Seeds the rotation angle, drawn uniformly from [0, 2 pi)
        angle: Explicit rotation in radians; overrides the seeded draw

    Returns:
        A Template with value 1 at the center
    """
    if kind not in TEMPLATE_KINDS:
        raise ContractError(f"unknown template kind {kind!r}, expected one of {TEMPLATE_KINDS}")
    if base_size < MIN_TEMPLATE_SIZE:
        raise ContractError(f"base_size must be >= {MIN_TEMPLATE_SIZE}, got {base_size}")

    side = max(MIN_TEMPLATE_SIZE, round_to_odd(base_size))
    if angle is None:
        angle = float(np.random.default_rng(seed).uniform(0.0, 2.0 * np.pi))

    center = (side - 1) / 2.0
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    dx, dy = cols - center, rows - center
    radius_sq = dx * dx + dy * dy

    if kind == "dust":
        sigma = DUST_SIGMA_FRACTION * side
        alpha = np.exp(-radius_sq / (sigma * sigma))
    else:
        sigma = FLAKE_SIGMA_FRACTION * side
        phi = np.arctan2(dy, dx)
        alpha = np.exp(-radius_sq / (sigma * sigma) * (1.0 - FLAKE_MODULATION * np.cos(6.0 * (phi - angle))))
    return Template(alpha)


def scale_by_depth(t: Template, base_size: int, depth: float, depth_decay: float) -> Template:
    """
    Resize a template by the inverse particle depth.

    The output side is max(3, round_to_odd(base_size * depth_decay / depth));
    content is resampled bilinearly with the centers aligned.
    """
    require_positive(depth, "depth")
    require_positive(depth_decay, "depth_decay")
    side = scaled_side(base_size, depth, depth_decay)
    height, width = t.alpha.shape
    if (side, side) == (height, width):
        return t

    out = np.arange(side, dtype=np.float64)
    rows = out * (height - 1) / (side - 1)
    cols = out * (width - 1) / (side - 1)
    grid_rows, grid_cols = np.meshgrid(rows, cols, indexing="ij")
    alpha = ndimage.map_coordinates(t.alpha, [grid_rows, grid_cols], order=1, mode="nearest")
    return Template(np.clip(alpha, 0.0, 1.0))


def scaled_side(base_size: int, depth: float, depth_decay: float) -> int:
    """Template side at `depth`; discrete, so it carries no gradient."""
    return max(MIN_TEMPLATE_SIZE, round_to_odd(base_size * depth_decay / depth))


def disk_extent(radius: float) -> int:
    """Largest integer i^2 + j^2 inside the disk; identifies the discrete kernel."""
    require_positive(radius, "radius", allow_zero=True)
    return int(np.floor(radius * radius))


def disk_kernel(radius: float) -> np.ndarray:
    """Unit-sum discrete disk: all offsets with i^2 + j^2 <= radius^2."""
    return disk_kernel_for_extent(disk_extent(radius))


def disk_kernel_for_extent(extent: int) -> np.ndarray:
    half = int(np.floor(np.sqrt(extent)))
    offsets = np.arange(-half, half + 1)
    inside = (offsets[:, None] ** 2 + offsets[None, :] ** 2) <= extent
    kernel = inside.astype(np.float64)
    return kernel / kernel.sum()


def defocus_radius(depth: float, depth_decay: float, max_radius: float = DEFOCUS_MAX_RADIUS) -> float:
    """Disk PSF radius: clamp(depth_decay / depth, 0, max_radius)."""
    require_positive(depth, "depth")
    return float(np.clip(depth_decay / depth, 0.0, max_radius))


def defocus_blur(t: Template, radius: float) -> Template:
    """
    Convolve with a normalized disk; the output grows so no mass is clipped.

    Radius 0 (and anything below 1) leaves the template unchanged.
    """
    kernel = disk_kernel(radius)
    if kernel.shape == (1, 1):
        return t
    return Template(signal.convolve2d(t.alpha, kernel, mode="full"))


def footprint(t: Template, base_size: int, depth: float, depth_decay: float) -> Template:
    """Template as drawn at `depth`: scaled, then defocused."""
    scaled = scale_by_depth(t, base_size, depth, depth_decay)
    return defocus_blur(scaled, defocus_radius(depth, depth_decay))


def footprint_key(base_size: int, depth: float, depth_decay: float) -> Tuple[int, int]:
    """(side, disk extent) of the footprint at `depth`; equal keys give equal footprints."""
    return scaled_side(base_size, depth, depth_decay), disk_extent(defocus_radius(depth, depth_decay))


def footprint_keys(base_size: int, depths: np.ndarray, depth_decay: float, min_depth: float = 0.0) -> np.ndarray:
    """
    footprint_key for many depths at once, as an (N, 2) integer array.

    Depths at or below `min_depth` (behind the camera) get the key (-1, -1).
    """
    depths = np.asarray(depths, dtype=np.float64)
    keys = np.full((len(depths), 2), -1, dtype=np.intp)
    ahead = depths > min_depth
    if not ahead.any():
        return keys
    d = depths[ahead]
    sides = 2 * np.floor((base_size * depth_decay / d - 1.0) / 2.0 + 0.5).astype(np.intp) + 1
    radii = np.clip(depth_decay / d, 0.0, DEFOCUS_MAX_RADIUS)
    keys[ahead, 0] = np.maximum(MIN_TEMPLATE_SIZE, sides)
    keys[ahead, 1] = np.floor(radii * radii).astype(np.intp)
    return keys


def footprint_size(side: int, extent: int) -> int:
    """Side of the defocused footprint: the full convolution grows by the disk diameter."""
    return side + 2 * int(np.floor(np.sqrt(extent)))


def footprint_window(t: Template, side: int, extent: int, rows: slice, cols: slice) -> np.ndarray:
    """
    Evaluate only rows x cols of the footprint identified by (side, extent).

    Matches footprint(...).alpha[rows, cols]; near-camera particles can have
    footprints far larger than the image, so callers crop before evaluating.
    """
    half = int(np.floor(np.sqrt(extent)))
    row_ids = np.arange(rows.start - 2 * half, rows.stop)
    col_ids = np.arange(cols.start - 2 * half, cols.stop)
    scaled = _scaled_grid(t.alpha, side, row_ids, col_ids)
    if half == 0:
        return scaled
    return signal.convolve2d(scaled, disk_kernel_for_extent(extent), mode="valid")


def _scaled_grid(alpha: np.ndarray, side: int, row_ids: np.ndarray, col_ids: np.ndarray) -> np.ndarray:
    """Depth-scaled template at integer output coordinates; zero outside [0, side)."""
    height, width = alpha.shape
    out = np.zeros((len(row_ids), len(col_ids)))
    row_ok = (row_ids >= 0) & (row_ids < side)
    col_ok = (col_ids >= 0) & (col_ids < side)
    if not row_ok.any() or not col_ok.any():
        return out
    rows_in, cols_in = row_ids[row_ok], col_ids[col_ok]
    if (side, side) == (height, width):
        values = alpha[np.ix_(rows_in, cols_in)]
    else:
        grid_rows, grid_cols = np.meshgrid(
            rows_in * (height - 1) / (side - 1), cols_in * (width - 1) / (side - 1), indexing="ij"
        )
        values = np.clip(ndimage.map_coordinates(alpha, [grid_rows, grid_cols], order=1, mode="nearest"), 0.0, 1.0)
    out[np.ix_(row_ok, col_ok)] = values
    return out


class FootprintCache:
    """
    Evaluated footprints of one template library, shared by every render of an attack.

    Footprints up to FOOTPRINT_CACHE_FULL_MAX texels per side are stored whole
    and cropped on lookup. Larger ones, which only near-camera particles
    have, are stored per image window. Entries are evicted least recently
    used first once the byte budget is exceeded. Values never depend on
    whether a lookup hit, so renders stay bitwise reproducible.
    """

    def __init__(self, templates: np.ndarray, budget_mb: int = FOOTPRINT_CACHE_MB) -> None:
        require_positive(budget_mb, "budget_mb")
        self.templates = templates
        self.max_bytes = int(budget_mb) * 1024 * 1024
        self.hits = 0
        self.misses = 0
        self._entries: "OrderedDict[Tuple[int, ...], np.ndarray]" = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def nbytes(self) -> int:
        return self._bytes

    def serves(self, templates: np.ndarray) -> bool:
        """Whether this cache was built for the given template library."""
        return templates is self.templates or (
            templates.shape == self.templates.shape and np.array_equal(templates, self.templates)
        )

    def window(self, index: int, side: int, extent: int, rows: slice, cols: slice) -> np.ndarray:
        """footprint_window of template `index`, read-only."""
        size = footprint_size(side, extent)
        if size <= FOOTPRINT_CACHE_FULL_MAX:
            whole = self._lookup((index, side, extent), slice(0, size), slice(0, size))
            return whole[rows, cols]
        key = (index, side, extent, rows.start, rows.stop, cols.start, cols.stop)
        return self._lookup(key, rows, cols)

    def _lookup(self, key: Tuple[int, ...], rows: slice, cols: slice) -> np.ndarray:
        with self._lock:
            cached = self._entries.get(key)
            if cached is not None:
                self._entries.move_to_end(key)
                self.hits += 1
                return cached
        index, side, extent = key[:3]
        alpha = footprint_window(Template(self.templates[index]), side, extent, rows, cols)
        alpha.setflags(write=False)
        with self._lock:
            self.misses += 1
            if key not in self._entries:
                self._entries[key] = alpha
                self._bytes += alpha.nbytes
                while self._bytes > self.max_bytes and len(self._entries) > 1:
                    _, evicted = self._entries.popitem(last=False)
                    self._bytes -= evicted.nbytes
        return alpha

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
            self._bytes = 0
