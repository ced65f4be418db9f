"""
Differentiable particle rendering: projection, soft occlusion, bilinear splatting and blending
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from scipy.special import expit

from config import config
from constants import BETA_DIFFERENTIATE, BETA_RENDER, PROJECTION_EPS
from particle_system import BLEND_MODES, Particle, ParticleSet
from scene_io import SceneBundle
from template_lib import FootprintCache, Template, footprint_keys, footprint_size
from utils.sampling import GRID_PAD, CompensatedAccumulator, bilinear_grid, pad_for_grid
from utils.validators import ContractError

logger = logging.getLogger(__name__)

RENDER_MODES = ("render", "differentiate")

Region = Tuple[slice, slice]
T = TypeVar("T")


@dataclass(frozen=True)
class RenderParams:
    """Occlusion sharpness and blend mode of one render call."""

    beta: float
    mode: str = "render"
    blend: str = "additive"

    def __post_init__(self) -> None:
        if not self.beta > 0:
            raise ContractError(f"beta must be > 0, got {self.beta}")
        if self.mode not in RENDER_MODES:
            raise ContractError(f"mode must be one of {RENDER_MODES}, got {self.mode!r}")
        if self.blend not in BLEND_MODES:
            raise ContractError(f"blend must be one of {BLEND_MODES}, got {self.blend!r}")

    @classmethod
    def rendering(cls, blend: str) -> "RenderParams":
        return cls(beta=BETA_RENDER, mode="render", blend=blend)

    @classmethod
    def differentiating(cls, blend: str) -> "RenderParams":
        return cls(beta=BETA_DIFFERENTIATE, mode="differentiate", blend=blend)


@dataclass(frozen=True)
class FootprintPlan:
    """
    Footprint identity (side, disk extent) per particle and frame.

    Rows follow the particle set's order; (-1, -1) marks a particle behind
    the camera. Footprints are piecewise constant in depth, so a plan frozen
    at one parameter value can be reused while parameters are nudged.
    """

    keys1: np.ndarray
    keys2: np.ndarray

    @classmethod
    def for_particles(cls, ps: ParticleSet) -> "FootprintPlan":
        cfg = ps.config
        return cls(
            keys1=footprint_keys(cfg.base_size, ps.depth1, cfg.depth_decay, min_depth=PROJECTION_EPS),
            keys2=footprint_keys(cfg.base_size, ps.depth2, cfg.depth_decay, min_depth=PROJECTION_EPS),
        )

    def __len__(self) -> int:
        return len(self.keys1)

    def take(self, order: np.ndarray) -> "FootprintPlan":
        return FootprintPlan(keys1=self.keys1[order], keys2=self.keys2[order])


@dataclass(frozen=True)
class RenderTape:
    """What backward needs: inputs in canonical order plus the pre-clamp images."""

    scene: SceneBundle = field(repr=False)
    particles: ParticleSet = field(repr=False)
    params: RenderParams
    plan: FootprintPlan = field(repr=False)
    pre_clamp: Tuple[np.ndarray, np.ndarray] = field(repr=False)
    cache: FootprintCache = field(repr=False)


@dataclass(frozen=True)
class RenderOutput:
    aug1: np.ndarray
    aug2: np.ndarray
    tape: RenderTape = field(repr=False)


@dataclass(frozen=True)
class ParticleGradients:
    """Loss gradients per parent particle, with color and transparency in value space."""

    offset1: np.ndarray
    offset2: np.ndarray
    color: np.ndarray
    transparency: np.ndarray

    @classmethod
    def zeros(cls, count: int) -> "ParticleGradients":
        return cls(np.zeros((count, 3)), np.zeros((count, 3)), np.zeros((count, 3)), np.zeros(count))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.offset1.ravel(), self.offset2.ravel(), self.color.ravel(), self.transparency])


# =============================================================================
# Elementary operations


def project_points(points: np.ndarray, intrinsics: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates and camera-frame depths of (N, 3) points; NaN pixels where z <= eps."""
    image = np.atleast_2d(points) @ intrinsics.T
    depth = np.atleast_2d(points)[:, 2]
    visible = depth > PROJECTION_EPS
    pixels = np.full((len(depth), 2), np.nan)
    pixels[visible] = image[visible, :2] / image[visible, 2:3]
    return pixels, depth


def project_particle(
    p: Particle, scene: SceneBundle
) -> Tuple[Optional[np.ndarray], Optional[np.ndarray], float, float]:
    """
    Project a particle and its motion-displaced position into both frames.

    Returns:
        Tuple of (pixel in frame 1, pixel in frame 2, d1, d2); a pixel is
        None when the point is at or behind the camera in that frame
    """
    relative = scene.relative_pose
    q1 = p.p1 + p.offset1
    q2 = relative[:3, :3] @ q1 + relative[:3, 3] + p.m + p.offset2
    pixels, depths = project_points(np.stack([q1, q2]), scene.intrinsics)
    first = pixels[0] if depths[0] > PROJECTION_EPS else None
    second = pixels[1] if depths[1] > PROJECTION_EPS else None
    return first, second, float(depths[0]), float(depths[1])


def visibility_map(d: float, depth_crop: np.ndarray, beta: float) -> np.ndarray:
    """Soft occlusion 1 / (1 + exp(beta (d - D))); expit saturates instead of overflowing."""
    return expit(beta * (np.asarray(depth_crop, dtype=np.float64) - d))


def splat_image(
    shape: Tuple[int, int],
    texels: np.ndarray,
    corner: Tuple[int, int],
    frac: Tuple[float, float],
) -> Optional[Tuple[Region, np.ndarray]]:
    """
    Bilinear splat of a texel grid whose texel (0, 0) sits at corner + frac.

    Args:
        shape: (H, W) of the target image
        texels: Array (h, w) or (h, w, C)
        corner: Integer (row, column) of the pixel left-above texel (0, 0)
        frac: Subpixel (row, column) offset in [0, 1)

    Returns:
        The image region hit and the patch to add there, or None if the
        texels land entirely outside the image
    """
    height, width = shape
    rows, cols = texels.shape[:2]
    fy, fx = frac
    y0, x0 = corner
    patch = np.zeros((rows + 1, cols + 1) + texels.shape[2:])
    patch[:rows, :cols] += (1.0 - fy) * (1.0 - fx) * texels
    patch[:rows, 1:] += (1.0 - fy) * fx * texels
    patch[1:, :cols] += fy * (1.0 - fx) * texels
    patch[1:, 1:] += fy * fx * texels

    r_lo, r_hi = max(0, -y0), min(rows + 1, height - y0)
    c_lo, c_hi = max(0, -x0), min(cols + 1, width - x0)
    if r_lo >= r_hi or c_lo >= c_hi:
        return None
    region = (slice(y0 + r_lo, y0 + r_hi), slice(x0 + c_lo, x0 + c_hi))
    return region, patch[r_lo:r_hi, c_lo:c_hi]


def splat(
    accumulator: CompensatedAccumulator,
    template: Template,
    center: Sequence[float],
    weight_map: Union[np.ndarray, float] = 1.0,
) -> CompensatedAccumulator:
    """Add template * weight_map, anchored at a subpixel center, into an accumulator."""
    anchor_row, anchor_col = template.anchor
    cx, cy = float(center[0]), float(center[1])
    base_x, base_y = np.floor(cx), np.floor(cy)
    splatted = splat_image(
        accumulator.total.shape[:2],
        template.alpha * weight_map,
        (int(base_y) - anchor_row, int(base_x) - anchor_col),
        (cy - base_y, cx - base_x),
    )
    if splatted is not None:
        accumulator.add(*splatted)
    return accumulator


def _window(image: np.ndarray, corner: Tuple[int, int], size: Tuple[int, int]) -> np.ndarray:
    """image[corner : corner + size] with zeros outside the image."""
    out = np.zeros(size + image.shape[2:])
    y0, x0 = corner
    r_lo, r_hi = max(0, -y0), min(size[0], image.shape[0] - y0)
    c_lo, c_hi = max(0, -x0), min(size[1], image.shape[1] - x0)
    if r_lo < r_hi and c_lo < c_hi:
        out[r_lo:r_hi, c_lo:c_hi] = image[y0 + r_lo:y0 + r_hi, x0 + c_lo:x0 + c_hi]
    return out


# =============================================================================
# Per-particle footprint with visibility


@dataclass
class _Footprint:
    """One particle's cropped footprint in one frame."""

    corner: Tuple[int, int]
    frac: Tuple[float, float]
    alpha: np.ndarray
    visibility: np.ndarray
    depth_dx: Optional[np.ndarray]
    depth_dy: Optional[np.ndarray]

    @property
    def weights(self) -> np.ndarray:
        return self.alpha * self.visibility


def _prepare(
    cache: FootprintCache,
    template_index: int,
    key: np.ndarray,
    center: np.ndarray,
    depth: float,
    padded_depth: np.ndarray,
    beta: float,
    derivatives: bool = False,
) -> Optional[_Footprint]:
    """
    Crop the footprint to the texels that can reach the image and evaluate V there.

    `padded_depth` is the frame's depth map after pad_for_grid; scene-depth
    derivatives are only evaluated when `derivatives` is set.
    """
    side, extent = int(key[0]), int(key[1])
    if side < 0 or depth <= PROJECTION_EPS:
        return None
    height, width = padded_depth.shape[0] - 2 * GRID_PAD, padded_depth.shape[1] - 2 * GRID_PAD
    size = footprint_size(side, extent)
    anchor = (size - 1) // 2
    cx, cy = float(center[0]), float(center[1])
    base_x, base_y = np.floor(cx), np.floor(cy)
    origin_x = int(base_x) - anchor
    origin_y = int(base_y) - anchor

    # Texel j reaches pixels origin + j and origin + j + 1
    c0, c1 = max(0, -origin_x - 1), min(size, width - origin_x)
    r0, r1 = max(0, -origin_y - 1), min(size, height - origin_y)
    if c0 >= c1 or r0 >= r1:
        return None

    alpha = cache.window(int(template_index), side, extent, slice(r0, r1), slice(c0, c1))
    corner = (origin_y + r0, origin_x + c0)
    frac = (cy - base_y, cx - base_x)
    # Texel j sits at pixel corner + j + frac, so the depth lookup is a shifted grid
    scene_depth, depth_dx, depth_dy = bilinear_grid(padded_depth, corner, alpha.shape, frac, derivatives)
    return _Footprint(
        corner=corner,
        frac=frac,
        alpha=alpha,
        visibility=visibility_map(depth, scene_depth, beta),
        depth_dx=depth_dx,
        depth_dy=depth_dy,
    )


# =============================================================================
# Render and backward


def canonical_order(ps: ParticleSet) -> np.ndarray:
    """Lexicographic order over every per-particle field; identical for any permutation of the list."""
    columns = np.column_stack([
        ps.positions, ps.motion, ps.offset1, ps.offset2, ps.color,
        ps.transparency, ps.template_index, ps.blur_offset,
    ])
    return np.lexsort(columns.T[::-1])


def _frame_points(ps: ParticleSet, scene: SceneBundle) -> Tuple[np.ndarray, np.ndarray]:
    relative = scene.relative_pose
    if not np.allclose(ps.relative_pose, relative, rtol=0.0, atol=1e-9):
        raise ContractError("particle set was sampled for a different camera motion")
    points1 = ps.frame1_points()
    points2 = points1 @ relative[:3, :3].T + relative[:3, 3] + ps.motion + ps.offset2
    return points1, points2


def _chunked(count: int, work: Callable[[range], T]) -> List[T]:
    """Run work over fixed-size chunks; results come back in chunk order whatever the worker count."""
    size = config.chunk_size()
    chunks = [range(start, min(start + size, count)) for start in range(0, count, size)]
    workers = config.worker_count()
    if workers == 1 or len(chunks) <= 1:
        return [work(chunk) for chunk in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, chunks))


def render(
    scene: SceneBundle,
    ps: ParticleSet,
    params: RenderParams,
    plan: Optional[FootprintPlan] = None,
    cache: Optional[FootprintCache] = None,
) -> RenderOutput:
    """
    Render a particle set into both frames.

    Per frame, two commutative sums are formed, S = sum theta A and
    C = sum gamma theta A, where A is the splatted visibility-weighted
    footprint. Additive: I + C. Meshkin: I (1 - S) + C. The result is
    clamped to [0, 1] once at the end.

    Args:
        scene: Frames, depths and cameras
        ps: Particle set, motion-blur expanded if the effect uses blur
        params: Occlusion sharpness and blend mode
        plan: Footprint plan in the order of `ps`; computed from the current depths if omitted
        cache: Evaluated footprints to reuse across calls; a fresh one is used if omitted

    Returns:
        RenderOutput with both augmented frames and a tape for backward
    """
    if plan is None:
        plan = FootprintPlan.for_particles(ps)
    elif len(plan) != len(ps):
        raise ContractError(f"footprint plan has {len(plan)} rows for {len(ps)} particles")
    if cache is None:
        cache = FootprintCache(ps.templates)
    elif not cache.serves(ps.templates):
        raise ContractError("footprint cache was built for a different template library")

    order = canonical_order(ps)
    ordered = ps.permuted(order)
    ordered_plan = plan.take(order)
    points = _frame_points(ordered, scene)
    intrinsics = scene.intrinsics

    images = []
    pre_clamp = []
    for frame, (image, depth_map, keys, frame_points) in enumerate(
        zip(scene.frames(), scene.depths(), (ordered_plan.keys1, ordered_plan.keys2), points), start=1
    ):
        pixels, depths = project_points(frame_points, intrinsics)
        shape = depth_map.shape
        padded_depth = pad_for_grid(depth_map)

        def accumulate(chunk: range) -> Tuple[np.ndarray, np.ndarray]:
            coverage = CompensatedAccumulator(shape)
            color = CompensatedAccumulator(shape + (3,))
            for j in chunk:
                fp = _prepare(
                    cache, ordered.template_index[j], keys[j], pixels[j], depths[j], padded_depth, params.beta
                )
                if fp is None:
                    continue
                splatted = splat_image(shape, fp.weights, fp.corner, fp.frac)
                if splatted is None:
                    continue
                region, patch = splatted
                weighted = ordered.transparency[j] * patch
                coverage.add(region, weighted)
                color.add(region, weighted[..., None] * ordered.color[j])
            return coverage.value(), color.value()

        coverage_total = CompensatedAccumulator(shape)
        color_total = CompensatedAccumulator(shape + (3,))
        full = (slice(None), slice(None))
        for coverage, color in _chunked(len(ordered), accumulate):
            coverage_total.add(full, coverage)
            color_total.add(full, color)

        if params.blend == "additive":
            blended = image + color_total.value()
        else:
            blended = image * (1.0 - coverage_total.value()[..., None]) + color_total.value()
        pre_clamp.append(blended)
        images.append(np.clip(blended, 0.0, 1.0))
        logger.debug(f"Rendered frame {frame}: {len(ordered)} particles, beta {params.beta}, {params.blend}")

    logger.debug(f"Footprint cache: {len(cache)} entries, {cache.hits} hits, {cache.misses} misses")
    tape = RenderTape(
        scene=scene, particles=ordered, params=params, plan=ordered_plan,
        pre_clamp=(pre_clamp[0], pre_clamp[1]), cache=cache,
    )
    return RenderOutput(aug1=images[0], aug2=images[1], tape=tape)


def _particle_backward(
    fp: _Footprint,
    upstream: np.ndarray,
    color: np.ndarray,
    transparency: float,
    beta: float,
) -> Tuple[float, float, float, np.ndarray, float]:
    """
    Adjoint of one splat.

    Args:
        upstream: (H, W, 4) image of [dL/dC (3 channels), dL/dS]

    Returns:
        (d/dcx, d/dcy, d/ddepth, d/dcolor, d/dtransparency)
    """
    if fp.depth_dx is None or fp.depth_dy is None:
        raise ContractError("footprint was prepared without scene-depth derivatives")
    rows, cols = fp.alpha.shape
    fy, fx = fp.frac
    window = _window(upstream, fp.corner, (rows + 1, cols + 1))
    gathered = (
        (1.0 - fy) * (1.0 - fx) * window[:rows, :cols]
        + (1.0 - fy) * fx * window[:rows, 1:]
        + fy * (1.0 - fx) * window[1:, :cols]
        + fy * fx * window[1:, 1:]
    )
    weights = fp.weights
    mixed = gathered[..., :3] @ color + gathered[..., 3]
    d_transparency = float(np.sum(weights * mixed))
    d_color = transparency * np.einsum("ij,ijc->c", weights, gathered[..., :3])

    # Bilinear splat weights depend on the subpixel center
    r = transparency * (window[..., :3] @ color + window[..., 3])
    d_fx = np.sum(weights * ((1.0 - fy) * (r[:rows, 1:] - r[:rows, :cols]) + fy * (r[1:, 1:] - r[1:, :cols])))
    d_fy = np.sum(weights * ((1.0 - fx) * (r[1:, :cols] - r[:rows, :cols]) + fx * (r[1:, 1:] - r[:rows, 1:])))

    # Visibility depends on the particle depth and on the scene depth under each texel
    sigmoid_slope = transparency * mixed * fp.alpha * beta * fp.visibility * (1.0 - fp.visibility)
    d_cx = float(d_fx + np.sum(sigmoid_slope * fp.depth_dx))
    d_cy = float(d_fy + np.sum(sigmoid_slope * fp.depth_dy))
    d_depth = float(-np.sum(sigmoid_slope))
    return d_cx, d_cy, d_depth, d_color, d_transparency


def backward(tape: RenderTape, grad_aug1: np.ndarray, grad_aug2: np.ndarray) -> ParticleGradients:
    """
    Reverse-mode gradients of a scalar loss through render.

    The clamp passes gradient where the pre-clamp value lies strictly inside
    (0, 1). Motion-blur replicas sum into their parent; the transparency
    gradient is with respect to the parent's value, replicas carry 1/K of it.

    Raises:
        ContractError: If the tape was not recorded for differentiation or
            the gradient images do not match the frames
    """
    if tape.params.mode != "differentiate":
        raise ContractError(f"backward needs a tape recorded in differentiate mode, got {tape.params.mode!r}")
    scene, ps, params = tape.scene, tape.particles, tape.params
    shape = scene.frame1.shape
    grads = (np.asarray(grad_aug1, dtype=np.float64), np.asarray(grad_aug2, dtype=np.float64))
    for grad in grads:
        if grad.shape != shape:
            raise ContractError(f"gradient image has shape {grad.shape}, expected {shape}")

    points = _frame_points(ps, scene)
    intrinsics = scene.intrinsics
    relative_rotation = scene.relative_pose[:3, :3]
    count = len(ps)
    d_points = [np.zeros((count, 3)), np.zeros((count, 3))]
    d_color = np.zeros((count, 3))
    d_transparency = np.zeros(count)

    for frame_index, (image, depth_map, keys, frame_points, grad, pre_clamp) in enumerate(zip(
        scene.frames(), scene.depths(), (tape.plan.keys1, tape.plan.keys2), points, grads, tape.pre_clamp
    )):
        if not np.any(grad):
            continue
        grad_color = grad * ((pre_clamp > 0.0) & (pre_clamp < 1.0))
        if params.blend == "additive":
            grad_coverage = np.zeros(shape[:2])
        else:
            grad_coverage = -np.sum(grad_color * image, axis=2)
        upstream = np.concatenate([grad_color, grad_coverage[..., None]], axis=2)
        pixels, depths = project_points(frame_points, intrinsics)
        padded_depth = pad_for_grid(depth_map)
        homogeneous = frame_points @ intrinsics[2]
        target = d_points[frame_index]

        def propagate(chunk: range) -> None:
            for j in chunk:
                fp = _prepare(
                    tape.cache, ps.template_index[j], keys[j], pixels[j], depths[j], padded_depth, params.beta,
                    derivatives=True,
                )
                if fp is None:
                    continue
                d_cx, d_cy, d_depth, grad_gamma, grad_theta = _particle_backward(
                    fp, upstream, ps.color[j], ps.transparency[j], params.beta
                )
                cx, cy = pixels[j]
                row_x = (intrinsics[0] - cx * intrinsics[2]) / homogeneous[j]
                row_y = (intrinsics[1] - cy * intrinsics[2]) / homogeneous[j]
                target[j] = d_cx * row_x + d_cy * row_y + np.array([0.0, 0.0, d_depth])
                d_color[j] += grad_gamma
                d_transparency[j] += grad_theta

        # Each chunk writes disjoint rows, so the outcome does not depend on scheduling
        _chunked(count, propagate)

    # q1 = p1 + s (m + offset2) + offset1, q2 = R q1 + t + m + offset2
    through_first = d_points[0] + d_points[1] @ relative_rotation
    entry_offset1 = through_first
    entry_offset2 = ps.blur_offset[:, None] * through_first + d_points[1]

    divisor = ps.config.blur_particles if ps.expanded else 1
    out = ParticleGradients.zeros(ps.parent_count)
    np.add.at(out.offset1, ps.parent, entry_offset1)
    np.add.at(out.offset2, ps.parent, entry_offset2)
    np.add.at(out.color, ps.parent, d_color)
    np.add.at(out.transparency, ps.parent, d_transparency / divisor)
    return out


# =============================================================================
# Debug output


def write_debug_csv(path: Union[str, Path], scene: SceneBundle, ps: ParticleSet, params: RenderParams) -> None:
    """One row per particle: id, both projections, both depths and the mean visibility over its footprint."""
    plan = FootprintPlan.for_particles(ps)
    cache = FootprintCache(ps.templates)
    padded = [pad_for_grid(depth_map) for depth_map in scene.depths()]
    missing = np.full(2, np.nan)

    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(["id", "p1_x", "p1_y", "p2_x", "p2_y", "d1", "d2", "mean_v1", "mean_v2"])
        for j, particle in enumerate(ps):
            pixel1, pixel2, d1, d2 = project_particle(particle, scene)
            means = []
            for pixel, depth, keys, padded_depth in zip((pixel1, pixel2), (d1, d2), (plan.keys1, plan.keys2), padded):
                fp = None
                if pixel is not None:
                    fp = _prepare(cache, particle.template, keys[j], pixel, depth, padded_depth, params.beta)
                means.append(float(np.mean(fp.visibility)) if fp is not None else float("nan"))
            p1 = pixel1 if pixel1 is not None else missing
            p2 = pixel2 if pixel2 is not None else missing
            writer.writerow([j, p1[0], p1[1], p2[0], p2[1], d1, d2, means[0], means[1]])
    logger.info(f"Wrote per-particle debug dump for {len(ps)} particles to {path}")
