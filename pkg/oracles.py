"""
Reference implementations for checking the engine: loop-based rendering and finite differences

Nothing here imports the renderer; naive_render re-derives every step with
explicit per-texel loops.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from constants import (
    FD_ABS_FLOOR,
    FD_REL_TOL,
    FD_STEP_ETA,
    FD_STEP_POSITION,
    ORACLE_MAX_PARTICLES,
    ORACLE_MAX_SIDE,
    PROJECTION_EPS,
)
from particle_system import ParticleSet
from scene_io import SceneBundle
from template_lib import footprint
from utils.validators import ContractError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleTolerance:
    """Finite-difference steps and the pass criterion for gradient checks."""

    fd_step_position: float = FD_STEP_POSITION
    fd_step_eta: float = FD_STEP_ETA
    rel_tol: float = FD_REL_TOL
    abs_floor: float = FD_ABS_FLOOR
    richardson: bool = True  # Extrapolate every difference from two step sizes

    def __post_init__(self) -> None:
        for name in ("fd_step_position", "fd_step_eta", "rel_tol", "abs_floor"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be > 0")

    def relative_error(self, analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
        """|a - n| / max(|a|, |n|, abs_floor), elementwise."""
        analytic = np.asarray(analytic, dtype=np.float64)
        numeric = np.asarray(numeric, dtype=np.float64)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), self.abs_floor)
        return np.abs(analytic - numeric) / scale

    def passes(self, analytic: np.ndarray, numeric: np.ndarray) -> bool:
        return bool(np.all(self.relative_error(analytic, numeric) <= self.rel_tol))


def fd_gradient(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    step: float,
    indices: Optional[Sequence[int]] = None,
    richardson: bool = False,
) -> np.ndarray:
    """
    Central-difference gradient of loss_fn at params.

    With `richardson`, central differences at step and step / 2 are combined
    as (4 D(step / 2) - D(step)) / 3, which cancels the step^2 error term.

    Args:
        loss_fn: Deterministic function of a flat parameter vector
        params: Point of evaluation (flattened)
        step: Difference step
        indices: Coordinates to differentiate; all of them if omitted
        richardson: Extrapolate from two step sizes

    Returns:
        Array with one entry per requested coordinate
    """
    x0 = np.asarray(params, dtype=np.float64).ravel()
    coordinates = range(len(x0)) if indices is None else list(indices)
    logger.debug(
        f"Finite differences over {len(coordinates)} of {len(x0)} coordinates, step {step}"
        f"{', Richardson-extrapolated' if richardson else ''}"
    )

    def central(j: int, h: float) -> float:
        x = x0.copy()
        x[j] = x0[j] + h
        f_plus = loss_fn(x)
        x[j] = x0[j] - h
        f_minus = loss_fn(x)
        return (f_plus - f_minus) / (2.0 * h)

    grad = np.zeros(len(coordinates))
    for out, j in enumerate(coordinates):
        coarse = central(j, step)
        grad[out] = (4.0 * central(j, step / 2.0) - coarse) / 3.0 if richardson else coarse
    return grad


# =============================================================================
# Loop-based rendering


def _depth_at(depth_map: np.ndarray, x: float, y: float) -> float:
    """Bilinear depth lookup with coordinates clamped to the image."""
    height, width = depth_map.shape
    x = min(max(x, 0.0), width - 1.0)
    y = min(max(y, 0.0), height - 1.0)
    x0 = min(int(math.floor(x)), max(width - 2, 0))
    y0 = min(int(math.floor(y)), max(height - 2, 0))
    x1, y1 = min(x0 + 1, width - 1), min(y0 + 1, height - 1)
    fx, fy = x - x0, y - y0
    top = (1.0 - fx) * depth_map[y0, x0] + fx * depth_map[y0, x1]
    bottom = (1.0 - fx) * depth_map[y1, x0] + fx * depth_map[y1, x1]
    return (1.0 - fy) * top + fy * bottom


def _sigmoid_visibility(beta: float, particle_depth: float, scene_depth: float) -> float:
    exponent = beta * (particle_depth - scene_depth)
    if exponent > 700.0:
        return 0.0
    return 1.0 / (1.0 + math.exp(exponent))


def naive_render(scene: SceneBundle, ps: ParticleSet, params) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render with explicit loops over particles, texels and pixel corners.

    Args:
        scene: At most 64x64
        ps: At most 50 particles, expanded or not
        params: Anything with `beta` and `blend` attributes

    Returns:
        Tuple of (aug1, aug2)

    Raises:
        ContractError: If the inputs exceed the size guard
    """
    if max(scene.height, scene.width) > ORACLE_MAX_SIDE or len(ps) > ORACLE_MAX_PARTICLES:
        raise ContractError(
            f"naive_render is limited to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE} images and "
            f"{ORACLE_MAX_PARTICLES} particles"
        )
    cfg = ps.config
    intrinsics = scene.intrinsics
    relative = scene.relative_pose
    height, width = scene.height, scene.width

    outputs: List[np.ndarray] = []
    for frame, (image, depth_map) in enumerate(zip(scene.frames(), scene.depths()), start=1):
        coverage = np.zeros((height, width))
        color = np.zeros((height, width, 3))
        for j in range(len(ps)):
            particle = ps[j]
            point = particle.p1 + particle.offset1
            if frame == 2:
                point = relative[:3, :3] @ point + relative[:3, 3] + particle.m + particle.offset2
            depth = float(point[2])
            if depth <= PROJECTION_EPS:
                continue
            homogeneous = intrinsics @ point
            u, v = homogeneous[0] / homogeneous[2], homogeneous[1] / homogeneous[2]

            alpha = footprint(ps.template(j), cfg.base_size, depth, cfg.depth_decay).alpha
            anchor_row, anchor_col = (alpha.shape[0] - 1) // 2, (alpha.shape[1] - 1) // 2
            for row in range(alpha.shape[0]):
                y = v + (row - anchor_row)
                y0 = math.floor(y)
                if y0 + 1 < 0 or y0 > height - 1:
                    continue
                for col in range(alpha.shape[1]):
                    x = u + (col - anchor_col)
                    x0 = math.floor(x)
                    if x0 + 1 < 0 or x0 > width - 1:
                        continue
                    visibility = _sigmoid_visibility(params.beta, depth, _depth_at(depth_map, x, y))
                    value = particle.transparency * alpha[row, col] * visibility
                    fx, fy = x - x0, y - y0
                    for yy, xx, weight in (
                        (y0, x0, (1.0 - fx) * (1.0 - fy)),
                        (y0, x0 + 1, fx * (1.0 - fy)),
                        (y0 + 1, x0, (1.0 - fx) * fy),
                        (y0 + 1, x0 + 1, fx * fy),
                    ):
                        if 0 <= yy < height and 0 <= xx < width:
                            coverage[yy, xx] += weight * value
                            for c in range(3):
                                color[yy, xx, c] += weight * value * particle.color[c]

        if params.blend == "additive":
            blended = image + color
        else:
            blended = image * (1.0 - coverage[..., None]) + color
        outputs.append(np.clip(blended, 0.0, 1.0))
    return outputs[0], outputs[1]
