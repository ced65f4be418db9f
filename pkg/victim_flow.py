"""
Victim optical flow: coarse-to-fine Horn-Schunck with an exact reverse-mode pass
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from constants import (
    GRAY_WEIGHTS,
    HS_DOWNSCALE,
    HS_ITERATIONS,
    HS_LEVELS,
    HS_MIN_LEVEL_SIZE,
    HS_SMOOTHNESS,
    OutputNames,
)
from scene_io import FlowField, read_flo
from utils.sampling import bilinear_sample, bilinear_scatter
from utils.validators import ContractError, require_image, require_same_shape

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FlowEstimatorConfig:
    """Horn-Schunck settings: smoothness lambda, pyramid depth and a fixed iteration count."""

    smoothness: float = HS_SMOOTHNESS
    pyramid_levels: int = HS_LEVELS
    iterations_per_level: int = HS_ITERATIONS
    downscale_factor: float = HS_DOWNSCALE

    def __post_init__(self) -> None:
        if not self.smoothness > 0:
            raise ContractError(f"smoothness must be > 0, got {self.smoothness}")
        if self.pyramid_levels < 1:
            raise ContractError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if self.iterations_per_level < 1:
            raise ContractError(f"iterations_per_level must be >= 1, got {self.iterations_per_level}")
        if self.downscale_factor != HS_DOWNSCALE:
            raise ContractError(f"only a downscale factor of {HS_DOWNSCALE} is supported")

    def levels_for(self, height: int, width: int) -> int:
        """Pyramid depth actually used: the coarsest level keeps at least 8x8 pixels."""
        levels = 1
        while levels < self.pyramid_levels and min(
            _halved(height, levels), _halved(width, levels)
        ) >= HS_MIN_LEVEL_SIZE:
            levels += 1
        if levels < self.pyramid_levels:
            logger.warning(
                f"Using {levels} pyramid levels instead of {self.pyramid_levels} for a {width}x{height} image"
            )
        return levels


def _halved(size: int, times: int) -> int:
    for _ in range(times):
        size = (size + 1) // 2
    return size


# =============================================================================
# Linear building blocks (each with its adjoint)


def to_gray(image: np.ndarray) -> np.ndarray:
    return image @ np.asarray(GRAY_WEIGHTS)


def downsample_matrix(size: int) -> np.ndarray:
    """(ceil(size/2), size) matrix averaging pixel pairs; an odd last pixel is replicated."""
    coarse = (size + 1) // 2
    matrix = np.zeros((coarse, size))
    for i in range(coarse):
        matrix[i, 2 * i] += 0.5
        matrix[i, min(2 * i + 1, size - 1)] += 0.5
    return matrix


def upsample_matrix(coarse: int, fine: int) -> np.ndarray:
    """(fine, coarse) bilinear interpolation matrix, pixel centers aligned, borders clamped."""
    positions = np.clip((np.arange(fine) + 0.5) / 2.0 - 0.5, 0.0, coarse - 1)
    matrix = np.zeros((fine, coarse))
    lower = np.minimum(np.floor(positions).astype(np.intp), max(coarse - 2, 0))
    frac = positions - lower if coarse > 1 else np.zeros(fine)
    rows = np.arange(fine)
    matrix[rows, lower] += 1.0 - frac
    matrix[rows, np.minimum(lower + 1, coarse - 1)] += frac
    return matrix


def _neighbors(size: int) -> Tuple[np.ndarray, np.ndarray]:
    index = np.arange(size)
    return np.maximum(index - 1, 0), np.minimum(index + 1, size - 1)


def neighbor_average(field_: np.ndarray) -> np.ndarray:
    """4-neighbor mean with replicated borders."""
    up, down = _neighbors(field_.shape[0])
    left, right = _neighbors(field_.shape[1])
    return 0.25 * (field_[up] + field_[down] + field_[:, left] + field_[:, right])


def neighbor_average_adjoint(grad: np.ndarray) -> np.ndarray:
    up, down = _neighbors(grad.shape[0])
    left, right = _neighbors(grad.shape[1])
    out = np.zeros_like(grad)
    np.add.at(out, up, 0.25 * grad)
    np.add.at(out, down, 0.25 * grad)
    np.add.at(out, (slice(None), left), 0.25 * grad)
    np.add.at(out, (slice(None), right), 0.25 * grad)
    return out


def central_gradients(image: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Central differences with replicate padding: (d/dx, d/dy)."""
    up, down = _neighbors(image.shape[0])
    left, right = _neighbors(image.shape[1])
    return 0.5 * (image[:, right] - image[:, left]), 0.5 * (image[down] - image[up])


def central_gradients_adjoint(grad_x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    up, down = _neighbors(grad_x.shape[0])
    left, right = _neighbors(grad_x.shape[1])
    out = np.zeros_like(grad_x)
    np.add.at(out, (slice(None), right), 0.5 * grad_x)
    np.add.at(out, (slice(None), left), -0.5 * grad_x)
    np.add.at(out, down, 0.5 * grad_y)
    np.add.at(out, up, -0.5 * grad_y)
    return out


# =============================================================================
# Estimation


@dataclass
class _Level:
    """Everything one pyramid level needs to be differentiated."""

    gray1: np.ndarray
    gray2: np.ndarray
    init_flow: np.ndarray  # upsampled coarse flow, (h, w, 2)
    warp_x: np.ndarray
    warp_y: np.ndarray
    warp_dx: np.ndarray
    warp_dy: np.ndarray
    ix: np.ndarray
    iy: np.ndarray
    it: np.ndarray
    averages: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class FlowTape:
    """Recorded forward pass of estimate_flow."""

    config: FlowEstimatorConfig
    shape: Tuple[int, int]
    levels: List[_Level] = field(repr=False)
    down_rows: List[np.ndarray] = field(repr=False)
    down_cols: List[np.ndarray] = field(repr=False)


def _iterate(level: _Level, smoothness: float, iterations: int, record: bool) -> np.ndarray:
    """
    Horn-Schunck sweeps on one level, solving for the increment over the upsampled coarser flow.

    The smoothness term acts on that increment, not on the total flow: the
    neighbor averages start from zero at every level, so structure carried
    up from coarser levels is never smoothed again.
    """
    den = smoothness ** 2 + level.ix ** 2 + level.iy ** 2
    du = np.zeros_like(level.ix)
    dv = np.zeros_like(level.ix)
    for _ in range(iterations):
        u_avg, v_avg = neighbor_average(du), neighbor_average(dv)
        if record:
            level.averages.append((u_avg, v_avg))
        residual = (level.ix * u_avg + level.iy * v_avg + level.it) / den
        du = u_avg - level.ix * residual
        dv = v_avg - level.iy * residual
    return np.stack([du, dv], axis=-1)


def _run(
    image1: np.ndarray, image2: np.ndarray, cfg: FlowEstimatorConfig, record: bool
) -> Tuple[FlowField, Optional[FlowTape]]:
    image1 = require_image(image1, "I1")
    image2 = require_image(image2, "I2")
    require_same_shape(image1, image2, "images")
    height, width = image1.shape[:2]
    levels = cfg.levels_for(height, width)

    pyramid1, pyramid2 = [to_gray(image1)], [to_gray(image2)]
    down_rows, down_cols = [], []
    for _ in range(levels - 1):
        rows = downsample_matrix(pyramid1[-1].shape[0])
        cols = downsample_matrix(pyramid1[-1].shape[1])
        down_rows.append(rows)
        down_cols.append(cols)
        pyramid1.append(rows @ pyramid1[-1] @ cols.T)
        pyramid2.append(rows @ pyramid2[-1] @ cols.T)

    records: List[_Level] = []
    flow = np.zeros(pyramid1[-1].shape + (2,))
    for index in reversed(range(levels)):
        gray1, gray2 = pyramid1[index], pyramid2[index]
        h, w = gray1.shape
        if flow.shape[:2] != (h, w):
            flow = upsample_flow(flow, h, w)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        warp_x, warp_y = xs + flow[..., 0], ys + flow[..., 1]
        warped, warp_dx, warp_dy = bilinear_sample(gray2, warp_x, warp_y)
        ix, iy = central_gradients(0.5 * (gray1 + warped))
        level = _Level(
            gray1=gray1, gray2=gray2, init_flow=flow, warp_x=warp_x, warp_y=warp_y,
            warp_dx=warp_dx, warp_dy=warp_dy, ix=ix, iy=iy, it=warped - gray1,
        )
        flow = flow + _iterate(level, cfg.smoothness, cfg.iterations_per_level, record)
        records.append(level)

    result = FlowField(flow)
    if not record:
        return result, None
    return result, FlowTape(config=cfg, shape=(height, width), levels=records, down_rows=down_rows, down_cols=down_cols)


def upsample_flow(flow: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear x2 upsampling of a coarse flow; vectors are doubled."""
    rows = upsample_matrix(flow.shape[0], height)
    cols = upsample_matrix(flow.shape[1], width)
    return 2.0 * np.stack([rows @ flow[..., c] @ cols.T for c in range(2)], axis=-1)


def estimate_flow(image1: np.ndarray, image2: np.ndarray, cfg: Optional[FlowEstimatorConfig] = None) -> FlowField:
    """
    Predict the flow from image1 to image2.

    Args:
        image1, image2: RGB images (H, W, 3) in [0, 1]
        cfg: Estimator settings, defaults to lambda 0.1, 3 levels, 100 iterations

    Returns:
        FlowField of shape (H, W, 2)

    Raises:
        ContractError: If the images differ in size
    """
    flow, _ = _run(image1, image2, cfg or FlowEstimatorConfig(), record=False)
    return flow


def estimate_flow_recorded(
    image1: np.ndarray, image2: np.ndarray, cfg: Optional[FlowEstimatorConfig] = None
) -> Tuple[FlowField, FlowTape]:
    """estimate_flow plus the tape flow_backward needs."""
    flow, tape = _run(image1, image2, cfg or FlowEstimatorConfig(), record=True)
    assert tape is not None
    return flow, tape


def _level_backward(level: _Level, grad_flow: np.ndarray, smoothness: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (gray1, gray2, init_flow) of one level."""
    ix, iy, it = level.ix, level.iy, level.it
    den = smoothness ** 2 + ix ** 2 + iy ** 2
    grad_u, grad_v = grad_flow[..., 0].copy(), grad_flow[..., 1].copy()
    grad_ix = np.zeros_like(ix)
    grad_iy = np.zeros_like(ix)
    grad_it = np.zeros_like(ix)

    for u_avg, v_avg in reversed(level.averages):
        numerator = ix * u_avg + iy * v_avg + it
        residual = numerator / den
        grad_r = -(ix * grad_u + iy * grad_v)
        grad_ix += -residual * grad_u + grad_r * (u_avg / den - 2.0 * ix * numerator / den ** 2)
        grad_iy += -residual * grad_v + grad_r * (v_avg / den - 2.0 * iy * numerator / den ** 2)
        grad_it += grad_r / den
        grad_u = neighbor_average_adjoint(grad_u + ix * grad_r / den)
        grad_v = neighbor_average_adjoint(grad_v + iy * grad_r / den)

    grad_mean = central_gradients_adjoint(grad_ix, grad_iy)
    grad_warped = 0.5 * grad_mean + grad_it
    grad_gray1 = 0.5 * grad_mean - grad_it
    grad_gray2 = bilinear_scatter(level.gray2.shape, level.warp_x, level.warp_y, grad_warped)
    grad_init = grad_flow + np.stack([grad_warped * level.warp_dx, grad_warped * level.warp_dy], axis=-1)
    return grad_gray1, grad_gray2, grad_init


def flow_backward(tape: FlowTape, grad_flow: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gradients of a scalar loss w.r.t. both input images.

    Args:
        tape: From estimate_flow_recorded
        grad_flow: dL/dflow, shape (H, W, 2)

    Returns:
        Tuple of (dL/dI1, dL/dI2), each (H, W, 3)
    """
    grad_flow = np.asarray(grad_flow, dtype=np.float64)
    if grad_flow.shape != tape.shape + (2,):
        raise ContractError(f"flow gradient has shape {grad_flow.shape}, expected {tape.shape + (2,)}")

    count = len(tape.levels)
    grads1: List[np.ndarray] = [np.zeros(0)] * count
    grads2: List[np.ndarray] = [np.zeros(0)] * count
    grad = grad_flow
    # Records run coarse to fine; pyramid index = count - 1 - record index
    for record_index in reversed(range(count)):
        level = tape.levels[record_index]
        grad_gray1, grad_gray2, grad_init = _level_backward(level, grad, tape.config.smoothness)
        pyramid_index = count - 1 - record_index
        grads1[pyramid_index], grads2[pyramid_index] = grad_gray1, grad_gray2
        if record_index > 0:
            coarse = tape.levels[record_index - 1].gray1.shape
            rows = upsample_matrix(coarse[0], level.gray1.shape[0])
            cols = upsample_matrix(coarse[1], level.gray1.shape[1])
            grad = 2.0 * np.stack([rows.T @ grad_init[..., c] @ cols for c in range(2)], axis=-1)

    for index in reversed(range(1, count)):
        rows, cols = tape.down_rows[index - 1], tape.down_cols[index - 1]
        grads1[index - 1] = grads1[index - 1] + rows.T @ grads1[index] @ cols
        grads2[index - 1] = grads2[index - 1] + rows.T @ grads2[index] @ cols

    weights = np.asarray(GRAY_WEIGHTS)
    return grads1[0][..., None] * weights, grads2[0][..., None] * weights


def external_flow_source(dir_path: Union[str, Path]) -> Tuple[FlowField, FlowField]:
    """
    Load externally predicted flows for black-box evaluation.

    Args:
        dir_path: Directory holding benign.flo and attacked.flo

    Returns:
        Tuple of (benign flow f, attacked flow f-check)

    Raises:
        ContractError: If a file is missing or the sizes differ
    """
    dir_path = Path(dir_path)
    paths = [dir_path / OutputNames.BENIGN_FLOW, dir_path / OutputNames.ATTACKED_FLOW]
    for path in paths:
        if not path.is_file():
            raise ContractError(f"missing {path.name} in {dir_path}")
    benign, attacked = (read_flo(path) for path in paths)
    if benign.shape != attacked.shape:
        raise ContractError(f"flow sizes differ: {benign.shape} vs {attacked.shape}")
    return benign, attacked
