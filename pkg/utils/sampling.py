"""
Bilinear sampling with derivatives, its adjoint, and compensated accumulation
"""

from typing import Optional, Tuple

import numpy as np

from utils.validators import ContractError

GRID_PAD = 1  # Replicated border around images sampled with bilinear_grid


def _corner_weights(size: int, coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Left corner index, fraction and an inside-mask for coordinates clamped to [0, size - 1]."""
    inside = (coords >= 0.0) & (coords <= size - 1)
    clamped = np.clip(coords, 0.0, size - 1)
    if size == 1:
        return np.zeros(coords.shape, dtype=np.intp), np.zeros(coords.shape), inside
    lower = np.minimum(np.floor(clamped).astype(np.intp), size - 2)
    return lower, clamped - lower, inside


def bilinear_sample(
    image: np.ndarray, xs: np.ndarray, ys: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Sample an image at subpixel positions with replicate borders.

    Args:
        image: Array (H, W) or (H, W, C)
        xs: Column coordinates, any shape
        ys: Row coordinates, same shape as xs

    Returns:
        Tuple of (values, d/dx, d/dy). Derivatives are zero along an axis
        where the coordinate lies outside the image and was clamped.
    """
    height, width = image.shape[:2]
    x0, fx, inside_x = _corner_weights(width, np.asarray(xs, dtype=np.float64))
    y0, fy, inside_y = _corner_weights(height, np.asarray(ys, dtype=np.float64))
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)

    a = image[y0, x0]
    b = image[y0, x1]
    c = image[y1, x0]
    d = image[y1, x1]
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
        inside_x = inside_x[..., None]
        inside_y = inside_y[..., None]

    top = (1.0 - fx) * a + fx * b
    bottom = (1.0 - fx) * c + fx * d
    values = (1.0 - fy) * top + fy * bottom
    d_dx = np.where(inside_x, (1.0 - fy) * (b - a) + fy * (d - c), 0.0)
    d_dy = np.where(inside_y, bottom - top, 0.0)
    return values, d_dx, d_dy


def pad_for_grid(image: np.ndarray) -> np.ndarray:
    """Replicate the border of a (H, W) image for bilinear_grid."""
    return np.pad(np.asarray(image, dtype=np.float64), GRID_PAD, mode="edge")


def bilinear_grid(
    padded: np.ndarray,
    corner: Tuple[int, int],
    size: Tuple[int, int],
    frac: Tuple[float, float],
    derivatives: bool = False,
) -> Tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """
    bilinear_sample at corner + (i, j) + frac for a whole integer grid at once.

    Every sample shares one subpixel fraction, so the four corners are plain
    slices of the padded image. Agrees with bilinear_sample except exactly on
    the last row or column, where the clamped derivative is taken as zero.

    Args:
        padded: pad_for_grid(image)
        corner: Integer (row, column) of sample (0, 0) in unpadded coordinates
        size: (rows, columns) of the grid
        frac: Shared (row, column) fraction in [0, 1)
        derivatives: Also return d/dx and d/dy

    Returns:
        Tuple of (values, d/dx, d/dy); the derivatives are None unless requested
    """
    y, x = corner[0] + GRID_PAD, corner[1] + GRID_PAD
    rows, cols = size
    if y < 0 or x < 0 or y + rows + 1 > padded.shape[0] or x + cols + 1 > padded.shape[1]:
        raise ContractError(f"grid at {corner} of size {size} leaves the padded image")
    fy, fx = frac
    a = padded[y:y + rows, x:x + cols]
    b = padded[y:y + rows, x + 1:x + cols + 1]
    c = padded[y + 1:y + rows + 1, x:x + cols]
    d = padded[y + 1:y + rows + 1, x + 1:x + cols + 1]
    top = (1.0 - fx) * a + fx * b
    bottom = (1.0 - fx) * c + fx * d
    values = (1.0 - fy) * top + fy * bottom
    if not derivatives:
        return values, None, None
    return values, (1.0 - fy) * (b - a) + fy * (d - c), bottom - top


def bilinear_scatter(shape: Tuple[int, int], xs: np.ndarray, ys: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    Adjoint of bilinear_sample with respect to the image values.

    Args:
        shape: (H, W) of the sampled image
        xs, ys: The coordinates that were sampled
        weights: Upstream gradient per sample, same shape as xs

    Returns:
        Array (H, W) with every weight distributed to its four corners
    """
    height, width = shape
    x0, fx, _ = _corner_weights(width, np.asarray(xs, dtype=np.float64).ravel())
    y0, fy, _ = _corner_weights(height, np.asarray(ys, dtype=np.float64).ravel())
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    w = np.asarray(weights, dtype=np.float64).ravel()

    out = np.zeros(height * width)
    np.add.at(out, y0 * width + x0, (1.0 - fx) * (1.0 - fy) * w)
    np.add.at(out, y0 * width + x1, fx * (1.0 - fy) * w)
    np.add.at(out, y1 * width + x0, (1.0 - fx) * fy * w)
    np.add.at(out, y1 * width + x1, fx * fy * w)
    return out.reshape(height, width)


class CompensatedAccumulator:
    """Per-pixel Neumaier summation; the result is independent of chunking."""

    def __init__(self, shape: Tuple[int, ...]) -> None:
        self.total = np.zeros(shape)
        self.compensation = np.zeros(shape)

    def add(self, region: Tuple[slice, slice], values: np.ndarray) -> None:
        """Add values into total[region]."""
        current = self.total[region]
        summed = current + values
        self.compensation[region] += np.where(
            np.abs(current) >= np.abs(values),
            (current - summed) + values,
            (values - summed) + current,
        )
        self.total[region] = summed

    def value(self) -> np.ndarray:
        return self.total + self.compensation
