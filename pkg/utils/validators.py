"""
Input validation utilities and the error hierarchy
"""

from pathlib import Path
from typing import Final, Optional, Tuple, Union

import numpy as np

ROTATION_TOLERANCE: Final[float] = 1e-9


class DownpourError(Exception):
    """Base class for every error raised by downpour."""


class ParseError(DownpourError, ValueError):
    """A file could not be decoded."""

    def __init__(self, path: Union[str, Path], reason: str, offset: int = 0) -> None:
        self.path = Path(path)
        self.reason = reason
        self.offset = offset
        super().__init__(f"{self.path.name}: {reason} (offset {offset})")


class ContractError(DownpourError, ValueError):
    """A precondition of an operation does not hold."""


class SamplingError(DownpourError, RuntimeError):
    """Rejection sampling ran out of attempts."""


class UnknownPresetError(DownpourError, KeyError):
    """A weather preset name is not in the catalogue."""

    def __init__(self, name: str, valid: Tuple[str, ...]) -> None:
        self.name = name
        self.valid = valid
        super().__init__(f"Unknown preset '{name}'. Valid presets: {', '.join(valid)}")

    def __str__(self) -> str:
        # KeyError quotes its argument otherwise
        return str(self.args[0])


def require_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """
    Check an RGB image.

    Args:
        image: Array of shape (H, W, 3)
        name: Label used in the error message

    Returns:
        The image as float64

    Raises:
        ContractError: If the shape is wrong or values are not finite
    """
    array = np.asarray(image, dtype=np.float64)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ContractError(f"{name} must have shape (H, W, 3), got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ContractError(f"{name} contains non-finite values")
    return array


def require_depth(depth: np.ndarray, name: str = "depth") -> np.ndarray:
    """Check a depth map: 2D, finite, strictly positive."""
    array = np.asarray(depth, dtype=np.float64)
    if array.ndim != 2:
        raise ContractError(f"{name} must have shape (H, W), got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ContractError(f"{name} contains non-finite values")
    if np.any(array <= 0):
        raise ContractError(f"{name}: depth must be positive")
    return array


def require_pose(pose: np.ndarray, name: str = "pose") -> np.ndarray:
    """Check a 4x4 rigid transform with an orthonormal, right-handed rotation."""
    array = np.asarray(pose, dtype=np.float64)
    if array.shape != (4, 4):
        raise ContractError(f"{name} must be 4x4, got {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ContractError(f"{name} contains non-finite values")
    if not np.allclose(array[3], (0.0, 0.0, 0.0, 1.0), rtol=0.0, atol=ROTATION_TOLERANCE):
        raise ContractError(f"{name} last row must be (0, 0, 0, 1)")
    rotation = array[:3, :3]
    if not np.allclose(rotation @ rotation.T, np.eye(3), rtol=0.0, atol=ROTATION_TOLERANCE):
        raise ContractError(f"{name} rotation is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > ROTATION_TOLERANCE:
        raise ContractError(f"{name} rotation determinant must be +1")
    return array


def require_intrinsics(intrinsics: np.ndarray) -> np.ndarray:
    """Check a 3x3 zero-skew projection matrix."""
    array = np.asarray(intrinsics, dtype=np.float64)
    if array.shape != (3, 3):
        raise ContractError(f"intrinsics must be 3x3, got {array.shape}")
    if array[0, 1] != 0.0 or np.any(array[1:, 0] != 0.0) or array[2, 1] != 0.0:
        raise ContractError("intrinsics must have zero skew and last row (0, 0, 1)")
    if array[2, 2] != 1.0:
        raise ContractError("intrinsics must have last row (0, 0, 1)")
    if array[0, 0] <= 0 or array[1, 1] <= 0:
        raise ContractError("focal lengths must be positive")
    return array


def require_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    """Raise ContractError unless both arrays have the same shape."""
    if np.shape(a) != np.shape(b):
        raise ContractError(f"{what} differ in size: {np.shape(a)} vs {np.shape(b)}")


def require_positive(value: float, name: str, allow_zero: bool = False) -> float:
    """Raise ContractError unless value is positive (or non-negative)."""
    if not np.isfinite(value) or value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ContractError(f"{name} must be {bound}, got {value}")
    return float(value)


def require_flow(flow: np.ndarray, name: str = "flow", shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Check a dense flow field of shape (H, W, 2)."""
    array = np.asarray(flow, dtype=np.float64)
    if array.ndim != 3 or array.shape[2] != 2:
        raise ContractError(f"{name} must have shape (H, W, 2), got {array.shape}")
    if array.shape[0] == 0 or array.shape[1] == 0:
        raise ContractError("empty flow field")
    if not np.all(np.isfinite(array)):
        raise ContractError(f"{name} contains non-finite values")
    if shape is not None and array.shape[:2] != tuple(shape):
        raise ContractError(f"{name} is {array.shape[:2]}, expected {tuple(shape)}")
    return array
