"""
Flow error measures and the Middlebury color-wheel visualization
"""

import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from scene_io import FlowField
from utils.validators import ContractError

logger = logging.getLogger(__name__)

# Color-wheel segment lengths: red-yellow, yellow-green, green-cyan, cyan-blue, blue-magenta, magenta-red
WHEEL_SEGMENTS: Tuple[int, ...] = (15, 6, 4, 11, 13, 6)


@dataclass(frozen=True)
class MetricReport:
    """Summary of one comparison, as written to metrics.json."""

    aee: float
    robustness_aee: float
    epe_max: float
    visualization_radius: float

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ContractError(f"{name} must be finite and >= 0, got {value}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _check_pair(f: FlowField, g: FlowField) -> None:
    if f.shape != g.shape:
        raise ContractError(f"flow fields differ in size: {f.shape} vs {g.shape}")


def epe_map(f: FlowField, g: FlowField) -> np.ndarray:
    """Per-pixel endpoint error ||f(x) - g(x)||."""
    _check_pair(f, g)
    diff = f.vectors - g.vectors
    return np.sqrt(np.sum(diff * diff, axis=-1))


def aee(f: FlowField, g: FlowField) -> float:
    """Average endpoint error, the mean of epe_map."""
    return float(np.mean(epe_map(f, g)))


def make_colorwheel() -> np.ndarray:
    """Middlebury color wheel, (55, 3) RGB in [0, 1]."""
    ry, yg, gc, cb, bm, mr = WHEEL_SEGMENTS
    wheel = np.zeros((sum(WHEEL_SEGMENTS), 3))
    col = 0
    for length, channel, rising in ((ry, 1, True), (yg, 0, False), (gc, 2, True), (cb, 1, False), (bm, 0, True), (mr, 2, False)):
        ramp = np.arange(length) / length
        # Each segment holds one channel at full, ramps another
        full = (channel + 2) % 3 if rising else (channel + 1) % 3
        wheel[col:col + length, full] = 1.0
        wheel[col:col + length, channel] = ramp if rising else 1.0 - ramp
        col += length
    return wheel


def flow_to_color(f: FlowField, max_radius: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """
    Color-code a flow field: hue from direction, saturation from magnitude.

    Magnitudes are divided by the largest one in the image unless
    `max_radius` is given, so f and 2f share their colors. Zero flow is white.

    Returns:
        Tuple of (RGB image in [0, 1], normalization radius used)
    """
    u, v = f.u, f.v
    magnitude = np.sqrt(u * u + v * v)
    radius = float(magnitude.max()) if max_radius is None else float(max_radius)
    if radius > 0:
        u, v, magnitude = u / radius, v / radius, magnitude / radius

    wheel = make_colorwheel()
    count = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi
    position = (angle + 1.0) / 2.0 * (count - 1)
    lower = np.floor(position).astype(np.intp)
    upper = (lower + 1) % count
    frac = (position - lower)[..., None]
    color = (1.0 - frac) * wheel[lower] + frac * wheel[upper]

    inside = (magnitude <= 1.0)[..., None]
    saturated = 1.0 - magnitude[..., None] * (1.0 - color)
    image = np.where(inside, saturated, color * 0.75)
    return np.clip(image, 0.0, 1.0), radius


def compare(benign: FlowField, attacked: FlowField, target: Optional[FlowField] = None) -> MetricReport:
    """
    Metrics of an attacked prediction.

    Args:
        benign: Prediction f on clean frames
        attacked: Prediction f-check on augmented frames
        target: Attack target; AEE(f-check, target) is reported as `aee` (zero flow if omitted)
    """
    if target is None:
        target = FlowField.zeros(*attacked.shape)
    errors = epe_map(benign, attacked)
    radius = max(
        float(np.max(np.linalg.norm(benign.vectors, axis=-1))),
        float(np.max(np.linalg.norm(attacked.vectors, axis=-1))),
    )
    return MetricReport(
        aee=aee(attacked, target),
        robustness_aee=float(np.mean(errors)),
        epe_max=float(errors.max()),
        visualization_radius=radius,
    )
