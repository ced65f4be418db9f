"""
Finite-difference suites for the renderer, the victim and the full attack loss
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from attack import VARIABLES, AttackConfig, AttackProblem
from constants import FD_STEP_IMAGE, GRADCHECK_MAX_SIDE, TEMPLATE_LIBRARY_SIZE
from oracles import OracleTolerance, fd_gradient
from particle_system import ParticleSet, WeatherConfig, expand_motion_blur
from renderer import FootprintPlan, RenderParams, backward, render
from scene_io import SceneBundle, synth_scene
from template_lib import make_template
from utils.validators import ContractError
from victim_flow import FlowEstimatorConfig, estimate_flow, estimate_flow_recorded, flow_backward

logger = logging.getLogger(__name__)

# Small, faint particles keep every pixel away from the clamp
GRADCHECK_WEATHER = WeatherConfig(
    count=20, base_size=9, depth_decay=3.0, template_kind="flake",
    blend_mode="additive", transparency_base=0.05, motion_y=0.05,
)
# Three replicas spread over the whole motion, one pixel apart
GRADCHECK_BLUR_WEATHER = replace(GRADCHECK_WEATHER, blur_enabled=True, blur_length=1.0, blur_particles=3)
GRADCHECK_FLOW = FlowEstimatorConfig(pyramid_levels=2, iterations_per_level=20)
COORDINATES_PER_BLOCK = 5


@dataclass(frozen=True)
class GradcheckResult:
    name: str
    max_rel_error: float
    checked: int
    passed: bool


def gradcheck_scene(
    width: int, height: int, seed: int, camera_translation: Tuple[float, float, float] = (0.05, 0.0, 0.0)
) -> SceneBundle:
    """Two-plane synthetic scene, by default with a small sideways camera move."""
    if max(width, height) > GRADCHECK_MAX_SIDE:
        raise ContractError(f"gradcheck is limited to {GRADCHECK_MAX_SIDE}x{GRADCHECK_MAX_SIDE}, got {width}x{height}")
    scene, _ = synth_scene(width, height, seed, camera_translation, (3.0, 6.0))
    return scene


def _snap_fraction(pixel: float, rng: np.random.Generator) -> float:
    """Pixel shift that moves `pixel` to a fractional part in [0.3, 0.7]."""
    return np.floor(pixel) + rng.uniform(0.3, 0.7) - pixel


def place_particles(
    scene: SceneBundle,
    count: int,
    seed: int,
    cfg: Optional[WeatherConfig] = None,
    depth_range: Tuple[float, float] = (1.5, 5.0),
) -> ParticleSet:
    """
    Hand-place particles whose projections sit well away from integer pixels in both frames.

    Bilinear weights and depth lookups have kinks only where a center's
    fractional part is 0, so finite differences around these particles
    stay on one smooth piece.
    """
    cfg = replace(cfg or GRADCHECK_WEATHER, count=count)
    rng = np.random.default_rng(seed)
    library = np.stack([
        make_template(cfg.template_kind, cfg.base_size, int(rng.integers(2**32))).alpha
        for _ in range(TEMPLATE_LIBRARY_SIZE)
    ])
    intrinsics = scene.intrinsics
    relative = scene.relative_pose

    xs = rng.integers(2, scene.width - 3, count) + rng.uniform(0.3, 0.7, count)
    ys = rng.integers(2, scene.height - 3, count) + rng.uniform(0.3, 0.7, count)
    zs = rng.uniform(depth_range[0], depth_range[1], count)
    positions = zs[:, None] * (np.stack([xs, ys, np.ones(count)], axis=1) @ np.linalg.inv(intrinsics).T)

    motion = np.tile([0.0, cfg.motion_y, 0.0], (count, 1))
    if cfg.blur_enabled:
        if not np.allclose(relative, np.eye(4)):
            raise ContractError("motion-blurred placement needs a scene without camera motion")
        # Replicas land whole pixels apart in both frames and keep the parent's subpixel fractions
        ratio = 1.0
        if cfg.blur_particles > 1:
            ratio = (cfg.blur_particles - 1) / cfg.blur_length if cfg.blur_length > 0 else 0.0
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ContractError(
                "motion-blurred placement needs (blur_particles - 1) / blur_length to be a whole number"
            )
        motion[:, 1] = round(ratio) * zs / intrinsics[1, 1]
    else:
        moved = positions @ relative[:3, :3].T + relative[:3, 3] + motion
        homogeneous = moved @ intrinsics.T
        pixels = homogeneous[:, :2] / homogeneous[:, 2:3]
        for j in range(count):
            # Moving m along x or y shifts the frame-2 pixel by f * dm / z
            motion[j, 0] += _snap_fraction(pixels[j, 0], rng) * moved[j, 2] / intrinsics[0, 0]
            motion[j, 1] += _snap_fraction(pixels[j, 1], rng) * moved[j, 2] / intrinsics[1, 1]

    zeros = np.zeros((count, 3))
    return ParticleSet(
        config=cfg,
        seed=seed,
        positions=positions,
        motion=motion,
        offset1=zeros,
        offset2=zeros,
        color=rng.uniform(0.2, 0.9, (count, 3)),
        transparency=rng.uniform(0.6, 1.0, count) * cfg.transparency_base,
        template_index=rng.integers(TEMPLATE_LIBRARY_SIZE, size=count),
        parent=np.arange(count),
        blur_offset=np.zeros(count),
        templates=library,
        relative_pose=relative,
    )


def _significant(analytic: np.ndarray, rng: np.random.Generator, k: int) -> np.ndarray:
    """Up to k random coordinates whose gradient is not negligible."""
    magnitude = np.abs(analytic)
    if magnitude.max() == 0:
        return rng.choice(len(analytic), size=min(k, len(analytic)), replace=False)
    candidates = np.flatnonzero(magnitude >= 1e-3 * magnitude.max())
    return np.sort(rng.choice(candidates, size=min(k, len(candidates)), replace=False))


def _check(
    name: str,
    analytic: np.ndarray,
    loss_fn: Callable[[np.ndarray], float],
    x0: np.ndarray,
    step: float,
    rng: np.random.Generator,
    tolerance: OracleTolerance,
    k: int = COORDINATES_PER_BLOCK,
) -> GradcheckResult:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    indices = _significant(analytic, rng, k)
    numeric = fd_gradient(loss_fn, x0, step, indices, richardson=tolerance.richardson)
    errors = tolerance.relative_error(analytic[indices], numeric)
    worst = float(errors.max()) if len(errors) else 0.0
    result = GradcheckResult(name=name, max_rel_error=worst, checked=len(indices), passed=worst <= tolerance.rel_tol)
    logger.info(f"Gradcheck {name}: max relative error {worst:.2e} over {len(indices)} coordinates")
    return result


def check_renderer(
    scene: SceneBundle, ps: ParticleSet, seed: int, tolerance: Optional[OracleTolerance] = None
) -> List[GradcheckResult]:
    """
    renderer.backward against central differences of a random linear image loss, both blend modes.

    Motion-blurred sets are expanded for every evaluation, so the replica
    gradients are checked against their parent's parameters.
    """
    tolerance = tolerance or OracleTolerance()
    rng = np.random.default_rng(seed)
    suite = "render+blur" if ps.config.blur_enabled else "render"
    expanded = expand_motion_blur(ps)
    weights1 = rng.normal(size=scene.frame1.shape)
    weights2 = rng.normal(size=scene.frame1.shape)
    results = []
    for blend in ("additive", "meshkin"):
        params = RenderParams.differentiating(blend)
        plan = FootprintPlan.for_particles(expanded)
        grads = backward(render(scene, expanded, params, plan).tape, weights1, weights2)

        def image_loss(candidate: ParticleSet) -> float:
            out = render(scene, expand_motion_blur(candidate), params, plan)
            return float(np.sum(weights1 * out.aug1) + np.sum(weights2 * out.aug2))

        blocks = {
            "offset1": (grads.offset1, ps.offset1, tolerance.fd_step_position),
            "offset2": (grads.offset2, ps.offset2, tolerance.fd_step_position),
            "color": (grads.color, ps.color, tolerance.fd_step_eta),
            "transparency": (grads.transparency, ps.transparency, tolerance.fd_step_eta),
        }
        for block, (analytic, value, step) in blocks.items():
            shape = value.shape

            def loss_fn(x: np.ndarray, block: str = block, shape: tuple = shape) -> float:
                return image_loss(ps.with_parameters(**{block: x.reshape(shape)}))

            results.append(_check(f"{suite}/{blend}/{block}", analytic, loss_fn, value.ravel(), step, rng, tolerance))
    return results


def check_victim(
    scene: SceneBundle,
    seed: int,
    cfg: FlowEstimatorConfig = GRADCHECK_FLOW,
    tolerance: Optional[OracleTolerance] = None,
    k: int = 10,
) -> List[GradcheckResult]:
    """victim_flow.flow_backward against central differences on image pixels."""
    tolerance = tolerance or OracleTolerance()
    rng = np.random.default_rng(seed)
    image1, image2 = scene.frame1, scene.frame2
    weights = rng.normal(size=(scene.height, scene.width, 2))
    _, tape = estimate_flow_recorded(image1, image2, cfg)
    grad1, grad2 = flow_backward(tape, weights)

    results = []
    for name, analytic, fixed_first in (("victim/I1", grad1, False), ("victim/I2", grad2, True)):
        def loss_fn(x: np.ndarray, fixed_first: bool = fixed_first) -> float:
            image = x.reshape(image1.shape)
            pair = (image1, image) if fixed_first else (image, image2)
            return float(np.sum(weights * estimate_flow(*pair, cfg).vectors))

        start = image2 if fixed_first else image1
        results.append(_check(name, analytic, loss_fn, start.ravel(), FD_STEP_IMAGE, rng, tolerance, k=k))
    return results


def check_attack(
    scene: SceneBundle, ps: ParticleSet, seed: int, tolerance: Optional[OracleTolerance] = None
) -> List[GradcheckResult]:
    """Full attack loss (render, victim, AEE and penalty) against central differences per variable block."""
    tolerance = tolerance or OracleTolerance()
    rng = np.random.default_rng(seed)
    suite = "attack+blur" if ps.config.blur_enabled else "attack"
    problem = AttackProblem.create(scene, ps, AttackConfig(variable_mask=frozenset(VARIABLES), flow=GRADCHECK_FLOW))
    count = ps.parent_count
    variables: Dict[str, np.ndarray] = {
        "p1": rng.normal(scale=1e-3, size=(count, 3)),
        "p2": rng.normal(scale=1e-3, size=(count, 3)),
        "col": rng.normal(scale=0.1, size=(count, 3)),
        "transp": rng.normal(scale=0.1, size=count),
    }
    objective = problem.objective(variables)

    results = []
    for block, step in (
        ("p1", tolerance.fd_step_position),
        ("p2", tolerance.fd_step_position),
        ("col", tolerance.fd_step_eta),
        ("transp", tolerance.fd_step_eta),
    ):
        shape = variables[block].shape

        def loss_fn(x: np.ndarray, block: str = block, shape: tuple = shape) -> float:
            return problem.loss_at({**variables, block: x.reshape(shape)}, objective.plan)

        results.append(_check(
            f"{suite}/{block}", objective.grads[block], loss_fn, variables[block].ravel(), step, rng, tolerance
        ))
    return results


def run_all(width: int, height: int, particles: int, seed: int) -> List[GradcheckResult]:
    """Every suite on one gradcheck scene, then renderer and attack again with motion blur on a still camera."""
    scene = gradcheck_scene(width, height, seed)
    ps = place_particles(scene, particles, seed)
    results = check_renderer(scene, ps, seed) + check_victim(scene, seed) + check_attack(scene, ps, seed)

    still = gradcheck_scene(width, height, seed, camera_translation=(0.0, 0.0, 0.0))
    blurred = place_particles(still, particles, seed, cfg=GRADCHECK_BLUR_WEATHER)
    return results + check_renderer(still, blurred, seed) + check_attack(still, blurred, seed)
