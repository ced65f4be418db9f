"""
Adversarial optimization of weather particles against the victim flow estimator
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Tuple, Union

import numpy as np

from constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    AEE_SMOOTHING,
    ATANH_EPS,
    DEFAULT_ALPHA,
    DEFAULT_LEARNING_RATE,
    DEFAULT_STEPS,
    REPORT_VERSION,
)
from config import config
from metrics import aee
from particle_system import ParticleSet, WeatherConfig, expand_motion_blur, sample_particles
from renderer import FootprintPlan, RenderOutput, RenderParams, backward, render
from template_lib import FootprintCache
from scene_io import FlowField, SceneBundle
from utils.validators import ContractError
from victim_flow import FlowEstimatorConfig, estimate_flow, estimate_flow_recorded, flow_backward

logger = logging.getLogger(__name__)

VARIABLES: Tuple[str, ...] = ("p1", "p2", "col", "transp")

REPORT_FORMAT = "downpour-attack-report"


# =============================================================================
# Bounded parameters


def encode(xi: Union[float, np.ndarray]) -> np.ndarray:
    """eta = atanh(2 xi - 1), with xi clamped into [eps, 1 - eps] first."""
    clamped = np.clip(np.asarray(xi, dtype=np.float64), ATANH_EPS, 1.0 - ATANH_EPS)
    return np.arctanh(2.0 * clamped - 1.0)


def decode(eta: Union[float, np.ndarray]) -> np.ndarray:
    """xi = (tanh(eta) + 1) / 2, kept inside [eps, 1 - eps]."""
    return np.clip((np.tanh(np.asarray(eta, dtype=np.float64)) + 1.0) / 2.0, ATANH_EPS, 1.0 - ATANH_EPS)


def decode_derivative(eta: np.ndarray) -> np.ndarray:
    """d decode / d eta; zero where decode is clamped."""
    value = (np.tanh(eta) + 1.0) / 2.0
    slope = (1.0 - np.tanh(eta) ** 2) / 2.0
    return np.where((value > ATANH_EPS) & (value < 1.0 - ATANH_EPS), slope, 0.0)


def parse_mask(text: str) -> FrozenSet[str]:
    """
    Parse a comma-separated variable mask such as "p1,col,transp".

    Raises:
        ContractError: On unknown tokens or an empty mask
    """
    tokens = [token.strip() for token in text.split(",") if token.strip()]
    unknown = [token for token in tokens if token not in VARIABLES]
    if unknown:
        raise ContractError(f"invalid variable(s) {', '.join(unknown)}; choose from {', '.join(VARIABLES)}")
    if not tokens:
        raise ContractError("variable mask is empty")
    return frozenset(tokens)


def default_variable_mask(cfg: WeatherConfig) -> FrozenSet[str]:
    """
    Variables an attack on `cfg` optimizes unless told otherwise.

    Effects without motion (fog) keep offset2 at zero: their particles stay
    put between the frames, and moving them after the motion would turn a
    static effect into a moving one.
    """
    if cfg.motion_y == 0.0:
        return frozenset({"p1", "col", "transp"})
    return frozenset(VARIABLES)


# =============================================================================
# Configuration and state


@dataclass(frozen=True)
class AttackConfig:
    """Optimization settings. A target of None means the zero flow."""

    learning_rate: float = DEFAULT_LEARNING_RATE
    steps: int = DEFAULT_STEPS
    alpha1: float = DEFAULT_ALPHA
    alpha2: float = DEFAULT_ALPHA
    target: Optional[FlowField] = field(default=None, repr=False)
    variable_mask: Optional[FrozenSet[str]] = None  # None: the weather effect's default_variable_mask
    adam_beta1: float = ADAM_BETA1
    adam_beta2: float = ADAM_BETA2
    adam_eps: float = ADAM_EPS
    flow: FlowEstimatorConfig = field(default_factory=FlowEstimatorConfig)

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ContractError(f"steps must be >= 0, got {self.steps}")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ContractError("alpha weights must be >= 0")
        if self.variable_mask is not None:
            mask = frozenset(self.variable_mask)
            if not mask:
                raise ContractError("variable mask is empty")
            if not mask <= set(VARIABLES):
                raise ContractError(f"unknown variables in mask: {sorted(mask - set(VARIABLES))}")
            object.__setattr__(self, "variable_mask", mask)

    @property
    def active_variables(self) -> FrozenSet[str]:
        """The mask, or every variable when none was set."""
        return self.variable_mask if self.variable_mask is not None else frozenset(VARIABLES)

    def for_weather(self, cfg: WeatherConfig) -> "AttackConfig":
        """Fill in the weather effect's default mask unless one was given explicitly."""
        if self.variable_mask is not None:
            return self
        return replace(self, variable_mask=default_variable_mask(cfg))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "alpha1": self.alpha1,
            "alpha2": self.alpha2,
            "target": "zero" if self.target is None else "file",
            "variable_mask": sorted(self.active_variables),
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "flow": asdict(self.flow),
        }


def _zeros_like_blocks(parent_count: int) -> Dict[str, np.ndarray]:
    return {
        "p1": np.zeros((parent_count, 3)),
        "p2": np.zeros((parent_count, 3)),
        "col": np.zeros((parent_count, 3)),
        "transp": np.zeros(parent_count),
    }


@dataclass(frozen=True)
class AttackState:
    """
    Optimization variables and Adam moments.

    `variables` holds offset1 ("p1") and offset2 ("p2") in meters and the
    color and transparency offsets ("col", "transp") in atanh space.
    """

    variables: Dict[str, np.ndarray]
    first_moment: Dict[str, np.ndarray]
    second_moment: Dict[str, np.ndarray]
    step: int = 0
    skipped_steps: int = 0

    @classmethod
    def initial(cls, parent_count: int) -> "AttackState":
        return cls(
            variables=_zeros_like_blocks(parent_count),
            first_moment=_zeros_like_blocks(parent_count),
            second_moment=_zeros_like_blocks(parent_count),
        )


def adam_step(state: AttackState, grads: Dict[str, np.ndarray], acfg: AttackConfig) -> AttackState:
    """
    One bias-corrected Adam update of the unmasked blocks.

    A non-finite gradient in any unmasked block skips the update; the step
    counter still advances.
    """
    active = [name for name in VARIABLES if name in acfg.active_variables]
    for name in active:
        if grads[name].shape != state.variables[name].shape:
            raise ContractError(f"gradient block {name} has shape {grads[name].shape}, expected {state.variables[name].shape}")
    if not all(np.all(np.isfinite(grads[name])) for name in active):
        logger.warning(f"Non-finite gradient at step {state.step}; skipping the update")
        return replace(state, step=state.step + 1, skipped_steps=state.skipped_steps + 1)

    t = state.step + 1
    variables = dict(state.variables)
    first = dict(state.first_moment)
    second = dict(state.second_moment)
    for name in active:
        grad = grads[name]
        first[name] = acfg.adam_beta1 * first[name] + (1.0 - acfg.adam_beta1) * grad
        second[name] = acfg.adam_beta2 * second[name] + (1.0 - acfg.adam_beta2) * grad * grad
        m_hat = first[name] / (1.0 - acfg.adam_beta1 ** t)
        v_hat = second[name] / (1.0 - acfg.adam_beta2 ** t)
        variables[name] = variables[name] - acfg.learning_rate * m_hat / (np.sqrt(v_hat) + acfg.adam_eps)
    return replace(state, variables=variables, first_moment=first, second_moment=second, step=t)


# =============================================================================
# Loss


def _penalty_terms(ps: ParticleSet, alpha1: float, alpha2: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """Offset penalty and its gradients w.r.t. offset1, offset2 (depths depend on both)."""
    if ps.expanded:
        raise ContractError("the offset penalty is defined on parent particles, got an expanded set")
    count = len(ps)
    if count == 0:
        return 0.0, np.zeros((0, 3)), np.zeros((0, 3))
    d1, d2 = ps.depth1, ps.depth2
    if np.any(d1 <= 0) or np.any(d2 <= 0):
        raise ContractError("particle depths must be positive for the offset penalty")
    sq1 = np.sum(ps.offset1 ** 2, axis=1)
    sq2 = np.sum(ps.offset2 ** 2, axis=1)
    w1, w2 = alpha1 / count, alpha2 / count
    value = w1 * float(np.sum(sq1 / d1)) + w2 * float(np.sum(sq2 / d2))

    e_z = np.array([0.0, 0.0, 1.0])
    rotation_z = ps.relative_pose[2, :3]
    grad1 = w1 * (2.0 * ps.offset1 / d1[:, None] - (sq1 / d1 ** 2)[:, None] * e_z)
    grad1 -= w2 * (sq2 / d2 ** 2)[:, None] * rotation_z
    grad2 = w2 * (2.0 * ps.offset2 / d2[:, None] - (sq2 / d2 ** 2)[:, None] * e_z)
    return value, grad1, grad2


def loss(attacked: FlowField, target: FlowField, ps: ParticleSet, alpha1: float, alpha2: float) -> float:
    """
    AEE(attacked, target) plus the depth-scaled offset penalty.

    L = AEE + sum_t alpha_t / |P| sum_j ||offset_t^j||^2 / d_t^j, with |P|
    the number of parent particles.
    """
    penalty, _, _ = _penalty_terms(ps, alpha1, alpha2)
    return aee(attacked, target) + penalty


def loss_and_gradient(
    attacked: FlowField, target: FlowField, ps: ParticleSet, alpha1: float, alpha2: float
) -> Tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """
    Loss with gradients w.r.t. the predicted flow and the penalty's direct offset dependence.

    The AEE gradient uses sqrt(|e|^2 + 1e-12) so it is defined at e = 0.

    Returns:
        Tuple of (loss, dL/dflow, dPenalty/doffset1, dPenalty/doffset2)
    """
    penalty, grad1, grad2 = _penalty_terms(ps, alpha1, alpha2)
    error = attacked.vectors - target.vectors
    norm = np.sqrt(np.sum(error * error, axis=-1, keepdims=True) + AEE_SMOOTHING)
    height, width = attacked.shape
    grad_flow = error / norm / (height * width)
    return aee(attacked, target) + penalty, grad_flow, grad1, grad2


# =============================================================================
# The attack problem


@dataclass(frozen=True)
class Objective:
    """Loss, its gradient per variable block, and what produced them."""

    loss: float
    aee_target: float
    grads: Dict[str, np.ndarray]
    flow: FlowField
    output: RenderOutput = field(repr=False)
    plan: FootprintPlan = field(repr=False)


@dataclass(frozen=True)
class Measurement:
    """A beta=250 render of one parameter state and the victim's prediction on it."""

    aug1: np.ndarray = field(repr=False)
    aug2: np.ndarray = field(repr=False)
    flow: FlowField = field(repr=False)
    aee_robustness: float
    aee_target: float


@dataclass(frozen=True)
class AttackProblem:
    """A sampled particle set on a scene, with the benign prediction and the fixed atanh origins."""

    scene: SceneBundle = field(repr=False)
    particles: ParticleSet = field(repr=False)
    config: AttackConfig
    benign: FlowField = field(repr=False)
    target: FlowField = field(repr=False)
    eta_color: np.ndarray = field(repr=False)
    eta_transparency: np.ndarray = field(repr=False)
    transparency_max: float
    footprints: FootprintCache = field(repr=False, compare=False)

    @classmethod
    def create(cls, scene: SceneBundle, ps: ParticleSet, acfg: AttackConfig) -> "AttackProblem":
        if ps.expanded:
            raise ContractError("attacks start from an unexpanded particle set")
        acfg = acfg.for_weather(ps.config)
        target = acfg.target if acfg.target is not None else FlowField.zeros(scene.height, scene.width)
        if target.shape != (scene.height, scene.width):
            raise ContractError(f"target flow is {target.shape}, scene is {(scene.height, scene.width)}")
        transparency_max = ps.config.transparency_max
        if not transparency_max > 0:
            raise ContractError("transparency_base must be > 0 to optimize transparency")
        benign = estimate_flow(scene.frame1, scene.frame2, acfg.flow)
        return cls(
            scene=scene,
            particles=ps,
            config=acfg,
            benign=benign,
            target=target,
            eta_color=encode(ps.color),
            eta_transparency=encode(ps.transparency / transparency_max),
            transparency_max=transparency_max,
            footprints=FootprintCache(ps.templates, config.footprint_cache_mb()),
        )

    def particles_for(self, variables: Dict[str, np.ndarray]) -> ParticleSet:
        """Decode variables into a parent-level particle set; masked-out blocks keep their sampled values."""
        mask = self.config.active_variables
        return self.particles.with_parameters(
            offset1=variables["p1"] if "p1" in mask else None,
            offset2=variables["p2"] if "p2" in mask else None,
            color=decode(self.eta_color + variables["col"]) if "col" in mask else None,
            transparency=(
                self.transparency_max * decode(self.eta_transparency + variables["transp"])
                if "transp" in mask else None
            ),
        )

    def objective(self, variables: Dict[str, np.ndarray], plan: Optional[FootprintPlan] = None) -> Objective:
        """Loss and gradients of one variable state; `plan` freezes template footprints."""
        acfg = self.config
        ps = self.particles_for(variables)
        expanded = expand_motion_blur(ps)
        params = RenderParams.differentiating(ps.config.blend_mode)
        output = render(self.scene, expanded, params, plan=plan, cache=self.footprints)
        flow, flow_tape = estimate_flow_recorded(output.aug1, output.aug2, acfg.flow)
        value, grad_flow, grad_pen1, grad_pen2 = loss_and_gradient(flow, self.target, ps, acfg.alpha1, acfg.alpha2)
        grad_image1, grad_image2 = flow_backward(flow_tape, grad_flow)
        grads = backward(output.tape, grad_image1, grad_image2)

        eta_color = self.eta_color + variables["col"]
        eta_transparency = self.eta_transparency + variables["transp"]
        blocks = {
            "p1": grads.offset1 + grad_pen1,
            "p2": grads.offset2 + grad_pen2,
            "col": grads.color * decode_derivative(eta_color),
            "transp": grads.transparency * self.transparency_max * decode_derivative(eta_transparency),
        }
        return Objective(
            loss=value,
            aee_target=aee(flow, self.target),
            grads=blocks,
            flow=flow,
            output=output,
            plan=plan if plan is not None else FootprintPlan.for_particles(expanded),
        )

    def loss_at(self, variables: Dict[str, np.ndarray], plan: Optional[FootprintPlan] = None) -> float:
        """Forward-only loss of a variable state."""
        ps = self.particles_for(variables)
        params = RenderParams.differentiating(ps.config.blend_mode)
        output = render(self.scene, expand_motion_blur(ps), params, plan=plan, cache=self.footprints)
        flow = estimate_flow(output.aug1, output.aug2, self.config.flow)
        return loss(flow, self.target, ps, self.config.alpha1, self.config.alpha2)

    def measure(self, ps: ParticleSet) -> Measurement:
        """Render at beta=250 and compare the prediction with the benign flow."""
        expanded = expand_motion_blur(ps)
        output = render(self.scene, expanded, RenderParams.rendering(ps.config.blend_mode), cache=self.footprints)
        flow = estimate_flow(output.aug1, output.aug2, self.config.flow)
        return Measurement(
            aug1=output.aug1,
            aug2=output.aug2,
            flow=flow,
            aee_robustness=aee(self.benign, flow),
            aee_target=aee(flow, self.target),
        )

    def differentiable_loss(self, ps: ParticleSet) -> float:
        """Loss of a particle set rendered at beta=30."""
        expanded = expand_motion_blur(ps)
        params = RenderParams.differentiating(ps.config.blend_mode)
        output = render(self.scene, expanded, params, cache=self.footprints)
        flow = estimate_flow(output.aug1, output.aug2, self.config.flow)
        return loss(flow, self.target, ps, self.config.alpha1, self.config.alpha2)


# =============================================================================
# Loop and report


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    aee_target: float
    aee_robustness: float
    skipped: bool = False


@dataclass(frozen=True)
class AttackReport:
    """Outcome of run_attack; everything but the arrays goes to report.json."""

    weather: WeatherConfig
    attack: AttackConfig
    seed: int
    initial_aee: float
    final_aee: float
    best_aee: float
    best_step: int
    initial_loss: float
    final_loss: float
    trace: List[StepRecord]
    timings: Dict[str, float]
    benign_flow: FlowField = field(repr=False)
    initial: Measurement = field(repr=False)
    final: Measurement = field(repr=False)
    best: Measurement = field(repr=False)
    final_particles: ParticleSet = field(repr=False)
    best_particles: ParticleSet = field(repr=False)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "weather": self.weather.to_dict(),
            "attack": self.attack.to_dict(),
            "seed": self.seed,
            "initial_aee": self.initial_aee,
            "final_aee": self.final_aee,
            "best_aee": self.best_aee,
            "best_step": self.best_step,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "trace": [asdict(record) for record in self.trace],
            "timings": self.timings,
        }

    def save(self, path: Union[str, Path]) -> None:
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        logger.info(f"Wrote attack report to {path}")


def run_attack(
    scene: SceneBundle,
    cfg: WeatherConfig,
    acfg: AttackConfig,
    seed: int,
    particles: Optional[ParticleSet] = None,
) -> AttackReport:
    """
    Optimize particle parameters to push the victim's prediction toward the target.

    Each step decodes the variables, re-expands motion blur, renders at
    beta=30, runs the victim, and back-propagates the loss into an Adam
    update. The same parameters are also rendered at beta=250 to measure
    AEE(f, f-check); the best snapshot maximizes that number.

    Args:
        scene: Scene to attack
        cfg: Weather effect
        acfg: Optimization settings
        seed: Particle sampling seed
        particles: Start from this (unexpanded) set instead of sampling

    Returns:
        AttackReport with initial, final and best measurements
    """
    started = time.perf_counter()
    ps = particles if particles is not None else sample_particles(scene, cfg, seed)
    problem = AttackProblem.create(scene, ps, acfg)
    acfg = problem.config
    prepared = time.perf_counter()

    initial = problem.measure(ps)
    initial_loss = problem.differentiable_loss(ps)
    logger.info(f"Initial AEE(f, f-check) = {initial.aee_robustness:.4f}, loss = {initial_loss:.6f}")

    state = AttackState.initial(ps.parent_count)
    best, best_step, best_particles = initial, 0, ps
    trace: List[StepRecord] = []
    final, final_loss, final_particles = initial, initial_loss, ps

    for step in range(acfg.steps):
        objective = problem.objective(state.variables)
        current = problem.particles_for(state.variables)
        measurement = problem.measure(current)
        new_state = adam_step(state, objective.grads, acfg)
        record = StepRecord(
            step=step,
            loss=objective.loss,
            aee_target=objective.aee_target,
            aee_robustness=measurement.aee_robustness,
            skipped=new_state.skipped_steps > state.skipped_steps,
        )
        trace.append(record)
        logger.debug(
            f"Step {step}/{acfg.steps}: loss {record.loss:.6f}, "
            f"AEE(target) {record.aee_target:.4f}, AEE(benign) {record.aee_robustness:.4f}"
        )
        if measurement.aee_robustness > best.aee_robustness:
            best, best_step, best_particles = measurement, step, current
        state = new_state

    if acfg.steps > 0:
        final_particles = problem.particles_for(state.variables)
        final = problem.measure(final_particles)
        final_loss = problem.differentiable_loss(final_particles)
        if final.aee_robustness > best.aee_robustness:
            best, best_step, best_particles = final, acfg.steps, final_particles
    finished = time.perf_counter()

    logger.info(
        f"Attack finished: initial {initial.aee_robustness:.4f}, final {final.aee_robustness:.4f}, "
        f"best {best.aee_robustness:.4f} at step {best_step}; skipped {state.skipped_steps} steps"
    )
    return AttackReport(
        weather=ps.config,
        attack=acfg,
        seed=seed,
        initial_aee=initial.aee_robustness,
        final_aee=final.aee_robustness,
        best_aee=best.aee_robustness,
        best_step=best_step,
        initial_loss=initial_loss,
        final_loss=final_loss,
        trace=trace,
        timings={"setup_s": prepared - started, "optimize_s": finished - prepared, "total_s": finished - started},
        benign_flow=problem.benign,
        initial=initial,
        final=final,
        best=best,
        final_particles=final_particles,
        best_particles=best_particles,
    )
