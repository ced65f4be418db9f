"""
Downpour - command-line entry point
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import psutil
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from attack import AttackConfig, parse_mask, run_attack
from config import THREADS_ENV_VAR, config, format_key_value, parse_key_value_file
from constants import (
    BETA_RENDER,
    DEFAULT_ALPHA,
    DEFAULT_LEARNING_RATE,
    DEFAULT_STEPS,
    GRADCHECK_DEFAULT_PARTICLES,
    GRADCHECK_DEFAULT_SIZE,
    GRADCHECK_MAX_SIDE,
    OutputNames,
)
from gradcheck import run_all
from metrics import aee, compare, flow_to_color
from particle_system import WeatherConfig, expand_motion_blur, get_preset, presets, sample_particles
from renderer import RenderParams, render, write_debug_csv
from scene_io import FlowField, load_particles, load_scene, read_flo, save_particles, save_scene, synth_scene, write_flo, write_ppm
from utils.validators import ContractError, DownpourError, UnknownPresetError
from victim_flow import FlowEstimatorConfig, estimate_flow, external_flow_source

logger = logging.getLogger(__name__)

console = Console()

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

ATTACK_KEYS = ("learning_rate", "steps", "alpha1", "alpha2", "variable_mask")

# Default synthetic scene: 128x96, a near plane at 3 m in front of a wall at 8 m
DEFAULT_SYNTH_SIZE = (128, 96)
DEFAULT_SYNTH_PLANES = (3.0, 8.0)
DEFAULT_SYNTH_TRANSLATION = (0.1, 0.0, 0.0)


class UsageError(DownpourError):
    """A command line that cannot be run as given."""


@dataclass
class RunManifest:
    """Echo of one command, written next to its outputs."""

    command: str
    scene: Optional[str]
    preset: Optional[str]
    config_path: Optional[str]
    seed: Optional[int]
    out: str
    argv: List[str] = field(default_factory=list)
    started: float = field(default_factory=time.time)
    elapsed_s: float = 0.0
    workers: int = 1
    host: Dict[str, Any] = field(default_factory=dict)

    def finish(self) -> None:
        self.elapsed_s = time.time() - self.started
        process = psutil.Process()
        self.host = {
            "cpu_count_logical": psutil.cpu_count(logical=True),
            "cpu_count_physical": psutil.cpu_count(logical=False),
            "memory_total_bytes": psutil.virtual_memory().total,
            "peak_rss_bytes": process.memory_info().rss,
        }

    def save(self, directory: Path) -> None:
        self.finish()
        with open(directory / OutputNames.MANIFEST, 'w') as f:
            json.dump(asdict(self), f, indent=2)


# =============================================================================
# Argument helpers


def parse_size(text: str) -> Tuple[int, int]:
    """Parse 'WxH'."""
    try:
        width, height = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}")
    if width <= 0 or height <= 0:
        raise argparse.ArgumentTypeError(f"sizes must be positive, got {text!r}")
    return width, height


def parse_floats(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _split_entries(entries: Dict[str, str]) -> Tuple[Dict[str, str], Dict[str, str]]:
    weather_keys = {f.name for f in fields(WeatherConfig)}
    weather, attack = {}, {}
    for key, value in entries.items():
        if key in weather_keys:
            weather[key] = value
        elif key in ATTACK_KEYS:
            attack[key] = value
        else:
            raise UsageError(f"unknown setting {key!r} in run configuration")
    return weather, attack


def resolve_weather(preset: Optional[str], config_path: Optional[str]) -> Tuple[WeatherConfig, Dict[str, str]]:
    """
    Weather config from a preset, a key=value file, or a file layered on a preset.

    Returns:
        The weather config and the attack settings found in the file
    """
    if preset is None and config_path is None:
        raise UsageError("one of --preset or --config is required")
    base = get_preset(preset) if preset is not None else None
    if config_path is None:
        assert base is not None
        return base, {}
    try:
        weather_entries, attack_entries = _split_entries(parse_key_value_file(Path(config_path)))
        return WeatherConfig.from_mapping(weather_entries, base), attack_entries
    except ContractError as e:
        raise UsageError(str(e))


def _prepare_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_flow_outputs(out: Path, benign: FlowField, attacked: FlowField) -> float:
    """Both predictions as .flo and color-wheel PPM sharing one normalization radius."""
    write_flo(out / OutputNames.FLOW_BENIGN, benign)
    write_flo(out / OutputNames.FLOW_ATTACKED, attacked)
    radius = compare(benign, attacked).visualization_radius
    benign_vis, _ = flow_to_color(benign, radius)
    attacked_vis, _ = flow_to_color(attacked, radius)
    write_ppm(out / OutputNames.FLOW_BENIGN_VIS, benign_vis)
    write_ppm(out / OutputNames.FLOW_ATTACKED_VIS, attacked_vis)
    return radius


def _write_metrics(out: Path, payload: Dict[str, Any]) -> None:
    with open(out / OutputNames.METRICS, 'w') as f:
        json.dump(payload, f, indent=2)


# =============================================================================
# Commands


def cmd_presets(args: argparse.Namespace) -> int:
    """List presets, or print one in the run-config format."""
    if args.name:
        console.print(format_key_value(get_preset(args.name).to_dict()), end="", markup=False, highlight=False)
        return EXIT_OK
    table = Table(title="Weather presets")
    for column in ("name", "count", "size", "template", "blend", "theta", "blur"):
        table.add_column(column)
    for name, cfg in presets().items():
        blur = f"{cfg.blur_length} x {cfg.blur_particles}" if cfg.blur_enabled else "-"
        table.add_row(
            name, str(cfg.count), str(cfg.base_size), cfg.template_kind,
            cfg.blend_mode, str(cfg.transparency_base), blur,
        )
    console.print(table)
    return EXIT_OK


def cmd_augment(args: argparse.Namespace) -> int:
    """Sample particles, render both frames at beta=250, and measure the victim's reaction."""
    if args.dump_preset:
        args.name = args.dump_preset
        return cmd_presets(args)
    if args.scene is None or args.out is None:
        raise UsageError("augment needs a scene directory and --out")

    manifest = RunManifest("augment", args.scene, args.preset, args.config, args.seed, args.out, sys.argv[1:])
    manifest.workers = config.worker_count()
    weather, _ = resolve_weather(args.preset, args.config)
    scene = load_scene(args.scene)
    out = _prepare_out(args.out)

    ps = sample_particles(scene, weather, args.seed)
    expanded = expand_motion_blur(ps)
    params = RenderParams.rendering(weather.blend_mode)
    output = render(scene, expanded, params)
    flow_cfg = FlowEstimatorConfig()
    benign = estimate_flow(scene.frame1, scene.frame2, flow_cfg)
    attacked = estimate_flow(output.aug1, output.aug2, flow_cfg)

    write_ppm(out / OutputNames.AUG1, output.aug1)
    write_ppm(out / OutputNames.AUG2, output.aug2)
    radius = _write_flow_outputs(out, benign, attacked)
    report = compare(benign, attacked)
    _write_metrics(out, {
        "robustness_aee": report.robustness_aee,
        "aee_zero_target": report.aee,
        "epe_max": report.epe_max,
        "visualization_radius": radius,
        "visualization_normalization": "per-image max magnitude, shared by both flows",
        "beta": BETA_RENDER,
        "particles": len(ps),
        "rendered_particles": len(expanded),
    })
    save_particles(out / OutputNames.PARTICLES, ps)
    if args.debug_csv:
        write_debug_csv(out / OutputNames.DEBUG_CSV, scene, expanded, params)
    manifest.save(out)

    console.print(f"AEE(f, f-check) = {report.robustness_aee:.6f}")
    logger.info(f"Augment finished: {len(ps)} particles, robustness AEE {report.robustness_aee:.6f}")
    return EXIT_OK


def _attack_config(args: argparse.Namespace, file_entries: Dict[str, str], shape: Tuple[int, int]) -> AttackConfig:
    settings: Dict[str, Any] = {}
    try:
        for key in ("learning_rate", "alpha1", "alpha2"):
            if key in file_entries:
                settings[key] = float(file_entries[key])
        if "steps" in file_entries:
            settings["steps"] = int(file_entries["steps"])
        if "variable_mask" in file_entries:
            settings["variable_mask"] = parse_mask(file_entries["variable_mask"])
    except ValueError as e:
        raise UsageError(f"invalid attack setting: {e}")

    if args.vars is not None:
        settings["variable_mask"] = parse_mask(args.vars)
    if args.steps is not None:
        settings["steps"] = args.steps
    if args.lr is not None:
        settings["learning_rate"] = args.lr
    if args.alpha is not None:
        settings["alpha1"] = settings["alpha2"] = args.alpha
    if args.target != "zero":
        target = read_flo(args.target)
        if target.shape != shape:
            raise UsageError(f"target flow is {target.shape}, scene is {shape}")
        settings["target"] = target
    return AttackConfig(**settings)


def cmd_attack(args: argparse.Namespace) -> int:
    """Optimize the particles against the victim and write the report and images."""
    manifest = RunManifest("attack", args.scene, args.preset, args.config, args.seed, args.out, sys.argv[1:])
    manifest.workers = config.worker_count()
    scene = load_scene(args.scene)
    particles = None
    if args.resume:
        particles = load_particles(args.resume)
        if particles.expanded:
            raise UsageError("--resume needs a snapshot of unexpanded particles")
        weather, file_entries = particles.config, {}
        if args.config:
            _, file_entries = resolve_weather(args.preset or "snow", args.config)
    else:
        weather, file_entries = resolve_weather(args.preset, args.config)
    try:
        acfg = _attack_config(args, file_entries, (scene.height, scene.width))
    except ContractError as e:
        raise UsageError(str(e))
    out = _prepare_out(args.out)

    report = run_attack(scene, weather, acfg, args.seed, particles=particles)

    report.save(out / OutputNames.REPORT)
    write_ppm(out / OutputNames.AUG1, report.final.aug1)
    write_ppm(out / OutputNames.AUG2, report.final.aug2)
    write_ppm(out / OutputNames.BEST_AUG1, report.best.aug1)
    write_ppm(out / OutputNames.BEST_AUG2, report.best.aug2)
    radius = _write_flow_outputs(out, report.benign_flow, report.final.flow)
    write_flo(out / OutputNames.FLOW_BEST, report.best.flow)
    write_ppm(out / OutputNames.FLOW_BEST_VIS, flow_to_color(report.best.flow, radius)[0])
    _write_metrics(out, {
        "robustness_aee": report.final_aee,
        "initial_robustness_aee": report.initial_aee,
        "best_robustness_aee": report.best_aee,
        "best_step": report.best_step,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "visualization_radius": radius,
        "visualization_normalization": "per-image max magnitude, shared by both flows",
    })
    save_particles(out / OutputNames.PARTICLES, report.final_particles)
    manifest.save(out)

    console.print(
        f"AEE(f, f-check): initial {report.initial_aee:.6f}, final {report.final_aee:.6f}, "
        f"best {report.best_aee:.6f} (step {report.best_step})"
    )
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Run every finite-difference suite and print the worst relative error of each."""
    width, height = args.size
    if max(width, height) > GRADCHECK_MAX_SIDE:
        raise UsageError(f"gradcheck is limited to {GRADCHECK_MAX_SIDE}x{GRADCHECK_MAX_SIDE}, got {width}x{height}")
    results = run_all(width, height, args.particles, args.seed)

    table = Table(title=f"Gradient check {width}x{height}, {args.particles} particles")
    table.add_column("suite")
    table.add_column("coords", justify="right")
    table.add_column("max rel. error", justify="right")
    table.add_column("result")
    for result in results:
        verdict = "[green]pass[/green]" if result.passed else "[red]FAIL[/red]"
        table.add_row(result.name, str(result.checked), f"{result.max_rel_error:.2e}", verdict)
    console.print(table)

    worst = max(result.max_rel_error for result in results)
    passed = all(result.passed for result in results)
    console.print(f"max relative error {worst:.2e}: {'pass' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_FAILURE


def cmd_eval(args: argparse.Namespace) -> int:
    """Print AEE(f, f-check) for externally produced flows."""
    if args.dir:
        benign, attacked = external_flow_source(args.dir)
    elif args.benign and args.attacked:
        benign, attacked = read_flo(args.benign), read_flo(args.attacked)
    else:
        raise UsageError("eval needs --benign and --attacked, or --dir")
    console.print(f"{aee(benign, attacked)}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    """Write a synthetic scene bundle with its ground-truth flow."""
    width, height = args.size
    scene, flow = synth_scene(width, height, args.seed, args.translation, args.planes)
    save_scene(args.out, scene)
    write_flo(Path(args.out) / OutputNames.FLOW_GT, flow)
    console.print(f"Wrote {width}x{height} scene to {args.out}")
    return EXIT_OK


def cmd_config(args: argparse.Namespace) -> int:
    """Print the engine settings, after an optional set or reset; changes are saved."""
    if args.action == "set":
        try:
            value = config.parse_setting(args.key, args.value)
        except ContractError as e:
            raise UsageError(str(e))
        config.set(args.key, value)
        if not config.save():
            return EXIT_FAILURE
        logger.info(f"Config {args.key} set to {value!r}")
    elif args.action == "reset":
        config.reset()
        logger.info("Config reset to defaults")
    console.print(format_key_value(config.as_dict()), end="", highlight=False)
    console.print(f"# {config.config_file}", highlight=False, soft_wrap=True)
    return EXIT_OK


# =============================================================================
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="downpour", description="3D-consistent weather augmentation and attacks on optical flow")
    parser.add_argument("-v", "--verbose", action="store_true", help="log to the terminal as well")
    commands = parser.add_subparsers(dest="command", required=True)

    augment = commands.add_parser("augment", help="render weather into a scene")
    augment.add_argument("scene", nargs="?")
    augment.add_argument("--preset")
    augment.add_argument("--config")
    augment.add_argument("--seed", type=int, default=0)
    augment.add_argument("--out")
    augment.add_argument("--debug-csv", action="store_true", help="also write per-particle projections")
    augment.add_argument("--dump-preset", metavar="NAME", help="print a preset as key=value lines and exit")
    augment.set_defaults(handler=cmd_augment)

    attack = commands.add_parser("attack", help="optimize weather against the victim flow")
    attack.add_argument("scene")
    attack.add_argument("--preset")
    attack.add_argument("--config")
    attack.add_argument("--vars", help="comma-separated subset of p1,p2,col,transp")
    attack.add_argument("--steps", type=int, help=f"default {DEFAULT_STEPS}")
    attack.add_argument("--lr", type=float, help=f"default {DEFAULT_LEARNING_RATE}")
    attack.add_argument("--alpha", type=float, help=f"alpha1 = alpha2, default {DEFAULT_ALPHA}")
    attack.add_argument("--target", default="zero", help="'zero' or a .flo file")
    attack.add_argument("--seed", type=int, default=0)
    attack.add_argument("--resume", help="start from a particles.npz snapshot")
    attack.add_argument("--out", required=True)
    attack.set_defaults(handler=cmd_attack)

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient checks")
    gradcheck.add_argument("--size", type=parse_size, default=GRADCHECK_DEFAULT_SIZE, help="WxH")
    gradcheck.add_argument("--particles", type=int, default=GRADCHECK_DEFAULT_PARTICLES)
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.set_defaults(handler=cmd_gradcheck)

    evaluate = commands.add_parser("eval", help="AEE between two external flows")
    evaluate.add_argument("--benign")
    evaluate.add_argument("--attacked")
    evaluate.add_argument("--dir", help="directory with benign.flo and attacked.flo")
    evaluate.set_defaults(handler=cmd_eval)

    synth = commands.add_parser("synth", help="write a synthetic scene bundle")
    synth.add_argument("--out", required=True)
    synth.add_argument("--size", type=parse_size, default=DEFAULT_SYNTH_SIZE, help="WxH")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--translation", type=parse_floats, default=DEFAULT_SYNTH_TRANSLATION)
    synth.add_argument("--planes", type=parse_floats, default=DEFAULT_SYNTH_PLANES)
    synth.set_defaults(handler=cmd_synth)

    presets_cmd = commands.add_parser("presets", help="list weather presets")
    presets_cmd.add_argument("name", nargs="?")
    presets_cmd.set_defaults(handler=cmd_presets)

    config_cmd = commands.add_parser("config", help="show or change engine settings")
    actions = config_cmd.add_subparsers(dest="action", required=True)
    actions.add_parser("show", help="print every setting")
    set_cmd = actions.add_parser("set", help="change one setting and save it")
    set_cmd.add_argument("key")
    set_cmd.add_argument("value")
    actions.add_parser("reset", help="restore the defaults and save them")
    config_cmd.set_defaults(handler=cmd_config)
    return parser


def setup_logging(verbose: bool) -> None:
    """File log in the config directory; --verbose adds a rich handler on stderr."""
    log_dir = config.config_dir
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / config.get("log_file", "downpour.log")

    handlers: List[logging.Handler] = [logging.FileHandler(log_file)]
    if verbose:
        handlers.append(RichHandler(console=Console(stderr=True), show_path=False))
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, str(config.get("log_level", "INFO")), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point for the command line."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    logger.info(f"Starting downpour {args.command} ({THREADS_ENV_VAR}={os.environ.get(THREADS_ENV_VAR, 'unset')})")

    try:
        return int(args.handler(args))
    except (UsageError, UnknownPresetError) as e:
        logger.error(f"Usage error: {e}")
        console.print(f"[red]error:[/red] {e}", highlight=False)
        return EXIT_USAGE
    except (DownpourError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        console.print(f"[red]error:[/red] {e}", highlight=False)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
