"""
Command line interface for the calibration stages.

    run_calibration.py simulate  --config config/config.json --out runs/demo
    run_calibration.py detect    --out runs/demo [--input audio.wav ...] [--mode peaks|claps]
    run_calibration.py track     --out runs/demo [--input peaks.csv]
    run_calibration.py calibrate --out runs/demo [--input tdoa.csv [truth_scene.json]]
    run_calibration.py mirrors   --out runs/demo [--input peaks.csv calibrated_scene.json]
    run_calibration.py evaluate  --out runs/demo --input estimated.json truth.json [tdoa.csv] [tracking_stages.csv]
    run_calibration.py pipeline  --out runs/demo

Without --input a stage reads the upstream files from --out.
Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

import argparse
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from src.core.config_loader import load_pipeline_config
from src.core.exceptions import CalibrationError, ValidationFailure
from src.core.pipeline_config import LoggingConfig, PipelineConfig, RuntimeSettings
from src.core.run_monitor import get_monitor
from src.pipeline import calibration_pipeline as stages
from src.pipeline.calibration_pipeline import CalibrationPipeline

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "detect", "track", "calibrate", "mirrors", "evaluate", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Microphone array self-calibration from ambient sound",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("command", choices=COMMANDS, help="Stage to run")
    parser.add_argument("--config", type=str, help="Path to config.json (default: CALIB_CONFIG_PATH)")
    parser.add_argument("--seed", type=int, help="Override the top-level seed")
    parser.add_argument("--out", type=str, default="runs/latest", help="Output directory")
    parser.add_argument("--input", type=str, nargs="+", help="Input artifact paths")
    parser.add_argument("--mode", choices=("peaks", "claps"), default="peaks", help="detect: GCC peaks or clap events")
    return parser


def configure_logging(options: LoggingConfig, level: Optional[str] = None):
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if options.file:
        Path(options.file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(options.file))
    logging.basicConfig(
        level=getattr(logging, (level or options.level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
    )


def _first_existing(*paths: Path) -> Path:
    for path in paths:
        if path.exists():
            return path
    return paths[0]


def _split_evaluate_inputs(inputs: Sequence[str]) -> Dict[str, Any]:
    """Two scene JSONs first; CSVs are told apart by their header."""
    scenes = [p for p in inputs if p.endswith(".json")]
    tables = [p for p in inputs if p.endswith(".csv")]
    if len(scenes) != 2:
        raise ValidationFailure("evaluate needs --input ESTIMATED.json TRUTH.json [tdoa.csv] [tracking_stages.csv]")
    result: Dict[str, Any] = {"estimated_path": scenes[0], "truth_path": scenes[1],
                              "tdoa_path": None, "stages_path": None}
    for table in tables:
        header = pd.read_csv(table, nrows=0).columns
        result["stages_path" if "stage" in header else "tdoa_path"] = table
    return result


def run_command(args: argparse.Namespace, config: PipelineConfig) -> Any:
    """Dispatch one parsed command; returns the stage's in-memory result."""
    pipeline = CalibrationPipeline(config, monitor=_monitor(config))
    out = Path(args.out)
    inputs = args.input or []

    if args.command == "simulate":
        return pipeline.simulate(out)
    if args.command == "detect":
        return pipeline.detect(inputs or [out / stages.AUDIO_FILE], out, mode=args.mode)
    if args.command == "track":
        return pipeline.track(inputs[0] if inputs else out / stages.PEAKS_FILE, out)
    if args.command == "calibrate":
        tdoa_path = inputs[0] if inputs else _first_existing(out / stages.TDOA_FILE, out / stages.SIM_TDOA_FILE)
        truth_path = inputs[1] if len(inputs) > 1 else None
        return pipeline.calibrate(tdoa_path, out, truth_path=truth_path)
    if args.command == "mirrors":
        peaks_path = inputs[0] if inputs else out / stages.PEAKS_FILE
        scene_path = inputs[1] if len(inputs) > 1 else out / stages.CALIBRATED_SCENE_FILE
        return pipeline.mirrors(peaks_path, scene_path, out)
    if args.command == "evaluate":
        if inputs:
            return pipeline.evaluate(out_dir=out, **_split_evaluate_inputs(inputs))
        estimated = _first_existing(out / stages.MIRRORS_SCENE_FILE, out / stages.CALIBRATED_SCENE_FILE)
        return pipeline.evaluate(estimated, out / stages.SCENE_FILE, out)
    return pipeline.run_all(out)


def _monitor(config: PipelineConfig):
    path = config.logging.monitor_file
    return get_monitor(path) if path else None


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    settings = RuntimeSettings()
    config_path = args.config or settings.config_path
    overrides = {"seed": args.seed} if args.seed is not None else None

    try:
        config = load_pipeline_config(config_path, overrides)
    except CalibrationError as exc:
        logging.basicConfig(level=logging.INFO)
        logger.error(str(exc))
        return exc.exit_code

    if settings.monitor_file:
        config.logging.monitor_file = settings.monitor_file
    configure_logging(config.logging, settings.log_level)
    monitor = _monitor(config)
    if monitor:
        monitor.start_run(args.command, config.seed, str(args.out))

    exit_code = 0
    try:
        run_command(args, config)
    except CalibrationError as exc:
        exit_code = exc.exit_code
        logger.error(f"{args.command} failed: {exc}")
        if monitor:
            monitor.log_error(type(exc).__name__, str(exc))
    except ValueError as exc:
        exit_code = 2
        logger.error(f"{args.command} failed: {exc}")
        if monitor:
            monitor.log_error(type(exc).__name__, str(exc))
    finally:
        if monitor:
            monitor.end_run(exit_code == 0, exit_code)
    return exit_code
