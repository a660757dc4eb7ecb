"""
Pipeline configuration loading.

config.json is read, `${VAR}` / `${VAR:default}` references are filled from the
environment (and .env), CLI overrides are merged in, and the result is
validated into PipelineConfig.
"""

import os
import re
import json
import logging
from typing import Any, Dict, Optional
from pathlib import Path

from pydantic import ValidationError

from src.core.exceptions import ConfigError
from src.core.pipeline_config import PipelineConfig

logger = logging.getLogger(__name__)

ENV_PATTERN = re.compile(r'\$\{([^}:]+)(?::([^}]*))?\}')

# Try to load dotenv if available
try:
    from dotenv import load_dotenv
    # .env next to run_calibration.py
    env_path = Path(__file__).parent.parent.parent / '.env'
    load_dotenv(dotenv_path=env_path, override=False)
    if env_path.exists():
        logger.info(f"Environment variables loaded from {env_path}")
except ImportError:
    logger.info("python-dotenv not installed, using system environment variables only")


def load_config(config_path: str = "config/config.json") -> Dict[str, Any]:
    """
    Read a JSON config and expand environment references in every string.

    Example:
        {"audio": {"sample_rate": "${CALIB_SAMPLE_RATE:96000}"}}

    Values stay strings after substitution; PipelineConfig coerces them.

    Raises:
        ConfigError: file missing, not JSON, or a required variable unset
    """
    path = Path(config_path)
    if not path.exists():
        logger.error(f"Configuration file not found: {config_path}")
        raise ConfigError(f"Configuration file not found: {config_path}")

    try:
        raw = json.loads(path.read_text(encoding='utf-8'))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Configuration file {config_path} is not valid JSON: {e}") from e

    config = expand_env(raw)
    logger.info(f"Configuration loaded from {config_path}")
    return config


def load_pipeline_config(config_path: Optional[str] = None,
                         overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Validated PipelineConfig from a file, built-in defaults, or both.

    `overrides` (e.g. the CLI --seed) are merged key by key into nested
    sections. Without a file, `audio.sample_rate` has to come from them.

    Raises:
        ConfigError: as load_config, or a value failing validation
    """
    raw = load_config(config_path) if config_path else {}
    merged = merge_sections(raw, overrides or {})
    try:
        return PipelineConfig.model_validate(merged)
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"Invalid configuration at '{location}': {first['msg']}") from e


def merge_sections(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Copy of `base` with `overrides` applied; nested dicts merge instead of replacing."""
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_sections(merged[key], value)
        else:
            merged[key] = value
    return merged


def expand_env(obj: Any) -> Any:
    """Substitute environment references in all strings of a JSON tree."""
    if isinstance(obj, dict):
        return {key: expand_env(value) for key, value in obj.items()}
    if isinstance(obj, list):
        return [expand_env(item) for item in obj]
    if isinstance(obj, str) and '${' in obj:
        return ENV_PATTERN.sub(_env_value, obj)
    return obj


def _env_value(match: re.Match) -> str:
    name, default = match.group(1), match.group(2)
    value = os.getenv(name)
    if value is not None:
        return value
    if default is not None:
        return default
    raise ConfigError(f"Required environment variable '{name}' is not set and has no default")


if __name__ == "__main__":
    # Print the template after substitution and validation
    logging.basicConfig(level=logging.INFO)

    template = Path(__file__).parent.parent.parent / "config" / "config.template.json"
    config = load_pipeline_config(str(template))
    print(json.dumps(config.model_dump(mode="json"), indent=2))
