"""
Configuration management for downpour
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import psutil

from constants import FOOTPRINT_CACHE_MB, RENDER_CHUNK_SIZE
from utils.validators import ContractError

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "DOWNPOUR_THREADS"
CONFIG_DIR_ENV_VAR = "DOWNPOUR_CONFIG_DIR"


class Config:
    """Manages engine settings and user preferences."""

    DEFAULT_CONFIG: Dict[str, Any] = {
        "threads": 0,  # 0 = one worker per physical core
        "log_level": "INFO",
        "log_file": "downpour.log",
        "render_chunk_size": RENDER_CHUNK_SIZE,
        "footprint_cache_mb": FOOTPRINT_CACHE_MB,
    }

    def __init__(self, config_dir: Optional[Path] = None) -> None:
        if config_dir is None:
            override = os.environ.get(CONFIG_DIR_ENV_VAR)
            config_dir = Path(override) if override else Path.home() / ".config" / "downpour"
        self.config_dir = config_dir
        self.config_file = self.config_dir / "config.json"
        self._config = self._load()

    def _load(self) -> Dict[str, Any]:
        """Load configuration from file."""
        if self.config_file.exists():
            try:
                with open(self.config_file, 'r') as f:
                    loaded_config: Dict[str, Any] = json.load(f)
                    return {**self.DEFAULT_CONFIG, **loaded_config}
            except json.JSONDecodeError as e:
                logger.warning(f"Config file is corrupted ({e}). Using defaults.")
                return self.DEFAULT_CONFIG.copy()
            except (OSError, IOError) as e:
                logger.warning(f"Could not read config file: {e}. Using defaults.")
                return self.DEFAULT_CONFIG.copy()
        return self.DEFAULT_CONFIG.copy()

    def save(self) -> bool:
        """Save configuration to file."""
        try:
            self.config_dir.mkdir(parents=True, exist_ok=True)
            with open(self.config_file, 'w') as f:
                json.dump(self._config, f, indent=2)
            return True
        except (OSError, IOError) as e:
            logger.error(f"Could not save config file: {e}")
            return False
        except (TypeError, ValueError) as e:
            logger.error(f"Invalid config data: {e}")
            return False

    def as_dict(self) -> Dict[str, Any]:
        """Every current setting."""
        return dict(self._config)

    def get(self, key: str, default: Optional[Any] = None) -> Any:
        """Get a configuration value."""
        return self._config.get(key, default)

    def set(self, key: str, value: Any) -> None:
        """Set a configuration value."""
        self._config[key] = value

    def parse_setting(self, key: str, raw: str) -> Any:
        """
        Convert a command-line value to the type of the setting's default.

        Raises:
            ContractError: On unknown keys or values of the wrong type
        """
        if key not in self.DEFAULT_CONFIG:
            raise ContractError(f"unknown config key {key!r}; choose from {', '.join(self.DEFAULT_CONFIG)}")
        if isinstance(self.DEFAULT_CONFIG[key], int):
            try:
                return int(raw)
            except ValueError:
                raise ContractError(f"{key} expects an integer, got {raw!r}")
        return raw

    def reset(self) -> None:
        """Reset configuration to defaults."""
        self._config = self.DEFAULT_CONFIG.copy()
        self.save()

    def worker_count(self) -> int:
        """
        Number of worker threads for rendering.

        DOWNPOUR_THREADS wins over the config file; both fall back to the
        number of physical cores.
        """
        env_value = os.environ.get(THREADS_ENV_VAR)
        if env_value:
            try:
                threads = int(env_value)
                if threads > 0:
                    return threads
            except ValueError:
                pass
            logger.warning(f"Ignoring invalid {THREADS_ENV_VAR}={env_value!r}")

        configured = self.get("threads", 0)
        if isinstance(configured, int) and configured > 0:
            return configured

        cores = psutil.cpu_count(logical=False)
        return cores if cores else 1

    def chunk_size(self) -> int:
        """Particles handed to a worker at once."""
        size = self.get("render_chunk_size", RENDER_CHUNK_SIZE)
        return size if isinstance(size, int) and size > 0 else RENDER_CHUNK_SIZE

    def footprint_cache_mb(self) -> int:
        """Memory budget of the footprint cache an attack keeps across steps."""
        budget = self.get("footprint_cache_mb", FOOTPRINT_CACHE_MB)
        return budget if isinstance(budget, int) and budget > 0 else FOOTPRINT_CACHE_MB


def parse_key_value_file(path: Path) -> Dict[str, str]:
    """
    Parse a plain-text run configuration.

    Args:
        path: File with one ``key=value`` per line; ``#`` starts a comment

    Returns:
        Mapping of stripped keys to stripped raw values

    Raises:
        ContractError: If a line has no ``=`` or a key repeats
    """
    entries: Dict[str, str] = {}
    with open(path, 'r') as f:
        for line_number, raw_line in enumerate(f, start=1):
            line = raw_line.split('#', 1)[0].strip()
            if not line:
                continue
            if '=' not in line:
                raise ContractError(f"{path}:{line_number}: expected key=value, got {line!r}")
            key, value = (part.strip() for part in line.split('=', 1))
            if not key:
                raise ContractError(f"{path}:{line_number}: empty key")
            if key in entries:
                raise ContractError(f"{path}:{line_number}: duplicate key {key!r}")
            entries[key] = value
    return entries


def format_key_value(entries: Dict[str, Any]) -> str:
    """Render a mapping in the key=value run-config format."""
    lines = []
    for key, value in entries.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


# Global config instance
config = Config()
