"""Configuration module for peginsert.

This module loads the packaged defaults, merges user files and experiment
overrides on top of them, and hands typed sections to the modules that
consume them.
"""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import yaml

from peginsert.errors import InvalidConfig

# Set up logging
logger = logging.getLogger(__name__)

# Default configuration file path
DEFAULT_CONFIG_FILE = Path(__file__).parent / "default_config.yaml"

# Environment variable naming the root directory for run outputs
RUN_DIR_ENV = "PEGINSERT_RUN_DIR"
DEFAULT_RUN_ROOT = Path("runs")

REQUIRED_SECTIONS = ["env", "reward", "dsl", "ppo", "harness"]


def load_default_config() -> Dict:
    """Load default configuration from default_config.yaml.

    Returns:
        Default configuration dictionary
    """
    with open(DEFAULT_CONFIG_FILE, "r") as f:
        config = yaml.safe_load(f)
    return config or {}


def load_yaml(path: Union[str, Path]) -> Dict:
    """Read a YAML mapping from disk.

    Args:
        path: File to read

    Returns:
        Parsed mapping (empty dict for an empty file)

    Raises:
        InvalidConfig: If the file is missing, unparsable or not a mapping
    """
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"Configuration file not found: {path}")
    try:
        with open(path, "r") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise InvalidConfig(f"Error parsing YAML in {path}: {e}") from e

    if data is None:
        logger.warning(f"Empty configuration file: {path}")
        return {}
    if not isinstance(data, dict):
        raise InvalidConfig(f"{path} must contain a mapping, got {type(data).__name__}")
    return data


def load_config(config_file: Optional[Union[str, Path]] = None) -> Dict:
    """Load configuration from YAML file.

    Args:
        config_file: Path to YAML configuration file (optional)

    Returns:
        Configuration dictionary, user values merged over the defaults
    """
    # Start with default configuration
    config = load_default_config()

    # If no config file specified, return default config
    if not config_file:
        return config

    user_config = load_yaml(config_file)
    merge_config(config, user_config)
    logger.info(f"Loaded configuration from {config_file}")
    return config


def merge_config(target: Dict, source: Dict) -> None:
    """Recursively merge source dict into target dict.

    Args:
        target: Target dictionary to merge into
        source: Source dictionary to merge from
    """
    for key, value in source.items():
        if key in target and isinstance(target[key], dict) and isinstance(value, dict):
            merge_config(target[key], value)
        else:
            target[key] = copy.deepcopy(value)


def with_overrides(config: Dict, overrides: Optional[Dict]) -> Dict:
    """Return a deep copy of config with overrides merged in."""
    merged = copy.deepcopy(config)
    if overrides:
        merge_config(merged, overrides)
    return merged


def get_config_value(config: Dict, path: str, default: Any = None) -> Any:
    """Get configuration value using dot notation path.

    Args:
        config: Configuration dictionary
        path: Configuration path (e.g., "env.contact_stiffness")
        default: Default value if path not found

    Returns:
        Configuration value or default
    """
    value = config
    try:
        for part in path.split("."):
            value = value[part]
        return value
    except (KeyError, TypeError):
        return default


def set_config_value(config: Dict, path: str, value: Any) -> None:
    """Set one configuration value by dot-notation path, creating missing sections.

    Raises:
        InvalidConfig: If the path is empty or runs through a non-mapping value
    """
    parts = path.split(".")
    if not all(parts):
        raise InvalidConfig(f"Malformed configuration path '{path}'")
    current = config
    for depth, part in enumerate(parts[:-1]):
        current = current.setdefault(part, {})
        if not isinstance(current, dict):
            raise InvalidConfig(f"'{'.'.join(parts[: depth + 1])}' is a value, not a section")
    current[parts[-1]] = value


def apply_assignments(config: Dict, assignments: Iterable[str]) -> Dict:
    """Apply command-line `key=value` overrides to a configuration.

    Values are parsed as YAML, so numbers, booleans and lists keep their type.

    Returns:
        The same configuration, updated in place

    Raises:
        InvalidConfig: If an assignment has no '=' or its value is not valid YAML
    """
    for assignment in assignments:
        path, sep, raw = assignment.partition("=")
        if not sep:
            raise InvalidConfig(f"Override '{assignment}' is not of the form key=value")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise InvalidConfig(f"Override '{assignment}' has an unreadable value: {e}") from e
        if isinstance(value, str):
            # YAML 1.1 reads exponent floats without a dot (1e-4) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        set_config_value(config, path.strip(), value)
        logger.debug(f"Override {path.strip()} = {value!r}")
    return config


def section(config: Dict, name: str, known_keys: Iterable[str]) -> Dict:
    """Fetch one config section, warning about keys nobody reads.

    Args:
        config: Full configuration dictionary
        name: Section name
        known_keys: Keys the consuming dataclass understands

    Returns:
        The known keys of the section (empty if absent)
    """
    values = config.get(name) or {}
    if not isinstance(values, dict):
        raise InvalidConfig(f"Section '{name}' must be a mapping")
    known = set(known_keys)
    unknown = sorted(set(values) - known)
    for key in unknown:
        logger.warning(f"Ignoring unknown key '{name}.{key}'")
    return {key: value for key, value in values.items() if key in known}


def save_config(config: Dict, config_file: Union[str, Path]) -> bool:
    """Save configuration to YAML file.

    Args:
        config: Configuration dictionary
        config_file: Path to YAML configuration file

    Returns:
        True if config was saved successfully, False otherwise
    """
    config_path = Path(config_file)

    try:
        os.makedirs(config_path.parent, exist_ok=True)
        with open(config_path, "w") as f:
            yaml.safe_dump(config, f, default_flow_style=False, sort_keys=False)
        logger.info(f"Saved configuration to {config_path}")
        return True
    except (OSError, yaml.YAMLError) as e:
        logger.error(f"Error saving configuration: {e}")
        return False


def config_hash(config: Dict) -> str:
    """Stable sha256 of a configuration, independent of key order."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def run_root(cli_value: Optional[Union[str, Path]] = None) -> Path:
    """Resolve the directory that holds run outputs.

    The command-line value wins over PEGINSERT_RUN_DIR, which wins over
    ./runs.
    """
    if cli_value:
        return Path(cli_value)
    env_value = os.environ.get(RUN_DIR_ENV)
    if env_value:
        return Path(env_value)
    return DEFAULT_RUN_ROOT


def validate_config(config: Dict) -> bool:
    """Validate configuration.

    Args:
        config: Configuration dictionary

    Returns:
        True if configuration is valid, False otherwise
    """
    for name in REQUIRED_SECTIONS:
        if name not in config:
            logger.error(f"Missing required configuration section: {name}")
            return False

    env = config.get("env", {})
    low = get_config_value(env, "hole_domain.low", [-15.0, -15.0])
    high = get_config_value(env, "hole_domain.high", [15.0, 15.0])
    if any(lo > hi for lo, hi in zip(low, high)):
        logger.error("Hole randomization domain is empty")
        return False

    for key in ("contact_stiffness", "friction", "horizon"):
        if env.get(key, 1) <= 0:
            logger.error(f"env.{key} must be positive")
            return False

    reward = config.get("reward", {})
    if not 0 < reward.get("delta1", 1e-4) < reward.get("delta2", 1e-2):
        logger.error("reward thresholds must satisfy delta2 > delta1 > 0")
        return False

    return True
