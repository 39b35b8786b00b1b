"""
Experiment presets and YAML configuration loading.

A resolved configuration is a dict with a ``sim`` section (SimConfig fields)
and a ``train`` section (TrainConfig fields). Values come from a preset,
then an optional YAML/JSON file, then explicit overrides.
"""

import copy
import logging
import os
from pathlib import Path

import yaml

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

THREADS_ENV = "FLOTAPINN_THREADS"
DEFAULT_PRESET = "desk"
SECTIONS = ("sim", "train")

PRESETS = {
    "desk": {
        "sim": {
            "horizons": {"train": 2000, "val": 1000, "test": 1200},
            "steady_start": True,
        },
        "train": {
            "u_layers": [12, 32, 64, 32, 2],
            "r_layers": [15, 32, 1],
            "lr": 1e-3,
            "lambda_lr": 1e-2,
            "batch_size": 128,
            "patience": 50,
            "tolerance": 1e-5,
            "max_steps": 20000,
            "calibration_steps": 1000,
            "grid": {"max_depth": [4, 8], "n_trees": [20], "max_features": [4, 12]},
        },
    },
    "cell1-paper": {
        "sim": {
            "horizons": {"train": 17724, "val": 8936, "test": 11679},
            "steady_start": True,
        },
        "train": {
            "u_layers": [12, 256, 512, 256, 2],
            "r_layers": [15, 100, 1],
            "lr": 1e-5,
            "lambda_lr": 1e-3,
            "batch_size": 128,
            "patience": 20000,
            "tolerance": 1e-5,
            "max_steps": 2000000,
            "log_every": 100,
            "grid": {"max_depth": [4, 8, 12], "n_trees": [50, 100], "max_features": [4, 8, 12]},
        },
    },
    "cell2-paper": {
        "sim": {
            "horizons": {"train": 17551, "val": 9157, "test": 12430},
            "steady_start": True,
        },
        "train": {
            "u_layers": [12, 128, 256, 128, 2],
            "r_layers": [15, 400, 1],
            "lr": 1e-5,
            "lambda_lr": 1e-3,
            "batch_size": 128,
            "patience": 30000,
            "tolerance": 1e-5,
            "max_steps": 3000000,
            "log_every": 100,
            "grid": {"max_depth": [4, 8, 12], "n_trees": [50, 100], "max_features": [4, 8, 12]},
        },
    },
}


def preset(name: str) -> dict:
    try:
        return copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigurationError(f"unknown preset '{name}', expected one of {sorted(PRESETS)}") from None


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``override`` wins, nested dicts are merged key by key."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config_file(path: str | Path) -> dict:
    """Read a YAML (or JSON) config file with ``sim``/``train``/``preset`` keys.

    Raises:
        ConfigurationError: missing file, unparsable content or unknown key
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"error loading config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {path} must hold a mapping")
    for key in data:
        if key not in (*SECTIONS, "preset"):
            raise ConfigurationError(f"unknown config key '{key}' in {path}")
    logger.info("Loaded config from %s", path)
    return data


def resolve_config(preset_name: str | None = None, path: str | Path | None = None,
                   overrides: dict | None = None) -> dict:
    """Preset values, overlaid by the config file, overlaid by ``overrides``.

    A preset named on the command line wins over one named in the file.
    """
    file_data = load_config_file(path) if path else {}
    name = preset_name or file_data.get("preset") or DEFAULT_PRESET
    if not path:
        logger.info("No config file given, using preset %s", name)
    config = preset(name)
    config = merge(config, {k: v for k, v in file_data.items() if k in SECTIONS})
    config = merge(config, overrides or {})
    config["preset"] = name
    return config


def thread_count() -> int:
    """Parallelism cap from FLOTAPINN_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got '{raw}'") from None
    if value < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be a positive integer, got '{raw}'")
    return value
