import json
import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml
from pydantic import ValidationError

from dkd_workbench.errors import ConfigError
from dkd_workbench.models.models import ExperimentConfig

logger = logging.getLogger(__name__)

CONFIG_SUFFIXES = (".toml", ".json", ".yaml", ".yml")


def read_config_document(path: Union[str, os.PathLike]) -> dict[str, Any]:
    """Parse a TOML, JSON or YAML file into a plain dictionary

    Args:
        path (Union[str, os.PathLike]): The config file, format chosen by suffix

    Returns:
        dict[str, Any]: The parsed document

    Raises:
        ConfigError: If the file is missing, has an unknown suffix or does not parse
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    suffix = path.suffix.lower()
    try:
        if suffix == ".toml":
            with open(path, "rb") as f:
                document = tomllib.load(f)
        elif suffix == ".json":
            document = json.loads(path.read_text())
        elif suffix in (".yaml", ".yml"):
            document = yaml.safe_load(path.read_text()) or {}
        else:
            raise ConfigError(f"{path}: unknown config format, expected one of {', '.join(CONFIG_SUFFIXES)}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"{path}: {e}")
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top level of a config must be a table, got {type(document).__name__}")
    return document


def apply_overrides(document: dict[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    """Set dotted keys such as ``loss.zeta`` in a nested config dictionary

    None values are skipped, so unset CLI flags leave the file value alone.
    """
    for dotted, value in overrides.items():
        if value is None:
            continue
        target = document
        *parents, leaf = dotted.split(".")
        for key in parents:
            child = target.setdefault(key, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot set {dotted}: {key} is not a table")
            target = child
        target[leaf] = value
    return document


def load_experiment_config(
    path: Optional[Union[str, os.PathLike]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Build an experiment config from an optional file and CLI overrides

    Args:
        path (Optional[Union[str, os.PathLike]]): TOML, JSON or YAML file, defaults if None
        overrides (Optional[Mapping[str, Any]]): Dotted keys to replace

    Returns:
        ExperimentConfig: The validated config

    Raises:
        ConfigError: If the file cannot be read or the result does not validate
    """
    document = read_config_document(path) if path is not None else {}
    apply_overrides(document, overrides or {})
    try:
        cfg = ExperimentConfig.model_validate(document)
    except ValidationError as e:
        source = path if path is not None else "command line"
        raise ConfigError(f"invalid config from {source}: {e}")
    logger.debug(f"Loaded config {cfg.name} from {path or 'defaults'}")
    return cfg


def save_experiment_config(cfg: ExperimentConfig, path: Union[str, os.PathLike]) -> Path:
    """Write a config as JSON or YAML, chosen by suffix"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() in (".yaml", ".yml"):
        path.write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False))
    elif path.suffix.lower() == ".json":
        path.write_text(cfg.model_dump_json(indent=2) + "\n")
    else:
        raise ConfigError(f"{path}: configs are saved as .json or .yaml")
    return path
