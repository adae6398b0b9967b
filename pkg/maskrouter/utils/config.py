# maskrouter/utils/config.py
"""Run configuration: key = value files with [model] [train] [schedule] [gen]
sections, overridden by command-line flags, validated by the pydantic models."""
from __future__ import annotations

import configparser
import logging
from pathlib import Path
from typing import Any, Mapping, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from maskrouter.utils.errors import ConfigError, UsageError

logger = logging.getLogger("maskrouter.config")

SECTIONS = ("model", "train", "schedule", "gen")

M = TypeVar("M", bound=BaseModel)


def load_env() -> None:
    """Load a .env file into the process environment, if one exists"""
    if load_dotenv():
        logger.debug("Loaded environment from .env")


def read_config_file(path: str | Path | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {name: {} for name in SECTIONS}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    unknown = [s for s in parser.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"{path}: unknown sections {unknown}, expected {list(SECTIONS)}")
    logger.info(f"Read config file {path}")
    return {name: dict(parser[name]) if parser.has_section(name) else {} for name in SECTIONS}


def merge(file_values: Mapping[str, Any], flags: Mapping[str, Any]) -> dict[str, Any]:
    """Flags that were actually given (not None) win over file values"""
    merged = dict(file_values)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def build(model: type[M], file_values: Mapping[str, Any], **flags) -> M:
    values = merge(file_values, flags)
    unknown = set(values) - set(model.model_fields)
    if unknown:
        raise ConfigError(f"unknown {model.__name__} keys: {sorted(unknown)}")
    try:
        return model.model_validate(values)
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__}: {e}") from e
