"""
YAML experiment config files.

Files are parsed into ExperimentConfig and written back with sorted keys, so a
dumped config is canonical and diffable.
"""

import logging
from pathlib import Path

import yaml

from ..models.config import ExperimentConfig

logger = logging.getLogger(__name__)


def load_config(path: Path | None) -> ExperimentConfig:
    """
    Read an experiment config; None gives the defaults.

    Raises:
        ValueError: unreadable file or a document that is not a mapping
        pydantic.ValidationError: field values violate the config invariants
    """
    if path is None:
        return ExperimentConfig()
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ValueError(f"cannot read config {path}: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping, got {type(data).__name__}")
    config = ExperimentConfig.model_validate(data)
    logger.debug(f"Loaded config {path} (fingerprint {config.fingerprint()})")
    return config


def dump_config(config: ExperimentConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=True)
