"""Settings management utilities for graf_qa.

Settings are a flat dict of camelCase keys. Values come from three layers,
later layers winning: ``DEFAULT_SETTINGS``, the JSON settings file, and
``GRAF_<UPPER_SNAKE_KEY>`` environment variables.
"""

from __future__ import annotations

import json
import logging
import os
import re
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from . import config as app_config
from .utils.files import atomic_write_text

logger = logging.getLogger(__name__)

ENV_PREFIX = "GRAF_"


class ConfigError(ValueError):
    """Raised when a configuration value is outside its allowed range."""


DEFAULT_SETTINGS: Dict[str, Any] = {
    # KG sampling
    "topK": 10,
    "depth": 1,
    "maxEntities": 50,
    "bm25K1": 1.5,
    "bm25B": 0.75,
    # RAG chunking
    "chunkSize": 50,
    "chunkOverlap": 25,
    "ragTopK": 10,
    # encoders
    "dim": 64,
    "heads": 6,
    "leakySlope": 0.2,
    # training
    "seed": 0,
    "learningRate": 1e-7,
    "epochs": 50,
    "beta1": 0.9,
    "beta2": 0.999,
    "adamEps": 1e-8,
    "weightDecay": 0.01,
    "lossKind": "bce",
    "checkpointEvery": 0,
    "updateEvery": "question",
    "nodeGain": 2.0,
    "edgeGain": 0.5,
    "attentionGain": 6.0,
    "valueGain": 1.0,
    # inference
    "cardinality": "gold",
    "jobs": 1,
    # claim extraction
    "promptLanguage": "en",
    "client": "stub",
    "clientModel": "",
    "clientTimeout": 60.0,
}

_camel_boundary = re.compile(r"(?<!^)(?=[A-Z])")


def env_var_name(key: str) -> str:
    """Map a settings key to its environment variable (``topK`` -> ``GRAF_TOP_K``)."""
    return ENV_PREFIX + _camel_boundary.sub("_", key).upper()


def _coerce(value: Any, template: Any) -> Any:
    if isinstance(template, bool):
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in {"true", "1", "yes", "on"}:
                return True
            if lowered in {"false", "0", "no", "off"}:
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return bool(value)
    if isinstance(template, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"not an integer: {value!r}")
        return int(value)
    if isinstance(template, float):
        return float(value)
    return str(value)


def _apply_environment_overrides(settings: Dict[str, Any]) -> Dict[str, Any]:
    """Apply ``GRAF_*`` environment overrides on top of ``settings``."""
    merged = settings.copy()
    for key, template in DEFAULT_SETTINGS.items():
        raw = os.environ.get(env_var_name(key))
        if raw is None or raw == "":
            continue
        try:
            merged[key] = _coerce(raw, template)
        except ValueError as error:
            logger.warning("Ignoring %s=%r: %s", env_var_name(key), raw, error)
    return merged


def load_settings(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    """Load persisted settings or fall back to defaults."""
    settings_path = Path(path) if path else app_config.SETTINGS_FILE
    merged = DEFAULT_SETTINGS.copy()

    if settings_path.exists():
        try:
            with settings_path.open("r", encoding="utf-8") as handle:
                stored = json.load(handle)
        except Exception as error:  # noqa: BLE001 - log and fall back
            logger.error("Error loading settings from %s: %s", settings_path, error)
            stored = None

        if isinstance(stored, dict):
            for key, value in stored.items():
                if key not in DEFAULT_SETTINGS:
                    logger.warning("Unknown setting %r in %s; ignoring", key, settings_path)
                    continue
                try:
                    merged[key] = _coerce(value, DEFAULT_SETTINGS[key])
                except (TypeError, ValueError) as error:
                    logger.warning("Invalid value for %r in %s: %s", key, settings_path, error)
        elif stored is not None:
            logger.warning("%s does not contain a JSON object; using defaults", settings_path)

    return _apply_environment_overrides(merged)


def save_settings(settings: Mapping[str, Any], path: Optional[Union[str, Path]] = None) -> bool:
    """Persist settings to disk, returning True on success."""
    settings_path = Path(path) if path else app_config.SETTINGS_FILE
    if path is None:
        app_config.ensure_directories()

    persisted = DEFAULT_SETTINGS.copy()
    persisted.update({key: value for key, value in settings.items() if key in DEFAULT_SETTINGS})

    logger.info("Saving settings to %s", settings_path)
    try:
        atomic_write_text(settings_path, json.dumps(persisted, indent=2, sort_keys=True) + "\n")
    except Exception as error:  # noqa: BLE001 - report failure to caller
        logger.error("Error saving settings to %s: %s", settings_path, error)
        return False
    return True


def merge_overrides(settings: Mapping[str, Any], **overrides: Any) -> Dict[str, Any]:
    """Return ``settings`` with every non-None override applied."""
    merged = dict(settings)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in DEFAULT_SETTINGS:
            raise ConfigError(f"unknown setting {key!r}")
        merged[key] = value
    return merged


__all__ = [
    "ConfigError",
    "DEFAULT_SETTINGS",
    "ENV_PREFIX",
    "env_var_name",
    "load_settings",
    "merge_overrides",
    "save_settings",
]
