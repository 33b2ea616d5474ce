"""Configuration and path helpers for graf_qa."""

from __future__ import annotations

import logging
import os
from pathlib import Path

logger = logging.getLogger(__name__)

BASE_DIR = Path(os.environ.get("GRAF_HOME") or Path(__file__).resolve().parent.parent)
DATA_DIR = BASE_DIR / "data"
CONFIG_DIR = BASE_DIR / "config"
CHECKPOINT_DIR = DATA_DIR / "checkpoints"

SETTINGS_FILE = CONFIG_DIR / "graf_settings.json"


def ensure_directories() -> None:
    """Ensure that the data, config, and checkpoint directories exist."""
    for target in (DATA_DIR, CONFIG_DIR, CHECKPOINT_DIR):
        try:
            target.mkdir(parents=True, exist_ok=True)
        except OSError as error:
            logger.warning("Failed to create directory %s: %s", target, error)


__all__ = [
    "BASE_DIR",
    "DATA_DIR",
    "CONFIG_DIR",
    "CHECKPOINT_DIR",
    "SETTINGS_FILE",
    "ensure_directories",
]
