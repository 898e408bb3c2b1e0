#!/usr/bin/env python3
"""
Environment variable loader for the engine

Reads KEY=VALUE pairs from the .env file next to this module. Values already
present in the process environment win over the file.
"""

import logging
import os
from pathlib import Path

logger = logging.getLogger(__name__)

DEFAULTS = {
    'AGEPIN_OUTPUT_DIR': 'runs',
    'AGEPIN_JOBS': '1',
    'AGEPIN_LOG_LEVEL': 'INFO',
    'AGEPIN_SCALE': 'desk',
}


def load_env(env_path=None):
    """Load environment variables from .env file"""
    env_path = Path(env_path) if env_path else Path(__file__).parent / '.env'

    if not env_path.exists():
        logger.debug(f"⚠️  .env file not found at {env_path}, using defaults")
        return {}

    loaded = {}
    with open(env_path, 'r') as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith('#') and '=' in line:
                key, value = line.split('=', 1)
                key = key.strip()
                value = value.strip().strip('"').strip("'")
                loaded[key] = value
                os.environ.setdefault(key, value)
    logger.debug(f"✅ Loaded environment variables from {env_path}")
    return loaded


def get_setting(name, default=None, cast=str):
    """Read a setting from the environment, falling back to DEFAULTS"""
    raw = os.getenv(name)
    if raw is None or raw == '':
        raw = DEFAULTS.get(name, default)
    if raw is None:
        return None
    try:
        return cast(raw)
    except (TypeError, ValueError):
        logger.warning(f"⚠️  Ignoring malformed {name}={raw!r}, using {default!r}")
        return default


# Auto-load when imported
load_env()
