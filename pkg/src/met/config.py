"""TOML configuration with sane defaults for every pipeline stage."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS: dict = {
    "provider": {"mode": "mock", "fixture_dir": "", "endpoint": "", "timeout_ms": 30000},
    "embedding": {"mode": "mock", "dim": 64, "seed": 0, "endpoint": ""},
    "extraction": {
        "batch_size": 30,
        "min_entity_freq": 10,
        "min_type_size": 5,
        "max_workers": 1,
    },
    "clustering": {"seed": 0},
    "attachment": {"token_budget": 4000, "flush_size": 50},
    "conflict": {"max_steps": 3},
    "acquisition": {
        "limit": 50,
        "sample_rate": 0.01,
        "seed": 0,
        "student_threshold": 0.5,
        "coarse_threshold": 0.3,
        "hamming_max": 8,
        "cosine_max": 0.95,
    },
    "synthesis": {"max_chains": 4, "min_caption_words": 40},
    "service": {"data_dir": "met-data", "host": "127.0.0.1", "port": 8040},
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: Optional[str | Path] = None) -> dict:
    """Defaults overlaid with the TOML file when one is given."""
    if path is None:
        return {k: dict(v) for k, v in DEFAULTS.items()}
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return _merge(DEFAULTS, data)
