"""
Engine configuration for the reliability calculus.

Features:
- Dataclass defaults for every tunable (enumeration limit, sampling, envelopes)
- JSON configuration file (engine_config.json, or RELIABILITY_CONFIG)
- RELIABILITY_* environment overrides, .env files via python-dotenv
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from dotenv import load_dotenv

from errors import ConfigError

logger = logging.getLogger(__name__)

load_dotenv()

CONFIG_FILE = os.getenv("RELIABILITY_CONFIG", "engine_config.json")
ENV_PREFIX = "RELIABILITY_"


@dataclass(frozen=True)
class EngineConfig:
    """Tunables shared by the exact, sampling and numeric back ends."""
    max_valuations: int = 10_000_000
    default_samples: int = 100_000
    default_seed: int = 0
    default_gamma: float = 0.99
    block_size: int = 4096
    workers: int = 1
    envelope_k: float = 8.0
    envelope_width: float = 0.05
    tolerance: float = 1e-12
    results_log: str = "results_log.txt"
    assets_dir: str = "assets"

    def __post_init__(self):
        if self.max_valuations < 1:
            raise ConfigError(f"max_valuations must be >= 1, got {self.max_valuations}")
        if self.default_samples < 1:
            raise ConfigError(f"default_samples must be >= 1, got {self.default_samples}")
        if not 0.0 < self.default_gamma < 1.0:
            raise ConfigError(f"default_gamma must be in (0, 1), got {self.default_gamma}")
        if self.block_size < 1 or self.workers < 1:
            raise ConfigError("block_size and workers must be >= 1")
        if self.envelope_k <= 0 or self.envelope_width <= 0:
            raise ConfigError("envelope_k and envelope_width must be > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        """Build a config from a mapping, coercing values to the field types."""
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, value in data.items():
            if key not in known:
                logger.warning(f"Ignoring unknown config key: {key}")
                continue
            caster = known[key].type
            try:
                values[key] = caster(value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Invalid value for {key}: {value!r} ({e})")
        return cls(**values)

    @classmethod
    def from_json(cls, json_path: str) -> "EngineConfig":
        """Load configuration from a JSON file."""
        try:
            with open(json_path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {json_path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {json_path} must hold a JSON object")
        return cls.from_dict(data)

    def to_json(self, json_path: str):
        """Save configuration to a JSON file."""
        with open(json_path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)

    def with_overrides(self, **overrides) -> "EngineConfig":
        data = asdict(self)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return EngineConfig.from_dict(data)


def env_overrides() -> dict:
    """Collect RELIABILITY_<FIELD> environment variables."""
    overrides = {}
    for f in fields(EngineConfig):
        value = os.getenv(ENV_PREFIX + f.name.upper())
        if value is not None:
            overrides[f.name] = value
    return overrides


def load_config(path: str | None = None) -> EngineConfig:
    """Load configuration: defaults, then the JSON file, then environment."""
    path = path or CONFIG_FILE
    data = {}
    if Path(path).exists():
        data = asdict(EngineConfig.from_json(path))
    data.update(env_overrides())
    return EngineConfig.from_dict(data)
