"""Configuration management for nestkit."""

import os
from dataclasses import dataclass, field
from typing import Callable, Optional, TypeVar

import numpy as np

from .exceptions import ConfigurationException

T = TypeVar("T")


@dataclass
class SamplerSettings:
    """Likelihood-restricted sampler settings."""
    bootstrap_rounds: int = 50
    rejection_budget: int = 100000
    refit_divisor: int = 5  # refit every ceil(N / refit_divisor) iterations
    mlfriends_max_iterations: int = 10
    max_steps: int = 4096
    walk_scale: float = 0.1  # initial gauss-walk scale when --scale is not given


@dataclass
class DiagnosticsSettings:
    """Insertion-order test settings."""
    rolling_window: int = 1000
    segment_threshold: float = 4.0
    detection_threshold: float = 3.0


@dataclass
class NestkitConfig:
    """Main nestkit configuration."""
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    diagnostics: DiagnosticsSettings = field(default_factory=DiagnosticsSettings)
    log_level: str = "INFO"
    seed: int = 1
    jobs: int = 1
    nlive: int = 400
    nlive_min: int = 50
    uncertainty_folds: int = 10
    uncertainty_resamples: int = 30
    target_ess: float = 400.0


def _env(key: str, default: str, cast: Callable[[str], T]) -> T:
    raw = os.getenv(key, default)
    try:
        return cast(raw)
    except ValueError:
        raise ConfigurationException(f"cannot parse {key}={raw!r}", config_key=key)


def load_config() -> NestkitConfig:
    """Load configuration from environment variables."""
    config = NestkitConfig()

    # Run settings
    config.log_level = os.getenv("NESTKIT_LOG_LEVEL", "INFO").upper()
    config.seed = _env("NESTKIT_SEED", "1", int)
    config.jobs = _env("NESTKIT_JOBS", "1", int)
    config.nlive = _env("NESTKIT_NLIVE", "400", int)
    config.nlive_min = _env("NESTKIT_NLIVE_MIN", "50", int)
    config.uncertainty_folds = _env("NESTKIT_FOLDS", "10", int)
    config.uncertainty_resamples = _env("NESTKIT_RESAMPLES", "30", int)

    # Sampler settings
    config.sampler.bootstrap_rounds = _env("NESTKIT_BOOTSTRAP_ROUNDS", "50", int)
    config.sampler.rejection_budget = _env("NESTKIT_REJECTION_BUDGET", "100000", int)
    config.sampler.max_steps = _env("NESTKIT_MAX_STEPS", "4096", int)
    config.sampler.walk_scale = _env("NESTKIT_WALK_SCALE", "0.1", float)

    # Diagnostics
    config.diagnostics.rolling_window = _env("NESTKIT_ROLLING_WINDOW", "1000", int)

    if config.jobs < 1:
        raise ConfigurationException(
            "jobs must be at least 1", config_key="NESTKIT_JOBS"
        )
    if config.seed < 0 or config.seed >= 2**64:
        raise ConfigurationException(
            "seed must fit in 64 bits", config_key="NESTKIT_SEED"
        )
    if not config.sampler.walk_scale > 0:
        raise ConfigurationException(
            "walk scale must be positive", config_key="NESTKIT_WALK_SCALE"
        )

    return config


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based Philox generator for a master seed and a stream path.

    ``make_rng(seed, k, b)`` always yields the same draws no matter which
    worker asks for it, so parallel folds and trials stay deterministic.
    """
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, *stream]))
    )


# Global configuration instance
_config: Optional[NestkitConfig] = None


def get_config() -> NestkitConfig:
    """Get the global configuration instance."""
    global _config
    if _config is None:
        _config = load_config()
    return _config


def reload_config() -> NestkitConfig:
    """Reload configuration from environment."""
    global _config
    _config = load_config()
    return _config
