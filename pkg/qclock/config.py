"""
Configuration management for qclock.

Handles loading, saving, and validating configuration from ~/.config/qclock/config.yaml
"""

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union
import yaml


# Default config directory
CONFIG_DIR = Path.home() / ".config" / "qclock"
CONFIG_FILE = CONFIG_DIR / "config.yaml"
CONFIG_ENV = "QCLOCK_CONFIG"

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass
class SimulationConfig:
    """Clock simulation settings."""
    cycles: int = 100_000
    block_size: int = 100  # cycles per averaging block
    burn_in_blocks: int = 10


@dataclass
class NoiseConfig:
    """Oscillator noise settings."""
    oversample: int = 4  # sub-samples averaged per cycle


@dataclass
class OptimizerConfig:
    """Protocol search settings."""
    replicas: int = 4
    holdout_replicas: int = 4
    restarts: int = 200
    screen_cycles: int = 10_000
    max_iterations: int = 2000
    xatol: float = 1e-3
    fatol: float = 1e-5
    threshold_factor: float = 1.05
    workers: int = 0  # 0 = all cores


@dataclass
class LoggingConfig:
    level: str = "INFO"


@dataclass
class Config:
    """Main configuration for qclock."""
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    search: OptimizerConfig = field(default_factory=OptimizerConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)

    @classmethod
    def get_config_path(cls, path: Optional[Union[str, Path]] = None) -> Path:
        """Return the path to the config file: explicit path, $QCLOCK_CONFIG, or the default."""
        if path:
            return Path(path)
        if os.environ.get(CONFIG_ENV):
            return Path(os.environ[CONFIG_ENV])
        return CONFIG_FILE

    @classmethod
    def load(cls, path: Optional[Union[str, Path]] = None) -> "Config":
        """
        Load configuration from file.
        Returns the defaults if the file doesn't exist.
        """
        config_path = cls.get_config_path(path)
        if not config_path.exists():
            return cls()

        with open(config_path, "r") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{config_path}: top level must be a mapping")

        return cls._from_dict(data)

    @classmethod
    def _from_dict(cls, data: dict) -> "Config":
        """Create Config from dictionary; missing keys keep their defaults."""
        def section(kind, key):
            values = data.get(key) or {}
            known = {f.name for f in dataclasses.fields(kind)}
            unknown = set(values) - known
            if unknown:
                raise ValueError(f"unknown {key} setting(s): {', '.join(sorted(unknown))}")
            return kind(**values)

        return cls(
            simulation=section(SimulationConfig, "simulation"),
            noise=section(NoiseConfig, "noise"),
            search=section(OptimizerConfig, "search"),
            logging=section(LoggingConfig, "logging"),
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        """Save configuration to file."""
        config_path = self.get_config_path(path)
        config_path.parent.mkdir(parents=True, exist_ok=True)

        with open(config_path, "w") as f:
            yaml.dump(self.to_dict(), f, default_flow_style=False, sort_keys=False)
        return config_path

    def validate(self) -> list[str]:
        """
        Validate the configuration.
        Returns a list of error messages (empty if valid).
        """
        errors = []

        # Validate simulation settings
        if self.simulation.block_size < 1:
            errors.append(f"Invalid block_size: {self.simulation.block_size}")
        if self.simulation.burn_in_blocks < 0:
            errors.append(f"Invalid burn_in_blocks: {self.simulation.burn_in_blocks}")
        min_cycles = (self.simulation.burn_in_blocks + 10) * self.simulation.block_size
        if self.simulation.cycles < min_cycles:
            errors.append(f"cycles must be >= {min_cycles} (got {self.simulation.cycles})")

        if self.noise.oversample < 1:
            errors.append(f"Invalid oversample: {self.noise.oversample}")

        # Validate search settings
        s = self.search
        if s.replicas < 1 or s.holdout_replicas < 1:
            errors.append("replicas and holdout_replicas must be >= 1")
        if s.restarts < 1:
            errors.append(f"Invalid restarts: {s.restarts}")
        if s.screen_cycles > self.simulation.cycles:
            errors.append(f"screen_cycles ({s.screen_cycles}) exceeds cycles ({self.simulation.cycles})")
        if s.max_iterations < 0:
            errors.append(f"Invalid max_iterations: {s.max_iterations}")
        if not (s.xatol > 0 and s.fatol > 0):
            errors.append("xatol and fatol must be > 0")
        if s.threshold_factor <= 0:
            errors.append(f"Invalid threshold_factor: {s.threshold_factor}")
        if s.workers < 0:
            errors.append(f"Invalid workers: {s.workers}")

        if self.logging.level.upper() not in LOG_LEVELS:
            errors.append(f"Invalid logging level: {self.logging.level}")

        return errors

    def is_valid(self) -> bool:
        """Check if configuration is valid."""
        return len(self.validate()) == 0
