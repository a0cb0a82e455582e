import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.core.errors import ConfigError
from app.core.models import LossWeights, TrainConfig


class RuntimeSettings(BaseSettings):
    """Process-wide runtime settings"""
    threads: int = Field(default=1, ge=1, description="Worker thread cap (1 keeps reductions bit-deterministic)")
    data_root: str = Field(default="data", description="Default dataset root")
    output_root: str = Field(default="runs", description="Default output root")

    model_config = SettingsConfigDict(env_prefix="XVFG_")


class LoggingSettings(BaseSettings):
    """Logging settings"""
    level: str = Field(default="INFO", description="Log level")
    format: str = Field(
        default="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        description="Log record format",
    )
    file_path: Optional[str] = Field(default=None, description="Optional log file")

    model_config = SettingsConfigDict(env_prefix="LOG_")


class Settings(BaseSettings):
    """Main application settings"""
    runtime: RuntimeSettings = Field(default_factory=RuntimeSettings)
    logging: LoggingSettings = Field(default_factory=LoggingSettings)

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore"
    )


# Keys accepted in a key=value run configuration file. Loss-weight keys are
# flattened into the top level; "lambda" is the second-stage adversarial weight.
LOSS_WEIGHT_KEYS: Dict[str, str] = {
    "lambda": "lambda_adv",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "lambda3": "lambda3",
    "lambda4": "lambda4",
    "lambda_tv": "lambda_tv",
}

CONFIG_KEYS: Dict[str, str] = {
    "direction": "a2g | g2a",
    "size": "image size (32, 64 or 256)",
    "epochs": "number of epochs",
    "batch_size": "samples per iteration",
    "seed": "random seed of weights, shuffling and toy data",
    "ablation": "A | B | C | D",
    "lr": "Adam learning rate",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "eps": "Adam epsilon",
    "depth": "generator down/up levels",
    "base_channels": "generator base width",
    "feature_channels": "channels of the exposed feature maps Fi / Fs",
    "attention_reduction": "channel attention reduction ratio",
    "disc_base_channels": "discriminator base width",
    "disc_layers": "discriminator downsampling blocks",
    "semantic_classes": "number of semantic classes",
    "deform_placement": "first | first_and_last",
    "dtype": "float64 | float32",
    "max_iterations": "iteration cap (empty for none)",
    "log_every": "iterations between log lines",
    "output_dir": "run output directory",
    "write_samples": "write sample grids every epoch (true/false)",
    "toy_samples": "number of toy samples when --data toy",
    "probe_iterations": "probe classifier fit iterations after training (0 skips)",
    "lambda": "second-stage adversarial weight",
    "lambda1": "L1 weight of (I'g, Ig)",
    "lambda2": "L1 weight of (S'g, Sg)",
    "lambda3": "L1 weight of (I''g, Ig)",
    "lambda4": "L1 weight of (S''g, Sg)",
    "lambda_tv": "total variation weight",
}


class ConfigService:
    """Configuration service using Pydantic Settings"""

    _settings: Settings = None

    @classmethod
    def get_settings(cls) -> Settings:
        """Get application settings singleton"""
        if cls._settings is None:
            cls._settings = Settings()
        return cls._settings

    @classmethod
    def reload_settings(cls) -> Settings:
        """Reload settings from environment"""
        cls._settings = Settings()
        return cls._settings

    @staticmethod
    def resolve_data_path(path: str) -> str:
        """Relative dataset paths missing from the working directory are looked up under XVFG_DATA_ROOT"""
        if os.path.isabs(path) or os.path.exists(path):
            return path
        return os.path.join(ConfigService.get_settings().runtime.data_root, path)

    @staticmethod
    def parse_config_file(path: Path) -> Dict[str, str]:
        """Read a key=value file; unknown keys are rejected"""
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")

        values: Dict[str, str] = {}
        for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
            values[key] = value
        return values

    @staticmethod
    def build_run_config(values: Mapping[str, Any]) -> TrainConfig:
        """Build a TrainConfig from flat key/value pairs"""
        unknown = [key for key in values if key not in CONFIG_KEYS]
        if unknown:
            raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")

        if values.get("output_dir") is None:
            values = {**values, "output_dir": os.path.join(ConfigService.get_settings().runtime.output_root, "default")}

        top: Dict[str, Any] = {}
        weights: Dict[str, Any] = {}
        for key, value in values.items():
            if value is None:
                continue
            if isinstance(value, str) and value == "" and key == "max_iterations":
                value = None
            if key in LOSS_WEIGHT_KEYS:
                weights[LOSS_WEIGHT_KEYS[key]] = value
            else:
                top[key] = value

        try:
            return TrainConfig(loss_weights=LossWeights(**weights), **top)
        except ValidationError as e:
            raise ConfigError(f"Invalid configuration: {e}") from e

    @classmethod
    def load_run_config(
        cls,
        path: Optional[Path] = None,
        overrides: Optional[Mapping[str, Any]] = None
    ) -> TrainConfig:
        """Defaults < config file < command-line overrides"""
        values: Dict[str, Any] = {}
        if path is not None:
            values.update(cls.parse_config_file(path))
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value
        return cls.build_run_config(values)
