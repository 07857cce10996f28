import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import tomlkit
import typer
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from rich.console import Console
from rich.table import Table

from spikinghan.errors import ConfigError

logger = logging.getLogger(__name__)

# Initialise the config app
config_app = typer.Typer()

SPLIT_PRESETS: Dict[str, Tuple[float, float, float]] = {
    "20-10-70": (0.2, 0.1, 0.7),
    "40-10-50": (0.4, 0.1, 0.5),
    "60-10-30": (0.6, 0.1, 0.3),
}


# region Enums
class NeuronKind(str, Enum):
    IF = "IF"
    LIF = "LIF"
    PLIF = "PLIF"


class ResetMode(str, Enum):
    SUBTRACT = "subtract"
    TO_CONSTANT = "to_constant"


class LeakTarget(str, Enum):
    THRESHOLD = "threshold"
    ZERO = "zero"


class Activation(str, Enum):
    RELU = "relu"
    ELU = "elu"


# endregion


# region Settings
class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, allow_inf_nan=False)


class NeuronConfig(_Section):
    """Spiking neuron dynamics of the classification head."""

    kind: NeuronKind = Field(NeuronKind.PLIF)
    v_th: float = Field(1.0, gt=0)
    reset_mode: ResetMode = Field(ResetMode.SUBTRACT)
    v_reset: float = Field(0.0)
    leak_target: LeakTarget = Field(LeakTarget.THRESHOLD)
    alpha: float = Field(2.0, gt=0, description="Surrogate smoothing factor")
    surrogate_chain_alpha: bool = Field(
        False, description="Use alpha * sigma'(alpha x) instead of sigma'(alpha x)"
    )
    tau_init: float = Field(2.0, gt=1, description="Initial membrane time constant")
    time_steps: int = Field(32, ge=1)
    detach_reset: bool = Field(False)

    @model_validator(mode="after")
    def _reset_below_threshold(self) -> "NeuronConfig":
        if self.reset_mode is ResetMode.TO_CONSTANT and not self.v_reset < self.v_th:
            raise ValueError(f"v_reset ({self.v_reset}) must be below v_th ({self.v_th})")
        return self


class ModelConfig(_Section):
    hidden_dim: int = Field(64, ge=1)
    activation: Activation = Field(Activation.RELU)
    dropout_rate: float = Field(0.5, ge=0, lt=1)
    normalize_readout: bool = Field(False)
    neuron: NeuronConfig = Field(default_factory=NeuronConfig)


class TrainConfig(ModelConfig):
    learning_rate: float = Field(0.005, ge=0)
    weight_decay: float = Field(0.001, ge=0)
    epochs: int = Field(200, ge=1)
    patience: int = Field(100, ge=1)
    seed: int = Field(0)
    betas: Tuple[float, float] = Field((0.9, 0.999))
    adam_eps: float = Field(1e-8, gt=0)

    @model_validator(mode="after")
    def _patience_within_epochs(self) -> "TrainConfig":
        if self.patience > self.epochs:
            raise ValueError(f"patience ({self.patience}) exceeds epochs ({self.epochs})")
        return self

    @field_validator("betas")
    @classmethod
    def _betas_in_range(cls, betas: Tuple[float, float]) -> Tuple[float, float]:
        if not all(0 <= b < 1 for b in betas):
            raise ValueError(f"Adam betas must lie in [0, 1): {betas}")
        return betas

    def model_part(self) -> ModelConfig:
        """The architecture-only view stored alongside checkpoints."""
        return ModelConfig(**self.model_dump(include=set(ModelConfig.model_fields)))


class SplitConfig(_Section):
    ratios: Tuple[float, float, float] = Field((0.2, 0.1, 0.7))
    seed: int = Field(0)
    allow_toy: bool = Field(False, description="Accept graphs with |types| + |relations| <= 2")

    @field_validator("ratios")
    @classmethod
    def _ratios_partition(cls, ratios: Tuple[float, float, float]) -> Tuple[float, float, float]:
        check_split_ratios(ratios)
        return ratios


class RunConfig(_Section):
    train: TrainConfig = Field(default_factory=TrainConfig)
    splits: SplitConfig = Field(default_factory=SplitConfig)
    seeds: List[int] = Field(default_factory=lambda: [0])
    workers: int = Field(1, ge=1)


class AppSettings(BaseSettings):
    log_level: str = Field("WARNING")

    model_config = SettingsConfigDict(
        env_prefix="SPIKINGHAN_",
        env_nested_delimiter="__",
        case_sensitive=False,
    )

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, level: str) -> str:
        level = level.upper()
        if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"Unknown log level '{level}'")
        return level


# endregion


# region Loading
def check_split_ratios(ratios: Tuple[float, ...]) -> None:
    if len(ratios) != 3 or any(not (math.isfinite(r) and r > 0) for r in ratios):
        raise ConfigError(f"Split ratios must be three positive numbers: {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"Split ratios must sum to 1: {ratios} sums to {sum(ratios)}")


def resolve_split(preset: Optional[str], fallback: Tuple[float, float, float]) -> Tuple[float, float, float]:
    if preset is None:
        return fallback
    try:
        return SPLIT_PRESETS[preset]
    except KeyError:
        raise ConfigError(
            f"Unknown split preset '{preset}'. Choose from: {', '.join(SPLIT_PRESETS)}"
        ) from None


def read_config_document(path: Path) -> Dict[str, Any]:
    """Read a JSON or TOML document into plain python data."""
    if not path.exists():
        raise ConfigError(f"Configuration file not found: '{path}'")

    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() == ".toml":
            data = tomlkit.parse(text).unwrap()
        elif path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            raise ConfigError(f"Unsupported configuration format '{path.suffix}' (use .json or .toml)")
    except tomlkit.exceptions.TOMLKitError as e:
        raise ConfigError(f"Error parsing configuration file '{path}': {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Error parsing configuration file '{path}': {e}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"Configuration root must be a table/object: '{path}'")
    return data


def load_run_config(path: Optional[Path]) -> RunConfig:
    """
    Load a run configuration. Every key is optional, unknown keys are rejected.

    Raises:
        ConfigError: unreadable file or invalid values.
    """
    if path is None:
        return RunConfig()

    data = read_config_document(path)
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration in '{path}': {_summarise(e)}") from e


def _summarise(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = ".".join(str(x) for x in item["loc"])
        parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


def write_config_document(data: Dict[str, Any], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".toml":
        path.write_text(tomlkit.dumps(data), encoding="utf-8")
    elif path.suffix.lower() == ".json":
        path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    else:
        raise ConfigError(f"Unsupported configuration format '{path.suffix}' (use .json or .toml)")


def flatten(data: Dict[str, Any], prefix: str = "") -> List[Tuple[str, Any]]:
    rows: List[Tuple[str, Any]] = []
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(flatten(value, f"{name}."))
        else:
            rows.append((name, value))
    return rows


# endregion

# region Commands


@config_app.command()
def show(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", help="Configuration file to show. Defaults are shown if omitted."
    ),
):
    """
    Shows the effective run configuration in a table.
    """
    from spikinghan.experiments import error_boundary

    with error_boundary():
        run_config = load_run_config(config)

    table = Table(title="Run Configuration")
    table.add_column("Name", style="cyan", no_wrap=True)
    table.add_column("Value", style="magenta")

    for key, value in flatten(run_config.model_dump(mode="json")):
        table.add_row(key, str(value))

    console = Console(stderr=True)
    console.print(table)


@config_app.command()
def init(
    path: Path = typer.Argument(..., help="Where to write the configuration (.json or .toml)."),
    force: bool = typer.Option(False, help="Overwrite an existing file."),
):
    """
    Write a configuration file holding every default value.
    """
    from spikinghan.experiments import error_boundary

    with error_boundary():
        if path.exists() and not force:
            raise ConfigError(f"'{path}' already exists. Pass --force to overwrite.")
        write_config_document(RunConfig().model_dump(mode="json"), path)
    logger.info("Wrote default configuration to %s", path)


# endregion
