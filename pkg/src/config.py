"""Experiment configuration: JSON files validated with Pydantic."""
import json
import logging
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.exceptions import ConfigError
from src.models import DATASET_PRESETS, Algorithm, ModelSpec, RateSchedule, SyntheticSpec
from src.server import resolve_rates
from src.simulation import SimulationSettings

logger = logging.getLogger(__name__)

DEFAULT_ZOO = "default-22"
# Costs are normalized by the largest model, which therefore costs exactly 1.
MAX_MODEL_COST = 1.0


class CsvSource(BaseModel):
    """A numeric CSV file with a header row."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["csv"] = "csv"
    path: str = Field(description="CSV file path, relative to the working directory")
    target_column: Optional[Union[int, str]] = Field(default=None, description="Target column name or index")
    preset: Optional[str] = Field(default=None, description="Dataset preset whose shape is checked")
    name: Optional[str] = Field(default=None, description="Dataset name used in outputs")

    @model_validator(mode="after")
    def check_target(self):
        if self.preset is not None and self.preset not in DATASET_PRESETS:
            raise ValueError(f"unknown preset '{self.preset}'; choose from {sorted(DATASET_PRESETS)}")
        if self.target_column is None and self.preset is None:
            raise ValueError("target_column is required unless a preset names it")
        return self

    @property
    def target(self) -> Union[int, str]:
        if self.target_column is not None:
            return self.target_column
        return DATASET_PRESETS[self.preset].target_column


class SyntheticSource(SyntheticSpec):
    """Synthetic regression stream generated from the experiment seed."""
    kind: Literal["synthetic"] = "synthetic"


class ExperimentConfig(BaseModel):
    """Validated experiment configuration with the defaults of the reference protocol."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    dataset: Union[CsvSource, SyntheticSource] = Field(discriminator="kind")
    zoo: Union[Literal["default-22"], List[ModelSpec]] = Field(default=DEFAULT_ZOO, description="Zoo recipe")
    zoo_file: Optional[str] = Field(default=None, description="Catalog JSON written by the zoo command")
    budget: float = Field(gt=0, default=3.0, description="Per-round budget B in normalized cost units")
    rounds: int = Field(ge=0, default=2000, description="Learning rounds T")
    clients: int = Field(ge=1, default=100, description="Total clients N")
    n_max: int = Field(ge=1, default=10, description="Clients queried per round at most")
    bandwidth: float = Field(gt=0, default=1000.0, description="Client-to-server bandwidth b_t")
    loss_bandwidth: float = Field(gt=0, default=1.0, description="Bandwidth per reported loss b_l")
    pretrain_fraction: float = Field(gt=0, lt=1, default=0.1, description="Share of samples used for pretraining")
    eta: Union[float, RateSchedule] = Field(default=RateSchedule.ONE_OVER_SQRT_T, description="Learning rate")
    xi: Union[float, RateSchedule] = Field(default=RateSchedule.ONE_OVER_SQRT_T, description="Exploration rate")
    algorithms: List[Algorithm] = Field(default_factory=lambda: [Algorithm.EFL_FG])
    seeds: List[int] = Field(default_factory=lambda: [0])
    output_dir: str = Field(default="results")
    oracle: bool = Field(default=True, description="Record full-information losses for regret")
    graph_dump: bool = Field(default=False, description="Write every feedback graph as text")
    alpha_diagnostic: bool = Field(default=True, description="Record the independence number per round")
    estimate_columns: bool = Field(default=False, description="Add per-model estimate columns to traces")
    max_workers: int = Field(ge=1, default=1, description="Threads used to train the zoo")

    @field_validator("eta")
    def validate_eta(cls, v):
        if isinstance(v, float) and not v > 0:
            raise ValueError("learning rate must be > 0")
        return v

    @field_validator("xi")
    def validate_xi(cls, v):
        if isinstance(v, float) and not 0 <= v < 1:
            raise ValueError("exploration rate must lie in [0, 1)")
        return v

    @field_validator("algorithms")
    def validate_algorithms(cls, v):
        if not v:
            raise ValueError("at least one algorithm is required")
        if len(set(v)) != len(v):
            raise ValueError("algorithms must not repeat")
        return v

    @field_validator("seeds")
    def validate_seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        if any(seed < 0 for seed in v):
            raise ValueError("seeds must be >= 0")
        if len(set(v)) != len(v):
            raise ValueError("seeds must not repeat")
        return v

    @field_validator("zoo")
    def validate_zoo(cls, v):
        if isinstance(v, list) and not v:
            raise ValueError("zoo needs at least one model")
        return v

    @field_validator("budget")
    def validate_budget(cls, v):
        if v < MAX_MODEL_COST:
            raise ValueError(
                f"budget {v} is below the largest model cost {MAX_MODEL_COST}; "
                "the budget must cover every single model"
            )
        return v

    @model_validator(mode="after")
    def check_clients(self):
        if self.n_max > self.clients:
            raise ValueError(f"n_max={self.n_max} exceeds clients={self.clients}")
        return self

    def model_specs(self) -> Optional[List[ModelSpec]]:
        """Zoo recipe, or None for the default 22-model zoo."""
        return None if self.zoo == DEFAULT_ZOO else list(self.zoo)

    def simulation_settings(self) -> SimulationSettings:
        return SimulationSettings(
            budget=self.budget,
            clients=self.clients,
            n_max=self.n_max,
            bandwidth=self.bandwidth,
            loss_bandwidth=self.loss_bandwidth,
            oracle=self.oracle,
            alpha_diagnostic=self.alpha_diagnostic,
        )

    def rates(self, model_count: int) -> Tuple[float, float]:
        """(eta, xi) for this horizon and zoo size."""
        return resolve_rates(self.eta, self.xi, self.rounds, model_count)


_UNION_TAGS = {"csv", "synthetic", "float", "int", "str", "bool"}


def _is_union_tag(part) -> bool:
    # Union members add their tag ('float', 'enum[RateSchedule]', ...) to error locations.
    return isinstance(part, str) and (part in _UNION_TAGS or "[" in part)


def _location(error) -> str:
    return ".".join(str(part) for part in error["loc"] if not _is_union_tag(part))


def _validation_message(exc: ValidationError) -> Tuple[Optional[str], str]:
    errors = exc.errors()
    first = errors[0]
    key = _location(first) or None
    # ConfigError prefixes the key, so the first error carries only its message.
    details = "; ".join(
        [first["msg"]] + [f"{_location(e) or '<root>'}: {e['msg']}" for e in errors[1:]]
    )
    return key, details


def config_from_dict(data: dict) -> ExperimentConfig:
    """Validate a mapping, converting validation failures to ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        key, details = _validation_message(exc)
        raise ConfigError(details, key=key) from exc


def parse_config(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read and validate a JSON experiment configuration.

    Args:
        path: Path to the JSON file

    Returns:
        ExperimentConfig with defaults applied

    Raises:
        ConfigError: if the file is missing, malformed or invalid
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON (line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    config = config_from_dict(data)
    logger.debug("Parsed configuration %s", path)
    return config


def serialize_config(config: ExperimentConfig) -> str:
    """JSON text that :func:`parse_config` reads back to an equal config."""
    return json.dumps(config.model_dump(mode="json"), indent=2)


def write_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(serialize_config(config))
    return path
