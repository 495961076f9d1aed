"""
Experiment Configuration.

Pydantic models for experiment files written as flat dotted-key TOML, the
per-experiment defaults, and the printer behind ``config --print-defaults``.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from shiftguard.adapt import AdaptOptions
from shiftguard.conic import SolverSettings
from shiftguard.environments.dubins import PathSpec
from shiftguard.errors import ConfigError
from shiftguard.pso import PsoConfig
from shiftguard.relu_net import TrainConfig

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

logger = logging.getLogger(__name__)

Experiment = Literal["dubins", "linear_car", "acc"]


class DatasetSection(BaseModel):
    """Transition collection from the deployment environment."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    count: int = Field(default=3000, gt=0)
    episode_length: int = Field(default=50, gt=0)
    uniform_fraction: float = Field(default=0.5, ge=0.0, le=1.0)
    dither: float = Field(default=0.1, ge=0.0)
    seed: int = Field(default=0, ge=0)


class SurrogateSection(BaseModel):
    """
    Surrogate architectures.

    ``embedder_dims`` lists the embedder's layer widths after the state input
    (the last one is the feature dimension); empty means no embedder. An
    empty ``deep_hidden`` means no deep comparison network.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    mean_hidden: List[int] = Field(default_factory=lambda: [8])
    cov_hidden: List[int] = Field(default_factory=lambda: [8])
    embedder_dims: List[int] = Field(default_factory=list)
    deep_hidden: List[int] = Field(default_factory=list)


class AdaptSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    anchor_strategy: Literal["descent", "origin"] = "descent"
    anchor_iterations: int = Field(default=10, ge=0)
    scale_actions: bool = True
    use_interval_bounds: bool = False
    max_tightness: float = Field(default=1e6, gt=0.0)
    initial_variance: float = Field(default=1e-6, gt=0.0)
    pso_surrogate: Literal["mean", "deep"] = "mean"
    target: Literal["reference", "replan"] = "reference"


class ExperimentConfig(BaseModel):
    """Everything one experiment needs; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    experiment: Experiment = "linear_car"
    horizon: int = Field(default=100, ge=0)
    confidence: float = Field(default=0.95, gt=0.0, lt=1.0)
    delta: float = Field(default=1e-6, gt=0.0)
    trust_floor: float = Field(default=1e-8, gt=0.0)
    seeds: List[int] = Field(default_factory=lambda: [0])
    workers: int = Field(default=1, ge=1)
    output_dir: str = "results/linear_car"
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    surrogate: SurrogateSection = Field(default_factory=SurrogateSection)
    training: TrainConfig = Field(default_factory=TrainConfig)
    pso: PsoConfig = Field(default_factory=PsoConfig)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    adapt: AdaptSection = Field(default_factory=AdaptSection)
    path: PathSpec = Field(default_factory=PathSpec)

    def adapt_options(self) -> AdaptOptions:
        return AdaptOptions(trust_floor=self.trust_floor, solver=self.solver, **self.adapt.model_dump())

    @property
    def models_dir(self) -> Path:
        return Path(self.output_dir) / "models"

    @property
    def episodes_dir(self) -> Path:
        return Path(self.output_dir) / "episodes"


_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "dubins": {
        "horizon": 200,
        "seeds": [0, 1, 2, 3, 4],
        "dataset": {"count": 4000, "episode_length": 100},
        "surrogate": {"mean_hidden": [8], "cov_hidden": [8], "deep_hidden": [16, 16]},
        "training": {"epochs": 300, "learning_rate": 3e-3},
        "pso": {"swarm_size": 5, "iterations": 3},
        "adapt": {"target": "replan"},
    },
    "linear_car": {
        "horizon": 100,
        "seeds": list(range(10)),
        "dataset": {"count": 3000, "episode_length": 50},
        "surrogate": {"mean_hidden": [10, 5], "cov_hidden": [8]},
        "training": {"epochs": 100, "learning_rate": 1e-4, "final_lr_fraction": 0.01},
        "adapt": {"target": "replan"},
    },
    "acc": {
        "horizon": 300,
        "seeds": [0, 1, 2, 3, 4],
        "dataset": {"count": 4000, "episode_length": 100},
        "surrogate": {"mean_hidden": [8], "cov_hidden": [8], "deep_hidden": [16, 16]},
        "training": {"epochs": 300, "learning_rate": 3e-3},
    },
}


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _validate(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}")


def default_config(experiment: str = "linear_car") -> ExperimentConfig:
    """Fully defaulted configuration of ``experiment``."""
    if experiment not in _DEFAULTS:
        raise ConfigError(f"unknown experiment {experiment!r}, expected one of {sorted(_DEFAULTS)}")
    overrides = {"experiment": experiment, "output_dir": f"results/{experiment}", **_DEFAULTS[experiment]}
    return _validate(_merge(ExperimentConfig().model_dump(), overrides))


def load_config(path: Union[str, Path], experiment: Optional[str] = None) -> ExperimentConfig:
    """
    Read a dotted-key TOML file on top of the experiment's defaults.

    Args:
        path: Configuration file
        experiment: Experiment whose defaults are used when the file names none

    Returns:
        Validated configuration

    Raises:
        ConfigError: If the file is missing, malformed or has unknown keys
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}")
    name = data.get("experiment", experiment or "linear_car")
    base = default_config(name).model_dump()
    if "experiment" in data and "output_dir" not in data:
        data = {**data, "output_dir": f"results/{name}"}
    config = _validate(_merge(base, data))
    logger.info(f"Loaded {config.experiment} configuration from {path}")
    return config


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    raise ConfigError(f"cannot write {type(value).__name__} values to TOML")


def _flatten(data: Dict[str, Any], prefix: str = "") -> List[str]:
    lines = []
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            lines.extend(_flatten(value, f"{dotted}."))
        elif value is not None:
            lines.append(f"{dotted} = {_format_value(value)}")
    return lines


def to_toml(config: ExperimentConfig) -> str:
    """Dotted-key TOML that ``load_config`` reads back to ``config``. None values are omitted."""
    return "\n".join(_flatten(config.model_dump())) + "\n"
