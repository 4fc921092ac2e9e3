from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, TypeVar

import pydantic
from pydantic_settings import BaseSettings, SettingsConfigDict

from .alignment_model import TaskKind
from .config_parser import ConfigError, parse_experiment
from .methods import AdjointConfig, JpoConfig, MethodTag, SupervisedConfig
from .noise_lab import Reducer
from .optimizers import OptimizerConfig, OptimizerKind
from .problems import Family


LOGGER = logging.getLogger(__name__)

CONFIG_VERSION = 1

ModelT = TypeVar("ModelT", bound=pydantic.BaseModel)

__all__ = [
    "CONFIG_VERSION",
    "AlignmentTaskConfig",
    "ConfigError",
    "ExperimentConfig",
    "HarnessSettings",
    "load_alignment_config",
    "load_config",
]


class ExperimentConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    family: Family
    ns: tuple[pydantic.PositiveInt, ...] = pydantic.Field(min_length=1)
    seeds: tuple[pydantic.NonNegativeInt, ...] = pydantic.Field(min_length=1)
    methods: tuple[MethodTag, ...] = pydantic.Field(min_length=1)
    output_dir: Path = Path("runs")
    refine: bool = True
    select_learning_rate: bool = False
    jpo: JpoConfig = JpoConfig()
    supervised: SupervisedConfig = SupervisedConfig()
    adjoint: AdjointConfig = AdjointConfig()
    bfgs: OptimizerConfig = OptimizerConfig()
    gd: OptimizerConfig = OptimizerConfig(kind=OptimizerKind.GD, step_size=1e-2)
    refinement: OptimizerConfig = OptimizerConfig(max_iterations=100)

    @pydantic.field_validator("methods")
    @classmethod
    def _unique_methods(cls, value: tuple[MethodTag, ...]) -> tuple[MethodTag, ...]:
        if len(set(value)) != len(value):
            msg = "Methods must not repeat"
            raise ValueError(msg)
        return value


class AlignmentTaskConfig(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(frozen=True, extra="forbid")

    task: TaskKind = TaskKind.LINEAR
    ns: tuple[pydantic.PositiveInt, ...] = tuple(range(1, 65))
    seeds: tuple[pydantic.NonNegativeInt, ...] = pydantic.Field(
        default=(0, 1, 2, 3), min_length=1
    )
    learning_rate: float = pydantic.Field(default=1e-4, gt=0)
    reducer: Reducer = Reducer.SUM


class HarnessSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="JPO_")

    seed: pydantic.NonNegativeInt | None = None
    output_dir: Path | None = None
    workers: pydantic.PositiveInt = 1

    def apply(self, config: ExperimentConfig) -> ExperimentConfig:
        update: dict[str, Any] = {}
        if self.seed is not None:
            update["seeds"] = (self.seed,)
        if self.output_dir is not None:
            update["output_dir"] = self.output_dir
        return config.model_copy(update=update) if update else config


def _read(path: Path) -> dict[str, Any]:
    try:
        text = path.read_text()
    except OSError as ex:
        msg = f"Cannot read config {path}"
        raise ConfigError(msg) from ex
    raw = parse_experiment(text)
    version = raw.pop("version", None)
    if version is None:
        msg = f"Config {path} does not declare a version"
        raise ConfigError(msg)
    if version != CONFIG_VERSION:
        msg = f"Unsupported config version {version!r}, expected {CONFIG_VERSION}"
        raise ConfigError(msg)
    return raw


def _validate(model: type[ModelT], raw: dict[str, Any]) -> ModelT:
    try:
        return model.model_validate(raw)
    except pydantic.ValidationError as ex:
        msg = str(ex)
        raise ConfigError(msg) from ex


def load_config(
    path: Path, settings: HarnessSettings | None = None
) -> ExperimentConfig:
    config = _validate(ExperimentConfig, _read(path))
    if settings is not None:
        config = settings.apply(config)
    LOGGER.debug("Loaded experiment config from %s", path)
    return config


def load_alignment_config(path: Path) -> AlignmentTaskConfig:
    return _validate(AlignmentTaskConfig, _read(path))
