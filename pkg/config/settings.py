"""
Run configuration: dataclass defaults, YAML file, environment, command-line overrides.
"""

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, get_type_hints

import yaml
from dotenv import load_dotenv

from config.errors import ConfigError, DataError
from data.synthetic import SyntheticConfig
from diffusion.schedule import PARAMETERIZATIONS, VARIANCES
from models.conditioning import ConditioningConfig
from models.denoiser import DenoiserConfig
from models.refinement import RefinerHyper
from training.trainer import TrainConfig

SOURCES = ("synthetic", "visuelle")
NORMALIZATIONS = ("zscore", "minmax")
SPLITS = ("train", "test")
ABLATIONS = {
    "none": {"model.conditioning.use_image": True, "model.conditioning.use_temporal": True},
    "no-image": {"model.conditioning.use_image": False, "model.conditioning.use_temporal": True},
    "no-temporal": {"model.conditioning.use_image": True, "model.conditioning.use_temporal": False},
}


@dataclass
class DatasetSettings:
    source: str = "synthetic"
    path: Optional[str] = None
    column_map: Optional[str] = None
    horizon: int = 6
    normalization: str = "zscore"
    image_size: int = 64
    year_min: int = 2015
    year_span: int = 10
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass
class ScheduleSettings:
    T: int = 100
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.1
    variance: str = "small"
    parameterization: str = "epsilon"
    guidance_strength: float = 0.0


@dataclass
class ModelSettings:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)


@dataclass
class EvaluationSettings:
    n_samples: int = 50
    quantiles: Tuple[float, ...] = (0.1, 0.25, 0.5, 0.75, 0.9)
    clamp_negative: bool = True
    split: str = "test"
    max_rows: int = 4096


@dataclass
class RunConfig:
    """Fully resolved configuration of one run; persisted next to its outputs."""

    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    refiner: RefinerHyper = field(default_factory=RefinerHyper)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    seed: int = 0
    device: str = "cpu"
    output_root: str = "runs"

    def __post_init__(self):
        self._validate()

    def _validate(self):
        """Every violation is fatal; a run must never silently fall back to another setting."""
        data = self.dataset
        if data.source not in SOURCES:
            raise ConfigError(f"dataset.source must be one of {SOURCES}, got '{data.source}'")
        if data.source == "visuelle" and not data.path:
            raise ConfigError("dataset.path is required for the visuelle source")
        if data.normalization not in NORMALIZATIONS:
            raise ConfigError(f"dataset.normalization must be one of {NORMALIZATIONS}")
        if data.horizon <= 0 or data.image_size <= 0 or data.year_span <= 0:
            raise ConfigError("dataset.horizon, image_size and year_span must be positive")
        if data.source == "synthetic":
            try:
                data.synthetic.validate()
            except DataError as exc:
                raise ConfigError(f"dataset.synthetic: {exc}") from exc
            if data.synthetic.horizon != data.horizon:
                raise ConfigError(f"dataset.synthetic.horizon={data.synthetic.horizon} "
                                  f"!= dataset.horizon={data.horizon}")

        schedule = self.schedule
        if schedule.variance not in VARIANCES:
            raise ConfigError(f"schedule.variance must be one of {VARIANCES}")
        if schedule.parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"schedule.parameterization must be one of {PARAMETERIZATIONS}")
        if schedule.guidance_strength != 0:
            raise ConfigError(f"schedule.guidance_strength must be 0 for forecasting, got {schedule.guidance_strength}: "
                              "unreleased products have no observed sales to guide towards")

        self.model.denoiser.validate()
        if self.model.denoiser.horizon != data.horizon:
            raise ConfigError(f"model.denoiser.horizon={self.model.denoiser.horizon} "
                              f"!= dataset.horizon={data.horizon}")
        self.model.conditioning.validate(self.model.denoiser.channels)
        self.train.validate()
        self.refiner.validate()

        evaluation = self.evaluation
        if evaluation.n_samples < 1:
            raise ConfigError(f"evaluation.n_samples must be >= 1, got {evaluation.n_samples}")
        if evaluation.split not in SPLITS:
            raise ConfigError(f"evaluation.split must be one of {SPLITS}")
        if any(not 0.0 <= q <= 1.0 for q in evaluation.quantiles):
            raise ConfigError(f"quantiles must lie in [0, 1], got {evaluation.quantiles}")
        if list(evaluation.quantiles) != sorted(evaluation.quantiles):
            raise ConfigError("quantiles must be sorted ascending")

    @property
    def ablation(self) -> str:
        flags = (self.model.conditioning.use_image, self.model.conditioning.use_temporal)
        for name, values in ABLATIONS.items():
            if tuple(values.values()) == flags:
                return name
        return "none"

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    def save_to_file(self, config_path: str) -> Path:
        target = Path(config_path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", encoding="utf-8") as handle:
            yaml.safe_dump(self.to_dict(), handle, default_flow_style=False, sort_keys=False)
        return target

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return _build(cls, data, "")

    @classmethod
    def from_file(cls, config_path: str) -> "RunConfig":
        return cls.from_dict(_read_yaml(config_path))

    @classmethod
    def load(cls, config_path: Optional[str] = None, overrides: Iterable[str] = (),
             use_env: bool = True) -> "RunConfig":
        """
        Resolve defaults, then the YAML file, then MDIFF_* environment variables,
        then ``section.key=value`` overrides.
        """
        data = cls().to_dict()
        if config_path:
            _merge(data, _read_yaml(config_path))
        if use_env:
            load_dotenv()
            env = {
                "output_root": os.getenv("MDIFF_OUTPUT_ROOT"),
                "device": os.getenv("MDIFF_DEVICE"),
                "seed": os.getenv("MDIFF_SEED"),
            }
            for key, value in env.items():
                if value:
                    data[key] = _env_seed(value) if key == "seed" else value
        for override in overrides:
            apply_override(data, override)
        return cls.from_dict(data)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def _env_seed(value: str) -> int:
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"MDIFF_SEED must be an integer, got '{value}'") from exc


def _read_yaml(config_path: str) -> Dict[str, Any]:
    path = Path(config_path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = yaml.safe_load(handle) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return data


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> None:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def apply_override(data: Dict[str, Any], override: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; the value is parsed as YAML."""
    if "=" not in override:
        raise ConfigError(f"override must look like section.key=value, got '{override}'")
    dotted, raw = override.split("=", 1)
    keys = dotted.strip().split(".")
    node = data
    for key in keys[:-1]:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"unknown config section '{dotted}'")
        node = node[key]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key '{dotted}'")
    node[keys[-1]] = yaml.safe_load(raw)


def _build(cls, data: Dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{prefix or 'root'}' must be a mapping")
    hints = get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys in '{prefix or 'root'}': {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if is_dataclass(hint):
            value = _build(hint, value, f"{prefix}{name}.")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid config section '{prefix or 'root'}': {exc}") from exc
