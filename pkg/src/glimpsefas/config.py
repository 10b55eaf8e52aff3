"""Experiment configuration: one YAML document, schema-checked, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, create_model

from .model import ModelConfig
from .synthdata import SynthConfig
from .training import TrainConfig


class ConfigSchemaError(ValueError):
    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path


def _schema_for(cls):
    hints = typing.get_type_hints(cls)
    fields = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = ...
        fields[f.name] = (hints[f.name], default)
    return create_model(f"{cls.__name__}Schema", __config__=ConfigDict(extra="forbid"), **fields)


SynthSchema = _schema_for(SynthConfig)
ModelSchema = _schema_for(ModelConfig)
TrainSchema = _schema_for(TrainConfig)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SplitSchema(_Strict):
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0


class DataSchema(_Strict):
    source: Literal["synth", "manifest", "folder"] = "synth"
    path: Optional[str] = None
    label_map: dict[str, Literal["bona_fide", "attack"]] = Field(
        default_factory=lambda: {"bona_fide": "bona_fide", "attack": "attack"}
    )


class MetricsSchema(_Strict):
    mode: Literal["frame", "group"] = "frame"


class AblateSchema(_Strict):
    axis: Optional[str] = None
    values: Optional[list[Any]] = None


class ExperimentSchema(_Strict):
    synth: SynthSchema = Field(default_factory=SynthSchema)
    split: SplitSchema = Field(default_factory=SplitSchema)
    data: DataSchema = Field(default_factory=DataSchema)
    model: ModelSchema = Field(default_factory=ModelSchema)
    train: TrainSchema = Field(default_factory=TrainSchema)
    metrics: MetricsSchema = Field(default_factory=MetricsSchema)
    ablate: AblateSchema = Field(default_factory=AblateSchema)
    output_dir: str = "runs/default"


@dataclasses.dataclass
class ExperimentConfig:
    synth: SynthConfig
    model: ModelConfig
    train: TrainConfig
    split_ratios: tuple[float, float, float]
    split_seed: int
    data_source: str
    data_path: str | None
    label_map: dict[str, str]
    metrics_mode: str
    ablate_axis: str | None
    ablate_values: list | None
    output_dir: Path
    raw: dict  # the resolved document, written into every output directory

    @property
    def group_mode(self) -> bool:
        return self.metrics_mode == "group"


def set_dotted(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigSchemaError(dotted, "cannot descend into a scalar")
    node[keys[-1]] = value


def parse_overrides(items: list[str] | None) -> list[tuple[str, Any]]:
    out = []
    for item in items or []:
        if "=" not in item:
            raise ConfigSchemaError(item, "override must look like key.path=value")
        key, val = item.split("=", 1)
        out.append((key.strip(), yaml.safe_load(val)))
    return out


def resolve(doc: dict | None, overrides: list[tuple[str, Any]] | None = None) -> ExperimentConfig:
    doc = dict(doc or {})
    for key, val in overrides or []:
        set_dotted(doc, key, val)
    try:
        s = ExperimentSchema.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        raise ConfigSchemaError(path, err["msg"]) from exc
    raw = s.model_dump(mode="json")
    try:
        synth = SynthConfig(**s.synth.model_dump())
        synth.validate()
        model = ModelConfig(**s.model.model_dump())
        model.validate()
        train = TrainConfig(**s.train.model_dump())
        train.validate()
    except ValueError as exc:
        raise ConfigSchemaError("config", str(exc)) from exc
    if model.input_size != synth.image_size and s.data.source == "synth":
        raise ConfigSchemaError("model.input_size", "must equal synth.image_size for synthetic data")
    return ExperimentConfig(
        synth=synth,
        model=model,
        train=train,
        split_ratios=tuple(s.split.ratios),
        split_seed=s.split.seed,
        data_source=s.data.source,
        data_path=s.data.path,
        label_map=dict(s.data.label_map),
        metrics_mode=s.metrics.mode,
        ablate_axis=s.ablate.axis,
        ablate_values=s.ablate.values,
        output_dir=Path(s.output_dir),
        raw=raw,
    )


def load_config(path: str | Path, overrides: list[tuple[str, Any]] | None = None) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise ConfigSchemaError("<root>", "config must be a mapping")
    return resolve(doc, overrides)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=True)


def write_snapshot(cfg: ExperimentConfig, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "config.yaml"
    path.write_text(dump(cfg), encoding="utf-8")
    return path
