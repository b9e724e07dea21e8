"""
Configuration Module
Sectioned YAML configuration validated by pydantic models, plus dotted-key overrides
"""

import copy
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.data.scene_generator import DatasetSpec
from src.detector.backbone import ConfigError
from src.detector.two_stage_detector import DetectorConfig


class TrainConfig(BaseModel):
    """Optimization, comparison-loss and memory-bank settings"""
    model_config = ConfigDict(extra="forbid")

    lambda_roi: float = Field(default=1.0, ge=0.0)
    lambda_cls: float = Field(default=0.1, ge=0.0)
    tau_roi: float = 6.0
    tau_cls: float = 6.0
    Q: int = Field(default=80, ge=1)
    k0: float = Field(default=8.0, gt=0.0)
    k: int = Field(default=256, ge=1)
    tau_c: Union[float, List[float]] = 0.7
    warmup_epochs: int = Field(default=1, ge=0)
    epochs: int = Field(default=24, ge=1)
    lr: float = Field(default=0.005, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    lr_decay_epochs: List[int] = Field(default_factory=lambda: [8, 14])
    lr_decay_factor: float = Field(default=0.1, gt=0.0)
    head_loss_mode: Literal["cross_entropy", "focal"] = "cross_entropy"
    seed: int = 0

    batch_size: int = Field(default=2, ge=1)
    per_class_sample: int = Field(default=16, ge=1)
    bank_view: Literal["balanced", "full"] = "balanced"
    bank_label_source: Literal["gt", "predicted"] = "gt"
    normalize_positives: bool = False
    augmentations_per_gt: int = Field(default=1, ge=1)
    use_roi_compare: bool = True
    use_box_augmentation: bool = True
    use_cls_compare: bool = True
    ric_exclude_injected_gt: bool = True
    divergence_threshold: float = Field(default=1e4, gt=0.0)
    num_workers: int = Field(default=0, ge=0)
    device: str = "cpu"
    log_every: int = Field(default=20, ge=1)

    @field_validator("tau_roi", "tau_cls")
    @classmethod
    def _positive_temperature(cls, value: float) -> float:
        if value <= 0:
            raise ValueError(f"temperature must be > 0, got {value}")
        return value

    @field_validator("tau_c")
    @classmethod
    def _confidence_range(cls, value):
        values = value if isinstance(value, list) else [value]
        for v in values:
            if not 0.0 < v < 1.0:
                raise ValueError(f"confidence thresholds must lie in (0, 1), got {v}")
        return value

    @model_validator(mode="after")
    def _warmup_before_end(self) -> "TrainConfig":
        # warmup_epochs == epochs is the baseline-only schedule
        if self.warmup_epochs > self.epochs:
            raise ValueError(
                f"warmup_epochs ({self.warmup_epochs}) must not exceed epochs ({self.epochs})"
            )
        if sorted(self.lr_decay_epochs) != list(self.lr_decay_epochs):
            raise ValueError(f"lr_decay_epochs must be increasing, got {self.lr_decay_epochs}")
        return self

    @property
    def comparison_enabled(self) -> bool:
        roi = self.use_roi_compare and self.lambda_roi > 0
        cls_ = self.use_cls_compare and self.lambda_cls > 0
        return roi or cls_

    def lr_at_epoch(self, epoch: int) -> float:
        """Scheduled learning rate while training epoch ``epoch`` (0-based)"""
        passed = sum(1 for milestone in self.lr_decay_epochs if epoch >= milestone)
        return self.lr * self.lr_decay_factor ** passed


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    manifest: Optional[str] = None
    train_split: str = "train"
    val_split: Optional[str] = "val"
    test_split: str = "test"
    spec: DatasetSpec = Field(default_factory=DatasetSpec)


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: str = "test"
    batch_size: int = Field(default=4, ge=1)
    score_threshold: float = Field(default=0.05, ge=0.0, le=1.0)
    nms_iou: float = Field(default=0.5, gt=0.0, le=1.0)
    max_detections: int = Field(default=100, ge=1)
    evaluate_every_epoch: bool = True


class ReportingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: List[Literal["json", "csv", "html"]] = Field(default_factory=lambda: ["json", "csv"])
    include_charts: bool = True
    title: str = "cellcompare evaluation"


class LoggingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    level: str = "INFO"
    file: str = "logs/cellcompare.log"
    rotation: str = "10 MB"


class ExperimentConfig(BaseModel):
    """Whole configuration file"""
    model_config = ConfigDict(extra="forbid")

    training: TrainConfig = Field(default_factory=TrainConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    reporting: ReportingConfig = Field(default_factory=ReportingConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)

    def effective_detector(self) -> DetectorConfig:
        """Detector settings with the training-owned sampling and head-loss fields applied"""
        return self.detector.model_copy(update={
            "roi_batch_size": self.training.k,
            "head_loss_mode": self.training.head_loss_mode,
            "score_threshold": self.evaluation.score_threshold,
            "nms_iou": self.evaluation.nms_iou,
            "max_detections": self.evaluation.max_detections,
        })

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        return validate_config(apply_overrides(self.model_dump(mode="json"), overrides))


SECTIONS = tuple(ExperimentConfig.model_fields)


def _format_validation_error(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        location = ".".join(str(p) for p in item["loc"])
        parts.append(f"{location}: {item['msg']}")
    return "; ".join(parts)


def validate_config(raw: Optional[Mapping[str, Any]]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw or {})
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {_format_validation_error(e)}") from e


def parse_override(text: str) -> Tuple[str, Any]:
    """``section.key=value`` with the value parsed as YAML"""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' must look like section.key=value")
    key, raw_value = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"Override '{text}' has an empty key")
    try:
        value = yaml.safe_load(raw_value)
    except yaml.YAMLError as e:
        raise ConfigError(f"Override '{text}' has an unparsable value: {e}") from e
    return key, value


def qualify_key(key: str) -> str:
    """Bare keys refer to the training section"""
    return key if key.split(".", 1)[0] in SECTIONS else f"training.{key}"


def apply_overrides(raw: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Copy of ``raw`` with dotted-key overrides applied"""
    result = copy.deepcopy(dict(raw or {}))
    for dotted, value in overrides.items():
        parts = qualify_key(dotted).split(".")
        node = result
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"Cannot override '{dotted}': '{part}' is not a section")
            node = child
        node[parts[-1]] = value
    return result


def read_yaml(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            payload = yaml.safe_load(f)
    except FileNotFoundError:
        logger.error(f"Config file not found: {path}")
        raise
    except yaml.YAMLError as e:
        logger.error(f"Error parsing config file: {e}")
        raise ConfigError(f"{path}: {e}") from e
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be a mapping, got {type(payload).__name__}")
    return payload


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Defaults < file < overrides"""
    raw = read_yaml(path) if path is not None else {}
    config = validate_config(apply_overrides(raw, overrides or {}))
    logger.debug(f"Configuration loaded from {path or '<defaults>'} with {len(overrides or {})} overrides")
    return config


def load_dataset_spec(path) -> DatasetSpec:
    raw = read_yaml(path)
    section = raw["data"].get("spec", {}) if isinstance(raw.get("data"), dict) else raw
    try:
        return DatasetSpec.model_validate(section)
    except ValidationError as e:
        raise ConfigError(f"Invalid dataset spec {path}: {_format_validation_error(e)}") from e


def overrides_from_pairs(pairs: Sequence[str]) -> Dict[str, Any]:
    return dict(parse_override(p) for p in pairs)
