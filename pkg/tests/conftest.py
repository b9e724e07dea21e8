"""
Shared fixtures: a tiny synthetic dataset and a small detector configuration
"""

import sys
from pathlib import Path

import pytest
import yaml

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.data.annotation_io import load_manifest  # noqa: E402
from src.data.scene_generator import DatasetSpec, generate_dataset  # noqa: E402
from src.detector.two_stage_detector import DetectorConfig  # noqa: E402
from src.orchestrator.config import (  # noqa: E402
    EvaluationConfig, ExperimentConfig, LoggingConfig, ReportingConfig, TrainConfig
)


def small_detector_config(**overrides) -> DetectorConfig:
    values = dict(
        backbone_channels=[8, 16, 16, 16],
        rpn_hidden_channels=16,
        rpn_batch_size_per_image=64,
        rpn_pre_nms_top_n=200,
        rpn_post_nms_top_n_train=40,
        rpn_post_nms_top_n_test=20,
        roi_channels=16,
        representation_size=32,
        roi_batch_size=32,
    )
    values.update(overrides)
    return DetectorConfig(**values)


def tiny_experiment(tmp_path: Path = None, **training) -> ExperimentConfig:
    values = dict(
        epochs=2, warmup_epochs=1, k=32, Q=8, per_class_sample=4, batch_size=2,
        lr_decay_epochs=[1], tau_c=0.01, log_every=1,
    )
    values.update(training)
    log_file = str(tmp_path / "test.log") if tmp_path is not None else "logs/test.log"
    return ExperimentConfig(
        training=TrainConfig(**values),
        detector=small_detector_config(),
        evaluation=EvaluationConfig(batch_size=2, evaluate_every_epoch=False),
        reporting=ReportingConfig(format=["json", "csv", "html"]),
        logging=LoggingConfig(file=log_file),
    )


def write_config(config: ExperimentConfig, path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)
    return path


@pytest.fixture(scope="session")
def tiny_spec() -> DatasetSpec:
    return DatasetSpec(
        num_classes=3,
        class_frequencies=[6, 3, 1],
        ambiguity=0.3,
        image_size=64,
        scenes_per_split={"train": 6, "val": 2, "test": 3},
        min_cells=1,
        max_cells=3,
        seed=7,
    )


@pytest.fixture(scope="session")
def tiny_manifest_path(tmp_path_factory, tiny_spec) -> Path:
    return generate_dataset(tiny_spec, tmp_path_factory.mktemp("tiny_dataset"))


@pytest.fixture(scope="session")
def tiny_manifest(tiny_manifest_path):
    return load_manifest(tiny_manifest_path)


@pytest.fixture
def experiment(tmp_path) -> ExperimentConfig:
    return tiny_experiment(tmp_path)
