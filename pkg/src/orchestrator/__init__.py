"""
Main Orchestrator Module
"""

from .config import (
    DataConfig, EvaluationConfig, ExperimentConfig, LoggingConfig, ReportingConfig, TrainConfig,
    apply_overrides, load_config, load_dataset_spec, overrides_from_pairs, parse_override
)
from .main_orchestrator import MainOrchestrator, SweepCell, expand_grid
from .trainer import (
    LossBreakdown, NonFiniteLossError, TrainResult, Trainer, TrainingDivergedError, compose_loss,
    evaluate_model, load_checkpoint, load_model, predict
)

__all__ = [
    'DataConfig', 'EvaluationConfig', 'ExperimentConfig', 'LoggingConfig', 'ReportingConfig',
    'TrainConfig', 'apply_overrides', 'load_config', 'load_dataset_spec', 'overrides_from_pairs',
    'parse_override', 'MainOrchestrator', 'SweepCell', 'expand_grid', 'LossBreakdown',
    'NonFiniteLossError', 'TrainResult', 'Trainer', 'TrainingDivergedError', 'compose_loss',
    'evaluate_model', 'load_checkpoint', 'load_model', 'predict'
]
