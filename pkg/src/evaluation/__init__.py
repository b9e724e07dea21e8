"""
Evaluation Module
"""

from .detection_evaluator import (
    EvalReport, EvaluationError, IOU_THRESHOLDS, match_detections, average_precision, evaluate
)

__all__ = [
    'EvalReport', 'EvaluationError', 'IOU_THRESHOLDS', 'match_detections',
    'average_precision', 'evaluate'
]
