"""
Instance Comparison Module
"""

from .contrast_loss import (
    LabeledEmbeddingBatch, UndefinedSimilarityError, EmptyComparisonError,
    cosine_sim, supervised_contrast_loss, roi_contrast_loss, cls_contrast_loss,
    comparable
)

__all__ = [
    'LabeledEmbeddingBatch', 'UndefinedSimilarityError', 'EmptyComparisonError',
    'cosine_sim', 'supervised_contrast_loss', 'roi_contrast_loss', 'cls_contrast_loss',
    'comparable'
]
