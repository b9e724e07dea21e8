"""
Geometry Module
"""

from .box_ops import (
    Box, LabeledBox, Detection, InvalidBoxError, DegenerateBoxError, DegenerateAugmentationError,
    xywh_to_xyxy, augment_box, augmented_views, iou, clip_to_image
)

__all__ = [
    'Box', 'LabeledBox', 'Detection', 'InvalidBoxError', 'DegenerateBoxError',
    'DegenerateAugmentationError', 'xywh_to_xyxy', 'augment_box', 'augmented_views',
    'iou', 'clip_to_image'
]
