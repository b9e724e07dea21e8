"""
Data Module
"""

from .annotation_io import (
    AnnotationParseError, AnnotationValidationError, AnnotationSet, Manifest, SceneRecord,
    load_annotations, load_manifest, write_annotations
)
from .scene_dataset import SceneDataset, collate_scenes
from .scene_generator import (
    DatasetSpec, DetectionScene, CellAppearance, generate_scene, generate_dataset,
    sample_cell_classes, sample_appearance, appearance_range, class_level_mean
)

__all__ = [
    'AnnotationParseError', 'AnnotationValidationError', 'AnnotationSet', 'Manifest',
    'SceneRecord', 'load_annotations', 'load_manifest', 'write_annotations',
    'SceneDataset', 'collate_scenes', 'DatasetSpec', 'DetectionScene', 'CellAppearance',
    'generate_scene', 'generate_dataset', 'sample_cell_classes', 'sample_appearance',
    'appearance_range', 'class_level_mean'
]
