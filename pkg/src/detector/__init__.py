"""
Detector Module
"""

from .backbone import ConvBackbone, FeatureMap, ConfigError
from .box_coder import BoxCoder
from .losses import head_losses, focal_loss
from .roi_head import (
    SampledRoIs, sample_proposals, filter_background, RoIFeatureExtractor,
    ProjectionE1, SharedHead, BoxPredictor
)
from .rpn import AnchorGenerator, ProposalSet, RegionProposalNetwork, assign_anchor_targets
from .two_stage_detector import DetectorConfig, DetectorOutput, DetectorTrainOutput, TwoStageDetector

__all__ = [
    'ConvBackbone', 'FeatureMap', 'ConfigError', 'BoxCoder', 'head_losses', 'focal_loss',
    'SampledRoIs', 'sample_proposals', 'filter_background', 'RoIFeatureExtractor',
    'ProjectionE1', 'SharedHead', 'BoxPredictor', 'AnchorGenerator', 'ProposalSet',
    'RegionProposalNetwork', 'assign_anchor_targets', 'DetectorConfig', 'DetectorOutput',
    'DetectorTrainOutput', 'TwoStageDetector'
]
