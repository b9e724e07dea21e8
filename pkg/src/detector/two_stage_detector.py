"""
Two-Stage Detector Module
Backbone -> RPN -> proposal sampling -> RoI features -> E1 -> shared head -> predictor
"""

from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, Field
from torch import nn
from torchvision.ops import batched_nms, clip_boxes_to_image, remove_small_boxes

from src.geometry.box_ops import Box, Detection, LabeledBox

from .backbone import ConvBackbone, FeatureMap
from .box_coder import BoxCoder
from .losses import head_losses
from .roi_head import (
    ROI_BOX_WEIGHTS, BoxPredictor, ProjectionE1, RoIFeatureExtractor, SampledRoIs,
    SharedHead, concat_rois, sample_proposals
)
from .rpn import AnchorGenerator, ProposalSet, RegionProposalNetwork


class DetectorConfig(BaseModel):
    """Detector architecture and base-detector sampling settings"""
    backbone_channels: List[int] = Field(default_factory=lambda: [16, 32, 64, 64])
    backbone_strides: List[int] = Field(default_factory=lambda: [2, 2, 2, 1])
    anchor_sizes: List[float] = Field(default_factory=lambda: [16.0, 32.0, 64.0])
    anchor_ratios: List[float] = Field(default_factory=lambda: [1.0])
    rpn_hidden_channels: int = 128
    rpn_batch_size_per_image: int = 256
    rpn_positive_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_pre_nms_top_n: int = 1000
    rpn_post_nms_top_n_train: int = 300
    rpn_post_nms_top_n_test: int = 100
    rpn_nms_thresh: float = 0.7
    roi_channels: int = 256
    roi_output_size: int = 7
    roi_sampling_ratio: int = 2
    representation_size: int = 1024
    roi_batch_size: int = Field(default=256, ge=1)
    roi_fg_iou: float = 0.5
    roi_fg_fraction: float = 0.25
    head_loss_mode: Literal["cross_entropy", "focal"] = "cross_entropy"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100

    @property
    def embedding_dim(self) -> int:
        return self.roi_channels * self.roi_output_size * self.roi_output_size


@dataclass
class DetectorOutput:
    """Per-RoI head outputs"""
    class_logits: torch.Tensor
    box_deltas: torch.Tensor
    roi_embeddings: torch.Tensor
    class_embeddings: torch.Tensor

    @property
    def class_scores(self) -> torch.Tensor:
        return F.softmax(self.class_logits, dim=1)


@dataclass
class DetectorTrainOutput:
    """Everything one training forward pass produces"""
    losses: Dict[str, torch.Tensor]
    rois: SampledRoIs
    image_index: torch.Tensor
    heads: DetectorOutput
    projected: torch.Tensor
    proposals: List[ProposalSet]


class TwoStageDetector(nn.Module):
    """Desk-scale Faster R-CNN style detector exposing RoI and class embeddings"""

    def __init__(self, num_classes: int, config: Optional[DetectorConfig] = None):
        super().__init__()
        self.num_classes = num_classes
        self.config = config or DetectorConfig()
        cfg = self.config

        self.backbone = ConvBackbone(cfg.backbone_channels, cfg.backbone_strides)
        self.rpn = RegionProposalNetwork(
            self.backbone.out_channels,
            AnchorGenerator(cfg.anchor_sizes, cfg.anchor_ratios),
            hidden_channels=cfg.rpn_hidden_channels,
            batch_size_per_image=cfg.rpn_batch_size_per_image,
            positive_fraction=cfg.rpn_positive_fraction,
            pos_iou=cfg.rpn_pos_iou,
            neg_iou=cfg.rpn_neg_iou,
            pre_nms_top_n=cfg.rpn_pre_nms_top_n,
            post_nms_top_n_train=cfg.rpn_post_nms_top_n_train,
            post_nms_top_n_test=cfg.rpn_post_nms_top_n_test,
            nms_thresh=cfg.rpn_nms_thresh,
        )
        self.roi_extractor = RoIFeatureExtractor(
            self.backbone.out_channels, self.backbone.stride,
            out_channels=cfg.roi_channels, output_size=cfg.roi_output_size,
            sampling_ratio=cfg.roi_sampling_ratio,
        )
        self.e1 = ProjectionE1(cfg.roi_channels)
        self.shared_head = SharedHead(cfg.embedding_dim, cfg.representation_size)
        self.predictor = BoxPredictor(cfg.representation_size, num_classes)
        self.box_coder = BoxCoder(ROI_BOX_WEIGHTS)

        n_params = sum(p.numel() for p in self.parameters())
        logger.debug(f"TwoStageDetector built: {num_classes} classes, {n_params:,} parameters")

    @property
    def background(self) -> int:
        return self.num_classes

    def embed_boxes(self, projected: torch.Tensor, boxes: Sequence[torch.Tensor]) -> torch.Tensor:
        """E1 output for arbitrary boxes, shape K x (C * S * S)"""
        return self.e1(self.roi_extractor(projected, boxes)).flatten(start_dim=1)

    def _heads(self, projected: torch.Tensor, boxes: Sequence[torch.Tensor]) -> DetectorOutput:
        e1 = self.e1(self.roi_extractor(projected, boxes))
        class_embeddings = self.shared_head(e1)
        logits, deltas = self.predictor(class_embeddings)
        return DetectorOutput(logits, deltas, e1.flatten(start_dim=1), class_embeddings)

    def forward(self, images: torch.Tensor, gt_boxes: Sequence[torch.Tensor],
                gt_labels: Sequence[torch.Tensor]) -> DetectorTrainOutput:
        """Training pass: base losses plus the embeddings of every sampled RoI"""
        image_size = tuple(images.shape[-2:])
        features: FeatureMap = self.backbone(images)
        proposals, losses = self.rpn(features, image_size, gt_boxes)

        per_image = [
            sample_proposals(
                proposals[i].boxes, gt_boxes[i], gt_labels[i], self.config.roi_batch_size,
                self.num_classes, self.config.roi_fg_iou, self.config.roi_fg_fraction, self.box_coder,
            )
            for i in range(images.shape[0])
        ]
        rois = concat_rois(per_image)
        image_index = torch.cat([
            torch.full((len(r),), i, dtype=torch.long, device=images.device) for i, r in enumerate(per_image)
        ])

        projected = self.roi_extractor.project(features)
        heads = self._heads(projected, [r.boxes for r in per_image])

        loss_cls, loss_reg = head_losses(
            heads.class_logits, heads.box_deltas, rois.assigned_class, rois.regression_targets,
            self.background, self.config.head_loss_mode,
            self.config.focal_gamma, self.config.focal_alpha,
        )
        losses['roi_cls'] = loss_cls
        losses['roi_reg'] = loss_reg
        return DetectorTrainOutput(losses, rois, image_index, heads, projected, proposals)

    @torch.no_grad()
    def detect(self, images: torch.Tensor, score_threshold: Optional[float] = None,
               nms_iou: Optional[float] = None,
               max_detections: Optional[int] = None) -> List[List[Detection]]:
        """Scored labeled boxes for every image after per-class NMS"""
        score_threshold = self.config.score_threshold if score_threshold is None else score_threshold
        nms_iou = self.config.nms_iou if nms_iou is None else nms_iou
        max_detections = self.config.max_detections if max_detections is None else max_detections

        image_size = tuple(images.shape[-2:])
        features = self.backbone(images)
        proposals, _ = self.rpn(features, image_size)
        projected = self.roi_extractor.project(features)

        results: List[List[Detection]] = []
        for i, props in enumerate(proposals):
            if len(props) == 0:
                results.append([])
                continue
            heads = self._heads(projected[i:i + 1], [props.boxes])
            results.append(self._postprocess(heads, props.boxes, image_size,
                                             score_threshold, nms_iou, max_detections))
        return results

    def inference(self, image: torch.Tensor, score_threshold: Optional[float] = None,
                  nms_iou: Optional[float] = None,
                  max_detections: Optional[int] = None) -> List[Detection]:
        """Detections for a single C x H x W image"""
        return self.detect(image[None], score_threshold, nms_iou, max_detections)[0]

    def _postprocess(self, heads: DetectorOutput, proposals: torch.Tensor, image_size: Tuple[int, int],
                     score_threshold: float, nms_iou: float, max_detections: int) -> List[Detection]:
        boxes = clip_boxes_to_image(self.box_coder.decode(heads.box_deltas, proposals), image_size)
        scores = heads.class_scores[:, : self.num_classes]

        n, c = scores.shape
        boxes = boxes[:, None, :].expand(n, c, 4).reshape(-1, 4)
        labels = torch.arange(c, device=scores.device).repeat(n)
        scores = scores.reshape(-1)

        keep = torch.nonzero(scores >= score_threshold).flatten()
        boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
        keep = remove_small_boxes(boxes, 1e-2)
        boxes, scores, labels = boxes[keep], scores[keep], labels[keep]

        keep = batched_nms(boxes, scores, labels, nms_iou)[:max_detections]
        return [
            Detection(LabeledBox(Box(*(float(v) for v in boxes[j].tolist())), int(labels[j])), float(scores[j]))
            for j in keep.tolist()
        ]
