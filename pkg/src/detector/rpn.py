"""
Region Proposal Network Module
Anchor generation, anchor target assignment, objectness/regression losses and proposals
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import box_iou, clip_boxes_to_image, nms, remove_small_boxes

from .backbone import ConfigError, FeatureMap
from .box_coder import BoxCoder


NEGATIVE, IGNORE, POSITIVE = 0, -1, 1


@dataclass
class ProposalSet:
    """Proposals of one image: boxes (N x 4, xyxy) and objectness in [0, 1]"""
    boxes: torch.Tensor
    objectness: torch.Tensor

    def __len__(self) -> int:
        return self.boxes.shape[0]


class AnchorGenerator:
    """Square anchors of several sizes centered on every feature cell"""

    def __init__(self, sizes: Sequence[float] = (16.0, 32.0, 64.0),
                 aspect_ratios: Sequence[float] = (1.0,)):
        if not sizes or not aspect_ratios:
            raise ConfigError("RPN needs at least one anchor size and aspect ratio")
        self.sizes = tuple(float(s) for s in sizes)
        self.aspect_ratios = tuple(float(r) for r in aspect_ratios)

    @property
    def num_anchors(self) -> int:
        return len(self.sizes) * len(self.aspect_ratios)

    def base_anchors(self, dtype=torch.float32) -> torch.Tensor:
        rows = []
        for size in self.sizes:
            for ratio in self.aspect_ratios:
                h = size * ratio ** 0.5
                w = size / ratio ** 0.5
                rows.append([-w / 2, -h / 2, w / 2, h / 2])
        return torch.tensor(rows, dtype=dtype)

    def grid_anchors(self, feature_size: Tuple[int, int], stride: int,
                     dtype=torch.float32, device=None) -> torch.Tensor:
        """All anchors in (y, x, anchor) order, shape (H' * W' * A) x 4"""
        fh, fw = feature_size
        ys = (torch.arange(fh, dtype=dtype, device=device) + 0.5) * stride
        xs = (torch.arange(fw, dtype=dtype, device=device) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        shifts = torch.stack((cx, cy, cx, cy), dim=-1).reshape(-1, 1, 4)
        return (shifts + self.base_anchors(dtype).to(device)[None]).reshape(-1, 4)


def assign_anchor_targets(anchors: torch.Tensor, gt_boxes: torch.Tensor,
                          pos_iou: float = 0.7, neg_iou: float = 0.3) -> Tuple[torch.Tensor, torch.Tensor]:
    """Label anchors positive / negative / ignored against GT boxes.

    Anchors reaching ``pos_iou`` are positive, as is every anchor that ties for the
    best overlap with some GT. Returns (labels, matched GT index per anchor).
    """
    labels = torch.full((anchors.shape[0],), IGNORE, dtype=torch.long, device=anchors.device)
    matched = torch.zeros((anchors.shape[0],), dtype=torch.long, device=anchors.device)
    if gt_boxes.numel() == 0:
        labels.fill_(NEGATIVE)
        return labels, matched

    overlaps = box_iou(anchors, gt_boxes.to(anchors.dtype))
    best_iou, matched = overlaps.max(dim=1)
    labels[best_iou < neg_iou] = NEGATIVE
    labels[best_iou >= pos_iou] = POSITIVE

    best_per_gt = overlaps.max(dim=0).values
    for g in range(gt_boxes.shape[0]):
        if best_per_gt[g] <= 0:
            continue
        hits = torch.nonzero(overlaps[:, g] == best_per_gt[g]).flatten()
        labels[hits] = POSITIVE
        matched[hits] = g
    return labels, matched


def sample_anchor_labels(labels: torch.Tensor, batch_size: int,
                         positive_fraction: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Random subset of positive and negative anchor indices"""
    positive = torch.nonzero(labels == POSITIVE).flatten()
    negative = torch.nonzero(labels == NEGATIVE).flatten()

    num_pos = min(int(batch_size * positive_fraction), positive.numel())
    num_neg = min(batch_size - num_pos, negative.numel())

    positive = positive[torch.randperm(positive.numel(), device=labels.device)[:num_pos]]
    negative = negative[torch.randperm(negative.numel(), device=labels.device)[:num_neg]]
    return positive, negative


class RegionProposalNetwork(nn.Module):
    """Objectness and anchor-delta head over a single feature level"""

    def __init__(self, in_channels: int, anchor_generator: AnchorGenerator,
                 hidden_channels: int = 128,
                 batch_size_per_image: int = 256, positive_fraction: float = 0.5,
                 pos_iou: float = 0.7, neg_iou: float = 0.3,
                 pre_nms_top_n: int = 1000, post_nms_top_n_train: int = 300,
                 post_nms_top_n_test: int = 100, nms_thresh: float = 0.7,
                 min_size: float = 1.0):
        super().__init__()
        if anchor_generator.num_anchors == 0:
            raise ConfigError("RPN configured with zero anchors")

        self.anchor_generator = anchor_generator
        num_anchors = anchor_generator.num_anchors
        self.conv = nn.Conv2d(in_channels, hidden_channels, kernel_size=3, padding=1)
        self.cls_logits = nn.Conv2d(hidden_channels, num_anchors, kernel_size=1)
        self.bbox_pred = nn.Conv2d(hidden_channels, num_anchors * 4, kernel_size=1)
        for layer in (self.conv, self.cls_logits, self.bbox_pred):
            nn.init.normal_(layer.weight, std=0.01)
            nn.init.zeros_(layer.bias)

        self.box_coder = BoxCoder((1.0, 1.0, 1.0, 1.0))
        self.batch_size_per_image = batch_size_per_image
        self.positive_fraction = positive_fraction
        self.pos_iou = pos_iou
        self.neg_iou = neg_iou
        self.pre_nms_top_n = pre_nms_top_n
        self.post_nms_top_n_train = post_nms_top_n_train
        self.post_nms_top_n_test = post_nms_top_n_test
        self.nms_thresh = nms_thresh
        self.min_size = min_size

    def post_nms_top_n(self) -> int:
        return self.post_nms_top_n_train if self.training else self.post_nms_top_n_test

    def _head(self, features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        batch = features.shape[0]
        a = self.anchor_generator.num_anchors
        hidden = F.relu(self.conv(features))
        logits = self.cls_logits(hidden).permute(0, 2, 3, 1).reshape(batch, -1)
        deltas = self.bbox_pred(hidden)
        fh, fw = deltas.shape[-2:]
        deltas = deltas.view(batch, a, 4, fh, fw).permute(0, 3, 4, 1, 2).reshape(batch, -1, 4)
        return logits, deltas

    @torch.no_grad()
    def _propose(self, logits: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor,
                 image_size: Tuple[int, int]) -> ProposalSet:
        boxes = clip_boxes_to_image(self.box_coder.decode(deltas, anchors), image_size)
        scores = torch.sigmoid(logits)

        top = scores.topk(min(self.pre_nms_top_n, scores.numel())).indices
        boxes, scores = boxes[top], scores[top]

        keep = remove_small_boxes(boxes, self.min_size)
        boxes, scores = boxes[keep], scores[keep]

        keep = nms(boxes, scores, self.nms_thresh)[: self.post_nms_top_n()]
        return ProposalSet(boxes[keep], scores[keep])

    def compute_loss(self, logits: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor,
                     gt_boxes: Sequence[torch.Tensor]) -> Dict[str, torch.Tensor]:
        objectness_terms, box_terms = [], []
        for img_logits, img_deltas, gts in zip(logits, deltas, gt_boxes):
            labels, matched = assign_anchor_targets(anchors, gts, self.pos_iou, self.neg_iou)
            positive, negative = sample_anchor_labels(labels, self.batch_size_per_image, self.positive_fraction)
            sampled = torch.cat((positive, negative))

            objectness_terms.append(
                F.binary_cross_entropy_with_logits(
                    img_logits[sampled], (labels[sampled] == POSITIVE).to(img_logits.dtype)
                )
            )
            if positive.numel():
                targets = self.box_coder.encode(anchors[positive], gts[matched[positive]].to(anchors.dtype))
                box_terms.append(
                    F.smooth_l1_loss(img_deltas[positive], targets, beta=1.0 / 9, reduction="sum")
                    / max(1, sampled.numel())
                )
            else:
                box_terms.append(img_deltas.sum() * 0.0)

        return {
            'rpn_objectness': torch.stack(objectness_terms).mean(),
            'rpn_box': torch.stack(box_terms).mean(),
        }

    def forward(self, features: FeatureMap, image_size: Tuple[int, int],
                gt_boxes: Optional[Sequence[torch.Tensor]] = None
                ) -> Tuple[List[ProposalSet], Dict[str, torch.Tensor]]:
        values = features.values
        logits, deltas = self._head(values)
        anchors = self.anchor_generator.grid_anchors(
            values.shape[-2:], features.stride, dtype=values.dtype, device=values.device
        )

        proposals = [
            self._propose(logits[i], deltas[i], anchors, image_size) for i in range(values.shape[0])
        ]
        losses: Dict[str, torch.Tensor] = {}
        if gt_boxes is not None:
            losses = self.compute_loss(logits, deltas, anchors, gt_boxes)
        return proposals, losses
