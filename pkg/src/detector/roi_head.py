"""
RoI Head Module
Proposal sampling, background filtering, RoI pooling, E1 projection and shared head
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import RoIAlign, box_iou

from .backbone import FeatureMap
from .box_coder import BoxCoder


ROI_BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


@dataclass
class SampledRoIs:
    """RoIs of one image with their training assignments.

    ``assigned_class`` equals ``background`` for background RoIs.
    ``assigned_gt`` is -1 for background. ``is_gt`` marks injected GT boxes.
    """
    boxes: torch.Tensor
    assigned_class: torch.Tensor
    assigned_gt: torch.Tensor
    regression_targets: torch.Tensor
    is_gt: torch.Tensor
    background: int

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def foreground_mask(self) -> torch.Tensor:
        return self.assigned_class != self.background

    def subset(self, index: torch.Tensor) -> "SampledRoIs":
        return SampledRoIs(
            self.boxes[index], self.assigned_class[index], self.assigned_gt[index],
            self.regression_targets[index], self.is_gt[index], self.background,
        )


def sample_proposals(proposals: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor,
                     k: int, num_classes: int, fg_iou: float = 0.5, fg_fraction: float = 0.25,
                     box_coder: Optional[BoxCoder] = None,
                     generator: Optional[torch.Generator] = None) -> SampledRoIs:
    """Assign proposals to GT boxes and sample at most ``k`` RoIs.

    GT boxes join the candidate set. Candidates with IoU >= ``fg_iou`` against
    some GT are foreground (that GT's class), the rest background. Foreground
    is capped at ``fg_fraction`` of ``k``. Foreground RoIs come first.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    box_coder = box_coder or BoxCoder(ROI_BOX_WEIGHTS)
    device = proposals.device
    gt_boxes = gt_boxes.to(proposals.dtype)

    candidates = torch.cat((proposals, gt_boxes), dim=0)
    is_gt = torch.cat((
        torch.zeros(proposals.shape[0], dtype=torch.bool, device=device),
        torch.ones(gt_boxes.shape[0], dtype=torch.bool, device=device),
    ))

    if gt_boxes.shape[0] == 0:
        assigned_gt = torch.full((candidates.shape[0],), -1, dtype=torch.long, device=device)
        fg_mask = torch.zeros(candidates.shape[0], dtype=torch.bool, device=device)
    else:
        best_iou, assigned_gt = box_iou(candidates, gt_boxes).max(dim=1)
        fg_mask = best_iou >= fg_iou

    fg_idx = torch.nonzero(fg_mask).flatten()
    bg_idx = torch.nonzero(~fg_mask).flatten()
    num_fg = min(int(k * fg_fraction), fg_idx.numel())
    num_bg = min(k - num_fg, bg_idx.numel())
    fg_idx = fg_idx[torch.randperm(fg_idx.numel(), generator=generator)[:num_fg].to(device)]
    bg_idx = bg_idx[torch.randperm(bg_idx.numel(), generator=generator)[:num_bg].to(device)]
    keep = torch.cat((fg_idx, bg_idx))

    boxes = candidates[keep]
    fg = fg_mask[keep]
    gt_index = torch.where(fg, assigned_gt[keep], torch.full_like(keep, -1))
    classes = torch.full_like(keep, num_classes)
    targets = torch.zeros_like(boxes)
    if fg.any():
        classes[fg] = gt_labels.to(device)[gt_index[fg]]
        targets[fg] = box_coder.encode(boxes[fg], gt_boxes[gt_index[fg]])

    return SampledRoIs(boxes, classes, gt_index, targets, is_gt[keep], num_classes)


def filter_background(rois: SampledRoIs, *per_roi: torch.Tensor):
    """Foreground RoIs only, in input order.

    Tensors in ``per_roi`` hold one row per RoI and are filtered alongside;
    when any are given the result is ``(rois, *filtered)``.
    """
    index = torch.nonzero(rois.foreground_mask).flatten()
    kept = rois.subset(index)
    if not per_roi:
        return kept
    for tensor in per_roi:
        if tensor.shape[0] != len(rois):
            raise ValueError(f"Per-RoI tensor has {tensor.shape[0]} rows for {len(rois)} RoIs")
    return (kept, *(tensor[index.to(tensor.device)] for tensor in per_roi))


class RoIFeatureExtractor(nn.Module):
    """Projects the feature map to ``out_channels`` and RoIAligns a fixed grid per box"""

    def __init__(self, in_channels: int, stride: int, out_channels: int = 256,
                 output_size: int = 7, sampling_ratio: int = 2):
        super().__init__()
        self.channel_proj = (
            nn.Identity() if in_channels == out_channels
            else nn.Conv2d(in_channels, out_channels, kernel_size=1)
        )
        self.out_channels = out_channels
        self.output_size = output_size
        self.align = RoIAlign((output_size, output_size), spatial_scale=1.0 / stride,
                              sampling_ratio=sampling_ratio, aligned=True)

    def project(self, features: FeatureMap) -> torch.Tensor:
        return self.channel_proj(features.values)

    def forward(self, projected: torch.Tensor, boxes: Sequence[torch.Tensor]) -> torch.Tensor:
        for b in boxes:
            if b.numel() and ((b[:, 2] <= b[:, 0]) | (b[:, 3] <= b[:, 1])).any():
                raise ValueError("RoI pooling received a degenerate box")
        boxes = [b.to(projected.dtype) for b in boxes]
        if sum(b.shape[0] for b in boxes) == 0:
            return projected.new_zeros((0, self.out_channels, self.output_size, self.output_size))
        return self.align(projected, boxes)


class ProjectionE1(nn.Module):
    """Learned conv projection on pooled RoI features, shared by the RoI and GT paths"""

    def __init__(self, channels: int = 256):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        nn.init.kaiming_normal_(self.conv.weight, mode="fan_out", nonlinearity="relu")
        nn.init.zeros_(self.conv.bias)

    def forward(self, roi_features: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv(roi_features))


class SharedHead(nn.Module):
    """Two fully connected layers mapping E1 output to class embeddings"""

    def __init__(self, in_features: int, representation_size: int = 1024):
        super().__init__()
        self.fc6 = nn.Linear(in_features, representation_size)
        self.fc7 = nn.Linear(representation_size, representation_size)

    def forward(self, e1_features: torch.Tensor) -> torch.Tensor:
        x = e1_features.flatten(start_dim=1)
        return F.relu(self.fc7(F.relu(self.fc6(x))))


class BoxPredictor(nn.Module):
    """Class logits over C + 1 (background last) and class-agnostic box deltas"""

    def __init__(self, representation_size: int, num_classes: int):
        super().__init__()
        self.cls_score = nn.Linear(representation_size, num_classes + 1)
        self.bbox_pred = nn.Linear(representation_size, 4)
        nn.init.normal_(self.cls_score.weight, std=0.01)
        nn.init.normal_(self.bbox_pred.weight, std=0.001)
        nn.init.zeros_(self.cls_score.bias)
        nn.init.zeros_(self.bbox_pred.bias)

    def forward(self, class_embeddings: torch.Tensor):
        return self.cls_score(class_embeddings), self.bbox_pred(class_embeddings)


def concat_rois(rois: List[SampledRoIs]) -> SampledRoIs:
    """Stack the RoIs of several images into one record"""
    background = rois[0].background
    return SampledRoIs(
        torch.cat([r.boxes for r in rois]),
        torch.cat([r.assigned_class for r in rois]),
        torch.cat([r.assigned_gt for r in rois]),
        torch.cat([r.regression_targets for r in rois]),
        torch.cat([r.is_gt for r in rois]),
        background,
    )
