"""
Detection Head Losses Module
Classification (cross-entropy or focal) and smooth-L1 regression losses for sampled RoIs
"""

from typing import Tuple

import torch
import torch.nn.functional as F


HEAD_LOSS_MODES = ("cross_entropy", "focal")


def focal_loss(class_logits: torch.Tensor, targets: torch.Tensor, background: int,
               gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Multi-class focal loss, mean over RoIs.

    Foreground targets are weighted by ``alpha``, background by ``1 - alpha``.
    """
    log_p = F.log_softmax(class_logits, dim=1).gather(1, targets[:, None]).squeeze(1)
    p_t = log_p.exp()
    alpha_t = torch.where(
        targets != background,
        torch.full_like(log_p, alpha),
        torch.full_like(log_p, 1.0 - alpha),
    )
    return (-alpha_t * (1.0 - p_t).pow(gamma) * log_p).mean()


def head_losses(class_logits: torch.Tensor, box_deltas: torch.Tensor,
                assigned_class: torch.Tensor, regression_targets: torch.Tensor,
                background: int, mode: str = "cross_entropy",
                focal_gamma: float = 2.0, focal_alpha: float = 0.25) -> Tuple[torch.Tensor, torch.Tensor]:
    """(L_cls, L_reg) for one batch of sampled RoIs"""
    if mode not in HEAD_LOSS_MODES:
        raise ValueError(f"Unknown head loss mode '{mode}', expected one of {HEAD_LOSS_MODES}")

    if class_logits.shape[0] == 0:
        zero = class_logits.sum() * 0.0 + box_deltas.sum() * 0.0
        return zero, zero

    if mode == "focal":
        loss_cls = focal_loss(class_logits, assigned_class, background, focal_gamma, focal_alpha)
    else:
        loss_cls = F.cross_entropy(class_logits, assigned_class)

    foreground = assigned_class != background
    if foreground.any():
        loss_reg = F.smooth_l1_loss(
            box_deltas[foreground], regression_targets[foreground], beta=1.0 / 9, reduction="sum"
        ) / assigned_class.numel()
    else:
        loss_reg = box_deltas.sum() * 0.0
    return loss_cls, loss_reg
